#include "kvla/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "kvla/dataset_io.hpp"
#include "kvla/vision.hpp"

namespace kvla {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::vector<std::size_t> indices_for_split(const std::vector<Sample>& samples,
                                           const std::string& split) {
  int want;
  if (split == "train") {
    want = kSplitTrain;
  } else if (split == "val") {
    want = kSplitVal;
  } else if (split == "test") {
    want = kSplitTest;
  } else {
    throw std::invalid_argument("unknown split: " + split);
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == want) out.push_back(i);
  }
  if (out.empty()) {
    throw std::invalid_argument("split '" + split + "' is empty");
  }
  return out;
}

void check_dataset_matches_config(const RunConfig& config,
                                  const DatasetOnDisk& ds) {
  if (world_spec_hash(config.world) != world_spec_hash(ds.spec)) {
    throw std::invalid_argument(
        "config world spec does not match the dataset; regenerate the "
        "dataset or fix the config");
  }
}

}  // namespace

Pipeline pipeline_from_checkpoint(LoadedCheckpoint loaded) {
  KnowledgeBase kb = build_knowledge_base(loaded.config.world);
  TextEmbedder embedder = make_embedder(loaded.config);
  return make_pipeline(std::move(loaded.model), std::move(kb), embedder,
                       loaded.config.train.entity_translation);
}

int run_datagen(const RunConfig& config, const std::string& out_dir,
                std::ostream& out) {
  config.validate();
  const std::vector<Sample> samples =
      generate_dataset(config.world, config.samples, config.seed);
  save_dataset(out_dir, config.world, config.seed, samples);
  {
    std::ofstream cfg_out(fs::path(out_dir) / "config.json");
    cfg_out << config_to_json(config);
  }
  std::size_t train = 0, val = 0, test = 0;
  for (const Sample& s : samples) {
    train += s.split == kSplitTrain;
    val += s.split == kSplitVal;
    test += s.split == kSplitTest;
  }
  out << "wrote " << samples.size() << " samples to " << out_dir << " (train "
      << train << ", val " << val << ", test " << test << ")\n";
  return 0;
}

int run_train(const RunConfig& config, const std::string& data_dir,
              const std::string& out_dir, std::ostream& out) {
  config.validate();
  DatasetOnDisk ds = load_dataset(data_dir);
  check_dataset_matches_config(config, ds);

  fs::create_directories(out_dir);
  Model model = Model::init(config.model, config.seed);
  TextEmbedder embedder = make_embedder(config);
  Tensor queries =
      build_query_embeddings(ds.kb, embedder, config.train.entity_translation);
  Tensor bank = build_position_bank(ds.kb, embedder);

  TrainData data;
  data.samples = &ds.samples;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].split == kSplitTrain) data.train_indices.push_back(i);
    data.targets.push_back(build_targets(
        parse_report(Report{ds.samples[i].sentences}, ds.grammar), ds.kb));
  }

  out << "training on " << data.train_indices.size() << " samples, "
      << queries.shape()[0] << " entity queries, "
      << model.params.total_values() << " parameters\n";

  AdamW optimizer(model.params, config.train.weight_decay);
  std::ofstream epoch_log(fs::path(out_dir) / "epochs.csv", std::ios::app);
  const std::vector<EpochStats> stats =
      train_model(model, data, queries, bank, config.train, config.seed,
                  optimizer, &epoch_log);

  const std::string checkpoint_path =
      (fs::path(out_dir) / "checkpoint.kvc").string();
  save_checkpoint(checkpoint_path, config, model, optimizer,
                  config.train.epochs);
  {
    std::ofstream cfg_out(fs::path(out_dir) / "config.json");
    cfg_out << config_to_json(config);
  }
  if (!stats.empty()) {
    out << "final epoch " << stats.back().epoch << ": cls "
        << fmt(stats.back().loss_cls) << ", loc " << fmt(stats.back().loss_loc)
        << ", total " << fmt(stats.back().loss_total) << "\n";
  }
  out << "checkpoint written to " << checkpoint_path << "\n";
  return 0;
}

std::string eval_report_text(const std::vector<EntityEval>& rows) {
  std::ostringstream out;
  for (const EntityEval& ev : rows) {
    const std::string entity =
        ev.query_kind == "seen" ? ev.entity : ev.entity + ":" + ev.query_kind;
    if (ev.has_classification) {
      out << "auc," << entity << "," << fmt(ev.auc) << "," << ev.n << "\n";
      out << "f1," << entity << "," << fmt(ev.f1) << "," << ev.n << "\n";
      out << "acc," << entity << "," << fmt(ev.accuracy) << "," << ev.n << "\n";
      out << "f1_threshold," << entity << "," << fmt(ev.threshold) << ","
          << ev.n << "\n";
    }
    if (ev.has_grounding) {
      out << "pointing," << entity << "," << fmt(ev.pointing_accuracy) << ","
          << ev.n_grounding << "\n";
      out << "dice," << entity << "," << fmt(ev.mean_dice) << ","
          << ev.n_grounding << "\n";
      out << "iou," << entity << "," << fmt(ev.mean_iou) << ","
          << ev.n_grounding << "\n";
      out << "det_precision," << entity << "," << fmt(ev.detection_precision)
          << "," << ev.n_grounding << "\n";
      out << "det_recall," << entity << "," << fmt(ev.detection_recall) << ","
          << ev.n_grounding << "\n";
    }
  }
  return out.str();
}

int run_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const EvalOptions& options, std::ostream& out,
             const RunConfig* expected_config, bool allow_config_mismatch) {
  LoadedCheckpoint loaded =
      load_checkpoint(checkpoint_path, expected_config, allow_config_mismatch);
  DatasetOnDisk ds = load_dataset(data_dir);
  check_dataset_matches_config(loaded.config, ds);

  TextEmbedder embedder = make_embedder(loaded.config);
  Pipeline pipeline =
      make_pipeline(std::move(loaded.model), ds.kb, embedder,
                    loaded.config.train.entity_translation);
  const std::vector<std::size_t> indices =
      indices_for_split(ds.samples, options.split);
  const std::vector<EntityEval> rows =
      evaluate(pipeline, ds.samples, indices, options.unseen_mode);

  const std::string report = eval_report_text(rows);
  if (!options.report_path.empty()) {
    std::ofstream report_out(options.report_path);
    if (!report_out) {
      throw std::runtime_error("cannot write report: " + options.report_path);
    }
    report_out << report;
  }

  out << "split " << options.split << ": " << indices.size() << " samples\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-28s %8s %8s %8s %9s %8s %8s\n",
                "entity", "auc", "f1", "acc", "pointing", "dice", "iou");
  out << line;
  for (const EntityEval& ev : rows) {
    const std::string entity =
        ev.query_kind == "seen" ? ev.entity : ev.entity + ":" + ev.query_kind;
    std::snprintf(
        line, sizeof(line), "%-28s %8s %8s %8s %9s %8s %8s\n", entity.c_str(),
        ev.has_classification ? fmt(ev.auc).c_str() : "-",
        ev.has_classification ? fmt(ev.f1).c_str() : "-",
        ev.has_classification ? fmt(ev.accuracy).c_str() : "-",
        ev.has_grounding ? fmt(ev.pointing_accuracy).c_str() : "-",
        ev.has_grounding ? fmt(ev.mean_dice).c_str() : "-",
        ev.has_grounding ? fmt(ev.mean_iou).c_str() : "-");
    out << line;
  }
  return 0;
}

int run_ground(const std::string& checkpoint_path,
               const std::string& image_path, const Query& query,
               const std::string& out_path, std::ostream& out) {
  Pipeline pipeline = pipeline_from_checkpoint(load_checkpoint(checkpoint_path));
  const Image image = read_pgm(image_path);
  const double score = classify(pipeline, image, query);
  Heatmap map = ground(pipeline, image, query);

  Image heat;
  heat.height = map.height;
  heat.width = map.width;
  heat.channels = 1;
  heat.pixels.resize(map.values.size());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    heat.pixels[i] = quantize_unit(map.values[i]);
  }
  write_pgm(out_path, heat);
  out << "score " << fmt(score) << ", heatmap written to " << out_path << "\n";
  return 0;
}

int run_dump_vocab(const RunConfig& config, std::ostream& out) {
  config.validate();
  const KnowledgeBase kb = build_knowledge_base(config.world);
  out << "entity query set Q (" << kb.seen_entities().size() << " seen):\n";
  for (std::size_t id : kb.seen_entities()) {
    out << "  " << kb.entities[id].name << ": "
        << kb.entities[id].description << "\n";
  }
  out << "unseen entities:\n";
  for (const auto& e : kb.entities) {
    if (!e.seen) out << "  " << e.name << ": " << e.description << "\n";
  }
  out << "position set P (" << kb.positions.size() << "):\n";
  for (std::size_t p = 0; p < kb.positions.size(); ++p) {
    out << "  " << position_prompt(kb, p) << "\n";
  }
  return 0;
}

// ---- gradient check harness -------------------------------------------------

namespace {

struct GradCheck {
  std::string name;
  double max_rel = 0.0;
};

Tensor random_probe(Shape shape, std::uint64_t seed, double sd = 1.0,
                    double min_abs = 0.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    do {
      x = rng.next_gaussian() * sd;
    } while (std::abs(x) < min_abs);
  }
  return Tensor::from_values(std::move(shape), std::move(v));
}

double end_to_end_check(std::ostream& out) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.conv_channels = {4, 8};
  cfg.d = 8;
  cfg.d_prime = 12;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.validate();
  Model model = Model::init(cfg, 2027);

  Image image;
  image.height = image.width = 16;
  image.channels = 1;
  image.pixels.resize(256);
  Rng rng(4);
  for (double& v : image.pixels) v = rng.next_unit();

  Tensor queries = random_probe({3, 12}, 5, 0.6);
  Tensor bank = random_probe({4, 12}, 6, 0.6);
  SupervisionTargets targets;
  targets.exist = {1, 0, -1};
  targets.position = {std::size_t{1}, std::size_t{3}, std::nullopt};

  auto build_loss = [&](Tape* tape) {
    FeatureMap fm = encode_image(image, model.vision, cfg, tape);
    FusionOutput fo = fuse(fm, queries, model.fusion, cfg, tape);
    Tensor l_cls = loss_cls(fo.exist_logits, targets, tape);
    Tensor l_loc = loss_loc(fo.position_preds, targets, bank, 2, 777,
                            LocVariant::Log, tape);
    return total_loss(l_cls, l_loc, 1.0, 1.0, tape);
  };

  double worst = 0.0;
  std::string worst_name = "-";
  for (auto& [name, tensor] : model.params.entries()) {
    const double err = param_finite_diff_check(tensor, build_loss);
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  }
  out << "  end-to-end loss over " << model.params.count()
      << " parameter blocks (" << model.params.total_values()
      << " values): max rel err " << worst << " at " << worst_name << "\n";
  return worst;
}

}  // namespace

int run_gradcheck(std::ostream& out) {
  const auto started = std::chrono::steady_clock::now();
  std::vector<GradCheck> checks;
  auto record = [&](const std::string& name,
                    const std::function<Tensor(Tape&, const Tensor&)>& f,
                    const Tensor& x) {
    checks.push_back({name, finite_diff_check(f, x)});
  };

  auto sum_sq = [](Tape& t, const Tensor& v) {
    return reduce_sum(mul(v, v, &t), std::nullopt, &t);
  };

  Tensor a = random_probe({3, 4}, 11);
  Tensor b = random_probe({3, 4}, 12);
  Tensor row = random_probe({4}, 13);
  record("add", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, add(x, b, &t));
  }, a);
  record("add broadcast", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, add(a, x, &t));
  }, row);
  record("sub", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, sub(x, b, &t));
  }, a);
  record("mul", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, mul(x, b, &t));
  }, a);
  record("scale", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, scale(x, -1.7, &t));
  }, a);
  record("sigmoid", [&](Tape& t, const Tensor& x) {
    return reduce_sum(sigmoid(x, &t), std::nullopt, &t);
  }, a);
  record("exp", [&](Tape& t, const Tensor& x) {
    return reduce_sum(exp(x, &t), std::nullopt, &t);
  }, a);
  record("log", [&](Tape& t, const Tensor& x) {
    return reduce_sum(log(x, &t), std::nullopt, &t);
  }, Tensor::from_values({6}, {0.3, 1.2, 2.5, 0.7, 4.0, 0.9}));
  record("relu", [&](Tape& t, const Tensor& x) {
    return reduce_sum(relu(x, &t), std::nullopt, &t);
  }, random_probe({8}, 15, 1.0, 1e-2));  // keep clear of the kink
  record("matmul", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, matmul(x, random_probe({4, 5}, 16), &t));
  }, a);
  record("transpose", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, transpose(x, &t));
  }, a);
  record("reshape", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, reshape(x, {4, 3}, &t));
  }, a);
  record("gather_rows", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, gather_rows(x, {2, 0, 2}, &t));
  }, a);
  record("softmax", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, softmax(x, 1, &t));
  }, a);
  record("reduce_sum axis", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, reduce_sum(x, 0, &t));
  }, a);
  record("reduce_mean axis", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, reduce_mean(x, 1, &t));
  }, a);
  record("reduce_max", [&](Tape& t, const Tensor& x) {
    MaxReduce mr = reduce_max(x, 1, &t);
    return sum_sq(t, mr.values);
  }, a);
  {
    Tensor gain = random_probe({4}, 17, 0.5);
    Tensor bias = random_probe({4}, 18, 0.5);
    record("layer_norm", [&](Tape& t, const Tensor& x) {
      return sum_sq(t, layer_norm(x, gain, bias, 1e-5, &t));
    }, a);
  }
  {
    Tensor weight = random_probe({3, 2, 3, 3}, 19, 0.5);
    Tensor bias = random_probe({3}, 20, 0.2);
    record("conv2d", [&](Tape& t, const Tensor& x) {
      return sum_sq(t, conv2d(x, weight, bias, 2, 1, &t));
    }, random_probe({2, 6, 6}, 21));
  }
  record("to_patch_matrix", [&](Tape& t, const Tensor& x) {
    return sum_sq(t, to_patch_matrix(x, &t));
  }, random_probe({3, 2, 4}, 22));
  {
    Tensor k = random_probe({5, 4}, 23);
    Tensor v = random_probe({5, 6}, 24);
    for (bool invariant : {false, true}) {
      record(invariant ? "attention (order-invariant)" : "attention",
             [&](Tape& t, const Tensor& x) {
               AttentionResult att =
                   scaled_dot_attention(x, k, v, 0.5, invariant, &t);
               return sum_sq(t, att.output);
             },
             random_probe({3, 4}, 25));
    }
  }
  record("bce_with_logits", [&](Tape& t, const Tensor& x) {
    return bce_with_logits_mean(x, {1, 0, 1, 0, 1, 1}, &t);
  }, random_probe({6}, 26, 2.0));
  {
    Tensor bank = random_probe({5, 4}, 27);
    std::vector<ContrastEntry> entries = {{0, 1, {0, 3}}, {2, 4, {2, 0}}};
    for (bool take_log : {true, false}) {
      record(take_log ? "position_contrast (log)"
                      : "position_contrast (literal)",
             [&](Tape& t, const Tensor& x) {
               return position_contrast_mean(x, bank, entries, take_log, &t);
             },
             random_probe({3, 4}, 28));
    }
  }

  double worst = 0.0;
  for (const GradCheck& check : checks) {
    char line[120];
    std::snprintf(line, sizeof(line), "  %-28s max rel err %.3e\n",
                  check.name.c_str(), check.max_rel);
    out << line;
    worst = std::max(worst, check.max_rel);
  }
  const double end_to_end = end_to_end_check(out);
  worst = std::max(worst, end_to_end);

  const double seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - started)
                             .count();
  char summary[120];
  std::snprintf(summary, sizeof(summary),
                "gradcheck %s: worst %.3e (threshold 1e-4), %.2f s\n",
                worst < 1e-4 ? "PASS" : "FAIL", worst, seconds);
  out << summary;
  return worst < 1e-4 ? 0 : 3;
}

}  // namespace kvla
