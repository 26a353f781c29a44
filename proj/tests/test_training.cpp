#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "kvla/inference.hpp"
#include "kvla/training.hpp"
#include "kvla/vision.hpp"

using namespace kvla;

namespace {

SupervisionTargets make_targets(std::vector<int> exist,
                                std::vector<int> positions) {
  SupervisionTargets t;
  t.exist = std::move(exist);
  for (int p : positions) {
    if (p < 0) {
      t.position.push_back(std::nullopt);
    } else {
      t.position.push_back(static_cast<std::size_t>(p));
    }
  }
  return t;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.conv_channels = {4, 8};
  cfg.d = 8;
  cfg.d_prime = 12;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.validate();
  return cfg;
}

}  // namespace

TEST_CASE("loss_cls examples") {
  Tensor logits = Tensor::zeros({3});
  SupervisionTargets t = make_targets({1, kUnmentioned, -1}, {-1, -1, -1});
  Tensor loss = loss_cls(logits, t, nullptr);
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  SupervisionTargets silent = make_targets({-1, kUnmentioned, -1}, {-1, -1, -1});
  CHECK(loss_cls(logits, silent, nullptr).item() == 0.0);

  Tensor confident = Tensor::from_values({1}, {20.0});
  SupervisionTargets one = make_targets({1}, {-1});
  CHECK(loss_cls(confident, one, nullptr).item() < 1e-8);
}

TEST_CASE("perturbing unmentioned logits leaves loss_cls bitwise unchanged") {
  Rng rng(3);
  std::vector<double> values(5);
  for (double& v : values) v = rng.next_gaussian();
  SupervisionTargets t = make_targets({1, kUnmentioned, 0, -1, 1},
                                      {-1, -1, -1, -1, -1});
  const double base =
      loss_cls(Tensor::from_values({5}, values), t, nullptr).item();
  values[1] += 37.5;   // unmentioned
  values[3] -= 12.25;  // uncertain is passed as well
  const double moved =
      loss_cls(Tensor::from_values({5}, values), t, nullptr).item();
  CHECK(base == moved);
}

TEST_CASE("loss_loc hand values and conventions") {
  // one query, one negative: |P| = 2 forces the negative, inner products 1, 0
  Tensor preds = Tensor::from_values({1, 2}, {1.0, 0.0});
  Tensor bank = Tensor::from_values({2, 2}, {1.0, 0.0, 0.0, 1.0});
  SupervisionTargets t = make_targets({1}, {0});

  const double e = std::exp(1.0);
  Tensor literal = loss_loc(preds, t, bank, 1, 99, LocVariant::Literal,
                            nullptr);
  CHECK(literal.item() == doctest::Approx(-e / (e + 1.0)).epsilon(1e-12));
  Tensor logged = loss_loc(preds, t, bank, 1, 99, LocVariant::Log, nullptr);
  CHECK(logged.item() ==
        doctest::Approx(-std::log(e / (e + 1.0))).epsilon(1e-12));

  // identical bank rows: log variant collapses to ln(M+1)
  Tensor flat_bank = Tensor::from_values({6, 2}, std::vector<double>(12, 0.5));
  SupervisionTargets t2 = make_targets({1}, {2});
  Tensor uniform = loss_loc(preds, t2, flat_bank, 4, 7, LocVariant::Log,
                            nullptr);
  CHECK(uniform.item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // no position labels contribute: exact zero
  SupervisionTargets none = make_targets({1, 0}, {-1, -1});
  Tensor preds2 = Tensor::from_values({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(loss_loc(preds2, none, bank, 1, 5, LocVariant::Log, nullptr).item() ==
        0.0);
}

TEST_CASE("negative sampling never draws the positive and stays distinct") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t bank = 6, positive = seed % bank, m = 4;
    auto negs = sample_negatives(bank, positive, m, rng);
    CHECK(negs.size() == m);
    std::set<std::size_t> unique(negs.begin(), negs.end());
    CHECK(unique.size() == m);
    CHECK(unique.count(positive) == 0);
    for (std::size_t n : negs) CHECK(n < bank);
  }
  Rng rng(1);
  CHECK_THROWS_AS(sample_negatives(4, 0, 4, rng), std::invalid_argument);

  TrainConfig bad;
  bad.negatives = 6;
  CHECK_THROWS_AS(bad.validate(6), std::invalid_argument);
}

TEST_CASE("total_loss arithmetic and gradients") {
  Tensor a = Tensor::scalar(0.7);
  Tensor b = Tensor::scalar(0.3);
  CHECK(total_loss(a, b, 1.0, 1.0, nullptr).item() == 1.0);
  CHECK(total_loss(a, b, 0.0, 1.0, nullptr).item() == 0.7);

  Tensor x = Tensor::from_values({3}, {0.2, -0.4, 0.9}, true);
  const double err = finite_diff_check(
      [](Tape& tape, const Tensor& p) {
        Tensor cls = reduce_sum(mul(p, p, &tape), std::nullopt, &tape);
        Tensor loc = reduce_sum(sigmoid(p, &tape), std::nullopt, &tape);
        return total_loss(cls, loc, 0.6, 1.7, &tape);
      },
      x);
  CHECK(err < 1e-6);
}

TEST_CASE("losses match straight-line scalar recomputation within 1e-12") {
  Rng rng(1234);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t nq = 1 + rng.next_below(8);
    const std::size_t np = 2 + rng.next_below(7);  // |P| in [2, 8]
    const std::size_t d = 1 + rng.next_below(6);
    const std::size_t m = 1 + rng.next_below(std::min<std::size_t>(4, np - 1));

    std::vector<double> logits(nq), preds(nq * d), bank(np * d);
    for (double& v : logits) v = rng.next_gaussian() * 2.0;
    for (double& v : preds) v = rng.next_gaussian();
    for (double& v : bank) v = rng.next_gaussian();
    SupervisionTargets targets;
    for (std::size_t i = 0; i < nq; ++i) {
      const int choice = static_cast<int>(rng.next_below(4));
      targets.exist.push_back(choice == 3 ? kUnmentioned : choice - 1);
      if (rng.next_unit() < 0.7) {
        targets.position.push_back(rng.next_below(np));
      } else {
        targets.position.push_back(std::nullopt);
      }
    }

    Tensor logits_t = Tensor::from_values({nq}, logits);
    Tensor preds_t = Tensor::from_values({nq, d}, preds);
    Tensor bank_t = Tensor::from_values({np, d}, bank);

    // independent recomputation of the classification loss
    double want_cls = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < nq; ++i) {
      if (targets.exist[i] != 0 && targets.exist[i] != 1) continue;
      const double z = logits[i];
      const double y = targets.exist[i];
      want_cls += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      ++counted;
    }
    if (counted > 0) want_cls /= static_cast<double>(counted);
    CHECK(std::abs(loss_cls(logits_t, targets, nullptr).item() - want_cls) <=
          1e-12);

    // independent recomputation of both location variants, reusing the same
    // sampling streams
    const std::uint64_t stream = derive_seed(4242, "trial", trial);
    for (LocVariant variant : {LocVariant::Log, LocVariant::Literal}) {
      double want = 0.0;
      std::size_t contributing = 0;
      for (std::size_t i = 0; i < nq; ++i) {
        if (!targets.position[i].has_value()) continue;
        Rng neg_rng(derive_seed(stream, "entity", i));
        auto negs = sample_negatives(np, *targets.position[i], m, neg_rng);
        auto dot = [&](std::size_t bank_row) {
          double acc = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            acc += preds[i * d + c] * bank[bank_row * d + c];
          }
          return acc;
        };
        const double zp = dot(*targets.position[i]);
        double denom = std::exp(zp);
        for (std::size_t u : negs) denom += std::exp(dot(u));
        const double ratio = std::exp(zp) / denom;
        want += variant == LocVariant::Log ? -std::log(ratio) : -ratio;
        ++contributing;
      }
      if (contributing > 0) want /= static_cast<double>(contributing);
      const double got =
          loss_loc(preds_t, targets, bank_t, m, stream, variant, nullptr)
              .item();
      CHECK(std::abs(got - want) <= 1e-12);
    }
  }
}

TEST_CASE("build_targets from parsed triplets") {
  KnowledgeBase kb;
  kb.entities = {{"a", "w1", true},
                 {"b", "w2", true},
                 {"c", "w3", false},
                 {"d", "w4", true}};
  kb.positions = {"p0", "p1", "unspecified", "other"};
  kb.validate();

  TripletSet ts;
  ts.triplets = {{0, 1, ExistLabel::Present},
                 {2, 0, ExistLabel::Present},   // unseen: ignored
                 {3, 2, ExistLabel::Uncertain}};  // unspecified position
  SupervisionTargets t = build_targets(ts, kb);
  REQUIRE(t.exist.size() == 3);  // three seen entities
  CHECK(t.exist[0] == 1);
  CHECK(t.exist[1] == kUnmentioned);
  CHECK(t.exist[2] == -1);
  CHECK(t.position[0].has_value());
  CHECK(*t.position[0] == 1);
  CHECK(!t.position[1].has_value());
  CHECK(!t.position[2].has_value());

  // absences keep their stated position
  TripletSet absent;
  absent.triplets = {{1, 0, ExistLabel::Absent}};
  SupervisionTargets ta = build_targets(absent, kb);
  CHECK(ta.exist[1] == 0);
  CHECK(*ta.position[1] == 0);
}

TEST_CASE("alpha_loc zero leaves position head gradients exactly zero") {
  ModelConfig cfg = tiny_config();
  Model model = Model::init(cfg, 55);
  WorldSpec spec = desk_world();
  spec.canvas = 16;
  spec.cells = {{"upper left", 0, 0, 16, 16}};
  spec.entities = {{"opacity", {"bright", "small", "sharp", "plain"}, true},
                   {"collapse", {"dim", "small", "soft", "striped"}, true}};
  auto samples = generate_dataset(spec, 8, 5);
  KnowledgeBase kb = build_knowledge_base(spec);
  ReportGrammar grammar = build_grammar(spec);
  TextEmbedder embedder(cfg.d_prime, 9001);
  Tensor queries = build_query_embeddings(kb, embedder);
  Tensor bank = build_position_bank(kb, embedder);

  Tape tape;
  FeatureMap fm = encode_image(samples[0].image, model.vision, cfg, &tape);
  FusionOutput out = fuse(fm, queries, model.fusion, cfg, &tape);
  SupervisionTargets targets =
      build_targets(parse_report(Report{samples[0].sentences}, grammar), kb);
  // force a usable classification target
  targets.exist[0] = 1;
  Tensor l_cls = loss_cls(out.exist_logits, targets, &tape);
  Tensor total = total_loss(l_cls, Tensor::scalar(0.0), 0.0, 1.0, &tape);
  tape.backward(total);
  for (const char* name :
       {"fusion.position.w1", "fusion.position.b1", "fusion.position.w2",
        "fusion.position.b2"}) {
    for (double g : model.params.at(name).grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.warmup_rate = 1e-5;
  cfg.warmup_epochs = 5;
  CHECK(scheduled_learning_rate(cfg, 0) == doctest::Approx(1e-5));
  CHECK(scheduled_learning_rate(cfg, 5) == doctest::Approx(1e-3));
  CHECK(scheduled_learning_rate(cfg, 17) == doctest::Approx(1e-3));
  const double mid = scheduled_learning_rate(cfg, 2);
  CHECK(mid > 1e-5);
  CHECK(mid < 1e-3);
}

TEST_CASE("one optimizer step descends on a frozen batch") {
  ModelConfig cfg = tiny_config();
  Model model = Model::init(cfg, 60);
  WorldSpec spec = desk_world();
  spec.canvas = 16;
  spec.cells = {{"upper left", 0, 0, 16, 16}};
  spec.entities = {{"opacity", {"bright", "small", "sharp", "plain"}, true},
                   {"collapse", {"dim", "small", "soft", "striped"}, true}};
  spec.present_rate = 0.6;
  auto samples = generate_dataset(spec, 6, 8);
  KnowledgeBase kb = build_knowledge_base(spec);
  ReportGrammar grammar = build_grammar(spec);
  TextEmbedder embedder(cfg.d_prime, 9001);
  Tensor queries = build_query_embeddings(kb, embedder);
  Tensor bank = build_position_bank(kb, embedder);

  std::vector<SupervisionTargets> targets;
  for (const Sample& s : samples) {
    targets.push_back(
        build_targets(parse_report(Report{s.sentences}, grammar), kb));
  }
  auto batch_loss_value = [&](Tape* tape) {
    Tensor acc;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      FeatureMap fm = encode_image(samples[i].image, model.vision, cfg, tape);
      FusionOutput out = fuse(fm, queries, model.fusion, cfg, tape);
      Tensor l_cls = loss_cls(out.exist_logits, targets[i], tape);
      Tensor l_loc = loss_loc(out.position_preds, targets[i], bank, 1,
                              derive_seed(1, "neg", 0, i), LocVariant::Log,
                              tape);
      Tensor total = total_loss(l_cls, l_loc, 1.0, 1.0, tape);
      acc = acc.defined() ? add(acc, total, tape) : total;
    }
    return scale(acc, 1.0 / static_cast<double>(samples.size()), tape);
  };

  Tape tape;
  Tensor loss = batch_loss_value(&tape);
  const double before = loss.item();
  tape.backward(loss);
  AdamW opt(model.params, 0.0);
  opt.step(1e-3);
  model.params.zero_grads();
  const double after = batch_loss_value(nullptr).item();
  CHECK(after < before);
}

TEST_CASE("short training runs are bitwise deterministic") {
  WorldSpec spec = desk_world();
  auto samples = generate_dataset(spec, 24, 17);
  KnowledgeBase kb = build_knowledge_base(spec);
  ReportGrammar grammar = build_grammar(spec);

  ModelConfig mcfg;
  mcfg.image_size = 32;
  mcfg.conv_channels = {4, 8};
  mcfg.d = 8;
  mcfg.d_prime = 16;
  mcfg.layers = 1;
  mcfg.heads = 2;

  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 8;
  tcfg.negatives = 3;
  tcfg.learning_rate = 1e-3;
  tcfg.warmup_epochs = 1;

  auto run = [&]() {
    Model model = Model::init(mcfg, 99);
    TextEmbedder embedder(mcfg.d_prime, 9001);
    Tensor queries = build_query_embeddings(kb, embedder);
    Tensor bank = build_position_bank(kb, embedder);
    TrainData data;
    data.samples = &samples;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].split == kSplitTrain) data.train_indices.push_back(i);
      data.targets.push_back(build_targets(
          parse_report(Report{samples[i].sentences}, grammar), kb));
    }
    AdamW opt(model.params, tcfg.weight_decay);
    std::ostringstream log;
    train_model(model, data, queries, bank, tcfg, 99, opt, &log);
    return model;
  };

  Model a = run();
  Model b = run();
  REQUIRE(a.params.count() == b.params.count());
  for (std::size_t p = 0; p < a.params.count(); ++p) {
    const auto& [name_a, tensor_a] = a.params.entries()[p];
    const auto& [name_b, tensor_b] = b.params.entries()[p];
    CHECK(name_a == name_b);
    REQUIRE(tensor_a.size() == tensor_b.size());
    for (std::size_t i = 0; i < tensor_a.size(); ++i) {
      CHECK(tensor_a.values()[i] == tensor_b.values()[i]);
    }
  }
}
