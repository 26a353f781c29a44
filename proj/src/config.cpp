#include "kvla/config.hpp"

#include <json.hpp>
#include <stdexcept>

#include "kvla/rng.hpp"

namespace kvla {

using nlohmann::json;

namespace {

json world_json(const WorldSpec& w) {
  json cells = json::array();
  for (const PositionCell& c : w.cells) {
    cells.push_back({{"name", c.name},
                     {"x", c.x0},
                     {"y", c.y0},
                     {"width", c.width},
                     {"height", c.height}});
  }
  json entities = json::array();
  for (const EntityDef& e : w.entities) {
    entities.push_back({{"name", e.name},
                        {"attributes", e.attributes},
                        {"seen", e.seen}});
  }
  return json{{"canvas", w.canvas},
              {"cells", cells},
              {"entities", entities},
              {"present_rate", w.present_rate},
              {"unseen_present_rate", w.unseen_present_rate},
              {"uncertain_rate", w.uncertain_rate},
              {"absent_mention_rate", w.absent_mention_rate},
              {"position_mention_rate", w.position_mention_rate},
              {"filler_rate", w.filler_rate},
              {"noise", w.noise},
              {"fractions", w.fractions}};
}

void world_apply(const json& j, WorldSpec& w) {
  if (j.contains("canvas")) w.canvas = j.at("canvas").get<std::size_t>();
  if (j.contains("cells")) {
    w.cells.clear();
    for (const json& c : j.at("cells")) {
      w.cells.push_back({c.at("name").get<std::string>(),
                         c.at("x").get<std::size_t>(),
                         c.at("y").get<std::size_t>(),
                         c.at("width").get<std::size_t>(),
                         c.at("height").get<std::size_t>()});
    }
  }
  if (j.contains("entities")) {
    w.entities.clear();
    for (const json& e : j.at("entities")) {
      w.entities.push_back(
          {e.at("name").get<std::string>(),
           e.at("attributes").get<std::vector<std::string>>(),
           e.at("seen").get<bool>()});
    }
  }
  if (j.contains("present_rate")) w.present_rate = j.at("present_rate");
  if (j.contains("unseen_present_rate")) {
    w.unseen_present_rate = j.at("unseen_present_rate");
  }
  if (j.contains("uncertain_rate")) w.uncertain_rate = j.at("uncertain_rate");
  if (j.contains("absent_mention_rate")) {
    w.absent_mention_rate = j.at("absent_mention_rate");
  }
  if (j.contains("position_mention_rate")) {
    w.position_mention_rate = j.at("position_mention_rate");
  }
  if (j.contains("filler_rate")) w.filler_rate = j.at("filler_rate");
  if (j.contains("noise")) w.noise = j.at("noise");
  if (j.contains("fractions")) {
    const auto f = j.at("fractions").get<std::vector<double>>();
    if (f.size() != 3) {
      throw std::invalid_argument("config: fractions needs three entries");
    }
    w.fractions = {f[0], f[1], f[2]};
  }
}

json model_json(const ModelConfig& m) {
  return json{{"image_size", m.image_size},
              {"image_channels", m.image_channels},
              {"conv_channels", m.conv_channels},
              {"d", m.d},
              {"d_prime", m.d_prime},
              {"layers", m.layers},
              {"heads", m.heads},
              {"ffn_mult", m.ffn_mult},
              {"query_self_attention", m.query_self_attention},
              {"layer_norm_eps", m.layer_norm_eps}};
}

void model_apply(const json& j, ModelConfig& m) {
  if (j.contains("image_size")) m.image_size = j.at("image_size");
  if (j.contains("image_channels")) m.image_channels = j.at("image_channels");
  if (j.contains("conv_channels")) {
    m.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  }
  if (j.contains("d")) m.d = j.at("d");
  if (j.contains("d_prime")) m.d_prime = j.at("d_prime");
  if (j.contains("layers")) m.layers = j.at("layers");
  if (j.contains("heads")) m.heads = j.at("heads");
  if (j.contains("ffn_mult")) m.ffn_mult = j.at("ffn_mult");
  if (j.contains("query_self_attention")) {
    m.query_self_attention = j.at("query_self_attention");
  }
  if (j.contains("layer_norm_eps")) m.layer_norm_eps = j.at("layer_norm_eps");
}

json train_json(const TrainConfig& t) {
  return json{{"alpha_loc", t.alpha_loc},
              {"alpha_cls", t.alpha_cls},
              {"negatives", t.negatives},
              {"learning_rate", t.learning_rate},
              {"warmup_rate", t.warmup_rate},
              {"warmup_epochs", t.warmup_epochs},
              {"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"loc_variant",
               t.loc_variant == LocVariant::Log ? "log" : "literal"},
              {"entity_translation", t.entity_translation},
              {"weight_decay", t.weight_decay}};
}

void train_apply(const json& j, TrainConfig& t) {
  if (j.contains("alpha_loc")) t.alpha_loc = j.at("alpha_loc");
  if (j.contains("alpha_cls")) t.alpha_cls = j.at("alpha_cls");
  if (j.contains("negatives")) t.negatives = j.at("negatives");
  if (j.contains("learning_rate")) t.learning_rate = j.at("learning_rate");
  if (j.contains("warmup_rate")) t.warmup_rate = j.at("warmup_rate");
  if (j.contains("warmup_epochs")) t.warmup_epochs = j.at("warmup_epochs");
  if (j.contains("epochs")) t.epochs = j.at("epochs");
  if (j.contains("batch_size")) t.batch_size = j.at("batch_size");
  if (j.contains("loc_variant")) {
    const std::string v = j.at("loc_variant");
    if (v == "log") {
      t.loc_variant = LocVariant::Log;
    } else if (v == "literal") {
      t.loc_variant = LocVariant::Literal;
    } else {
      throw std::invalid_argument("config: loc_variant must be log|literal");
    }
  }
  if (j.contains("entity_translation")) {
    t.entity_translation = j.at("entity_translation");
  }
  if (j.contains("weight_decay")) t.weight_decay = j.at("weight_decay");
}

}  // namespace

void RunConfig::validate() const {
  world.validate();
  model.validate();
  if (samples == 0) throw std::invalid_argument("config: samples must be >= 1");
  if (world.canvas != model.image_size) {
    throw std::invalid_argument(
        "config: world canvas must equal model image size");
  }
  if (embedder.dim != model.d_prime) {
    throw std::invalid_argument("config: embedder dim must equal d'");
  }
  // position vocabulary is the cells plus unspecified and other
  train.validate(world.cells.size() + 2);
}

std::uint64_t RunConfig::fingerprint() const {
  return fnv1a(config_to_json(*this));
}

RunConfig desk_config() {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.samples = 2000;
  cfg.world = desk_world();
  cfg.world.uncertain_rate = 0.05;
  cfg.world.noise = 0.015;
  cfg.world.position_mention_rate = 0.9;
  cfg.model.image_size = 32;
  cfg.model.image_channels = 1;
  cfg.model.conv_channels = {24, 48};
  cfg.model.d = 32;
  cfg.model.d_prime = 64;
  cfg.model.layers = 2;
  cfg.model.heads = 4;
  cfg.model.ffn_mult = 4;
  cfg.train.negatives = 4;
  cfg.train.learning_rate = 1.2e-3;
  cfg.train.warmup_rate = 1e-4;
  cfg.train.warmup_epochs = 2;
  cfg.train.epochs = 30;
  cfg.train.batch_size = 16;
  cfg.embedder.dim = 64;
  cfg.validate();
  return cfg;
}

RunConfig paper_config() {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.samples = 2000;
  cfg.world = paper_world();
  cfg.model.image_size = 224;
  cfg.model.image_channels = 1;
  cfg.model.conv_channels = {32, 64, 128, 256};
  cfg.model.d = 256;
  cfg.model.d_prime = 768;
  cfg.model.layers = 4;
  cfg.model.heads = 4;
  cfg.model.ffn_mult = 2;
  cfg.train.negatives = 7;
  cfg.train.learning_rate = 1e-4;
  cfg.train.warmup_rate = 1e-5;
  cfg.train.warmup_epochs = 5;
  cfg.train.epochs = 60;
  cfg.train.batch_size = 32;
  cfg.embedder.dim = 768;
  cfg.validate();
  return cfg;
}

RunConfig config_from_preset(const std::string& name) {
  if (name == "desk") return desk_config();
  if (name == "paper") return paper_config();
  throw std::invalid_argument("unknown preset: " + name);
}

std::string config_to_json(const RunConfig& config) {
  json j{{"seed", config.seed},
         {"samples", config.samples},
         {"world", world_json(config.world)},
         {"model", model_json(config.model)},
         {"train", train_json(config.train)},
         {"embedder",
          json{{"dim", config.embedder.dim}, {"seed", config.embedder.seed}}}};
  return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text, RunConfig base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: bad JSON: ") + e.what());
  }
  if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("samples")) base.samples = j.at("samples").get<std::size_t>();
  if (j.contains("world")) world_apply(j.at("world"), base.world);
  if (j.contains("model")) model_apply(j.at("model"), base.model);
  if (j.contains("train")) train_apply(j.at("train"), base.train);
  if (j.contains("embedder")) {
    const json& e = j.at("embedder");
    if (e.contains("dim")) base.embedder.dim = e.at("dim").get<std::size_t>();
    if (e.contains("seed")) {
      base.embedder.seed = e.at("seed").get<std::uint64_t>();
    }
  }
  return base;
}

std::string world_to_json(const WorldSpec& spec) {
  return world_json(spec).dump(2) + "\n";
}

WorldSpec world_from_json(const std::string& text) {
  WorldSpec spec;
  spec.cells.clear();
  spec.entities.clear();
  world_apply(json::parse(text), spec);
  return spec;
}

std::uint64_t world_spec_hash(const WorldSpec& spec) {
  return fnv1a(world_to_json(spec));
}

TextEmbedder make_embedder(const RunConfig& config) {
  const std::uint64_t seed = config.embedder.seed != 0
                                 ? config.embedder.seed
                                 : derive_seed(config.seed, "embedder");
  return TextEmbedder(config.embedder.dim, seed);
}

}  // namespace kvla
