#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "kvla/commands.hpp"

namespace {

struct ConfigArgs {
  std::string preset = "desk";
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<double> alpha_loc;
  std::optional<double> alpha_cls;
  std::optional<std::size_t> negatives;
  std::optional<std::string> loc_variant;
  bool no_entity_translation = false;
  bool no_query_self_attention = false;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--preset", args.preset, "base preset: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--config", args.config_file,
                  "JSON config layered over the preset");
  cmd->add_option("--seed", args.seed, "run seed");
  cmd->add_option("--samples", args.samples, "dataset size for datagen");
  cmd->add_option("--epochs", args.epochs, "training epochs");
  cmd->add_option("--batch-size", args.batch_size, "training batch size");
  cmd->add_option("--lr", args.learning_rate, "learning rate");
  cmd->add_option("--alpha-loc", args.alpha_loc,
                  "weight of the position contrastive loss");
  cmd->add_option("--alpha-cls", args.alpha_cls,
                  "weight of the existence loss");
  cmd->add_option("--negatives", args.negatives,
                  "contrastive negatives per entity (M)");
  cmd->add_option("--loc-variant", args.loc_variant,
                  "position loss form: log or literal")
      ->check(CLI::IsMember({"log", "literal"}));
  cmd->add_flag("--no-entity-translation", args.no_entity_translation,
                "embed bare entity names instead of descriptions");
  cmd->add_flag("--no-query-self-attention", args.no_query_self_attention,
                "ablate self-attention across entity queries");
}

kvla::RunConfig build_config(const ConfigArgs& args) {
  kvla::RunConfig cfg = kvla::config_from_preset(args.preset);
  if (!args.config_file.empty()) {
    std::ifstream in(args.config_file);
    if (!in) {
      throw std::invalid_argument("cannot open config: " + args.config_file);
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    cfg = kvla::config_from_json(buffer.str(), cfg);
  }
  if (args.seed) cfg.seed = *args.seed;
  if (args.samples) cfg.samples = *args.samples;
  if (args.epochs) cfg.train.epochs = *args.epochs;
  if (args.batch_size) cfg.train.batch_size = *args.batch_size;
  if (args.learning_rate) cfg.train.learning_rate = *args.learning_rate;
  if (args.alpha_loc) cfg.train.alpha_loc = *args.alpha_loc;
  if (args.alpha_cls) cfg.train.alpha_cls = *args.alpha_cls;
  if (args.negatives) cfg.train.negatives = *args.negatives;
  if (args.loc_variant) {
    cfg.train.loc_variant = *args.loc_variant == "log"
                                ? kvla::LocVariant::Log
                                : kvla::LocVariant::Literal;
  }
  if (args.no_entity_translation) cfg.train.entity_translation = false;
  if (args.no_query_self_attention) cfg.model.query_self_attention = false;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-enhanced vision-language alignment, desk scale"};
  app.require_subcommand(1);

  ConfigArgs datagen_args, train_args, vocab_args;
  std::string datagen_out, train_data, train_out;
  auto* datagen = app.add_subcommand("datagen", "generate a synthetic dataset");
  add_config_options(datagen, datagen_args);
  datagen->add_option("--out", datagen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_config_options(train, train_args);
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();

  std::string eval_checkpoint, eval_data, eval_config_file;
  kvla::EvalOptions eval_options;
  std::string eval_unseen = "description";
  bool eval_force = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_checkpoint)->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", eval_options.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--unseen", eval_unseen,
                   "unseen-entity query mode: description, name, both, skip")
      ->check(CLI::IsMember({"description", "name", "both", "skip"}));
  eval->add_option("--report", eval_options.report_path,
                   "write the machine-readable report here");
  eval->add_option("--config", eval_config_file,
                   "config expected to match the checkpoint");
  eval->add_flag("--force-config", eval_force,
                 "proceed on config fingerprint mismatch");

  std::string ground_checkpoint, ground_image, ground_out;
  std::string ground_entity, ground_description;
  auto* ground_cmd = app.add_subcommand("ground", "write a grounding heatmap");
  ground_cmd->add_option("--checkpoint", ground_checkpoint)->required();
  ground_cmd->add_option("--image", ground_image, "input P5 graymap")
      ->required();
  ground_cmd->add_option("--query", ground_entity, "seen entity name");
  ground_cmd->add_option("--query-description", ground_description,
                         "free-text description (zero-shot path)");
  ground_cmd->add_option("--out", ground_out, "output heatmap path")
      ->required();

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "verify every differentiable operation and an end-to-end "
                   "loss against central finite differences");

  auto* vocab = app.add_subcommand("dump-vocab",
                                   "print the effective Q and P vocabularies");
  add_config_options(vocab, vocab_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (datagen->parsed()) {
      return kvla::run_datagen(build_config(datagen_args), datagen_out,
                               std::cout);
    }
    if (train->parsed()) {
      return kvla::run_train(build_config(train_args), train_data, train_out,
                             std::cout);
    }
    if (eval->parsed()) {
      if (eval_unseen == "description") {
        eval_options.unseen_mode = kvla::UnseenQueryMode::Description;
      } else if (eval_unseen == "name") {
        eval_options.unseen_mode = kvla::UnseenQueryMode::Name;
      } else if (eval_unseen == "both") {
        eval_options.unseen_mode = kvla::UnseenQueryMode::Both;
      } else {
        eval_options.unseen_mode = kvla::UnseenQueryMode::Skip;
      }
      std::optional<kvla::RunConfig> expected;
      if (!eval_config_file.empty()) {
        std::ifstream in(eval_config_file);
        if (!in) {
          throw std::invalid_argument("cannot open config: " +
                                      eval_config_file);
        }
        std::stringstream buffer;
        buffer << in.rdbuf();
        expected = kvla::config_from_json(buffer.str(), kvla::desk_config());
      }
      return kvla::run_eval(eval_checkpoint, eval_data, eval_options,
                            std::cout, expected ? &*expected : nullptr,
                            eval_force);
    }
    if (ground_cmd->parsed()) {
      kvla::Query query;
      query.entity = ground_entity;
      query.description = ground_description;
      return kvla::run_ground(ground_checkpoint, ground_image, query,
                              ground_out, std::cout);
    }
    if (gradcheck->parsed()) {
      return kvla::run_gradcheck(std::cout);
    }
    if (vocab->parsed()) {
      return kvla::run_dump_vocab(build_config(vocab_args), std::cout);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
