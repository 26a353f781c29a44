#pragma once

#include <iosfwd>
#include <string>

#include "kvla/checkpoint.hpp"
#include "kvla/config.hpp"
#include "kvla/inference.hpp"

namespace kvla {

// Command bodies shared by the CLI and the test harnesses. They throw
// std::invalid_argument for validation problems and other exceptions for
// runtime failures; the CLI maps those to exit codes 1 and 2. A non-zero
// return value reports a failed check (exit code 3).

int run_datagen(const RunConfig& config, const std::string& out_dir,
                std::ostream& out);

int run_train(const RunConfig& config, const std::string& data_dir,
              const std::string& out_dir, std::ostream& out);

struct EvalOptions {
  std::string split = "test";
  UnseenQueryMode unseen_mode = UnseenQueryMode::Description;
  std::string report_path;  // empty: stdout only
};

int run_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const EvalOptions& options, std::ostream& out,
             const RunConfig* expected_config = nullptr,
             bool allow_config_mismatch = false);

int run_ground(const std::string& checkpoint_path,
               const std::string& image_path, const Query& query,
               const std::string& out_path, std::ostream& out);

int run_gradcheck(std::ostream& out);

int run_dump_vocab(const RunConfig& config, std::ostream& out);

/// Machine-readable report: one `metric,entity,value,n` line per measurement;
/// non-seen query kinds tag the entity as name:kind.
std::string eval_report_text(const std::vector<EntityEval>& rows);

Pipeline pipeline_from_checkpoint(LoadedCheckpoint loaded);

}  // namespace kvla
