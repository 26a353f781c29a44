#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "kvla/fusion.hpp"
#include "kvla/grammar.hpp"
#include "kvla/knowledge.hpp"
#include "kvla/model.hpp"
#include "kvla/tensor.hpp"
#include "kvla/world.hpp"

namespace kvla {

enum class LocVariant { Log, Literal };

struct TrainConfig {
  double alpha_loc = 1.0;
  double alpha_cls = 1.0;
  std::size_t negatives = 7;  // M, drawn without replacement
  double learning_rate = 1e-4;
  double warmup_rate = 1e-5;
  std::size_t warmup_epochs = 5;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  LocVariant loc_variant = LocVariant::Log;
  bool entity_translation = true;
  double weight_decay = 1e-4;

  void validate(std::size_t position_bank_size) const;
};

constexpr int kUnmentioned = -2;

/// Per training query slot (seen entity): the exist token, or kUnmentioned
/// when the report says nothing about the entity; and the stated position,
/// absent when the mention carried none. Mentions keep their position label
/// whatever the exist token, matching reports that localize absences.
struct SupervisionTargets {
  std::vector<int> exist;
  std::vector<std::optional<std::size_t>> position;
};

SupervisionTargets build_targets(const TripletSet& triplets,
                                 const KnowledgeBase& kb);

/// Mean binary cross-entropy over slots with exist tokens 0 or 1; uncertain
/// and unmentioned slots are excluded, an empty selection gives exact zero.
Tensor loss_cls(const Tensor& exist_logits, const SupervisionTargets& targets,
                Tape* tape);

/// Contrastive position loss over slots holding a position label. Negatives
/// are drawn per entity without replacement from the bank, never the
/// positive, on a stream keyed by (stream_seed, slot).
Tensor loss_loc(const Tensor& position_preds,
                const SupervisionTargets& targets, const Tensor& position_bank,
                std::size_t negatives, std::uint64_t stream_seed,
                LocVariant variant, Tape* tape);

/// alpha_loc * l_loc + alpha_cls * l_cls.
Tensor total_loss(const Tensor& l_cls, const Tensor& l_loc, double alpha_loc,
                  double alpha_cls, Tape* tape);

/// Picks M distinct bank rows excluding the positive.
std::vector<std::size_t> sample_negatives(std::size_t bank_size,
                                          std::size_t positive,
                                          std::size_t count, Rng& rng);

/// Decoupled weight-decay adaptive moment optimizer over a parameter store.
class AdamW {
 public:
  AdamW(ParamStore& params, double weight_decay);
  void step(double learning_rate);

  std::size_t step_count() const { return steps_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_step_count(std::size_t steps) { steps_ = steps; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  ParamStore* params_;
  double weight_decay_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss_cls = 0.0;
  double loss_loc = 0.0;
  double loss_total = 0.0;
  double seconds = 0.0;
};

/// Linear warm-up from warmup_rate to learning_rate over warmup_epochs,
/// then constant.
double scheduled_learning_rate(const TrainConfig& config, std::size_t epoch);

struct TrainData {
  const std::vector<Sample>* samples = nullptr;
  std::vector<std::size_t> train_indices;
  std::vector<SupervisionTargets> targets;  // indexed like samples
};

/// Deterministic given (model seed, config, data): fixed shuffling stream per
/// epoch and fixed negative-sampling streams keyed by
/// (seed, epoch, sample index, entity slot).
std::vector<EpochStats> train_model(Model& model, const TrainData& data,
                                    const Tensor& queries,
                                    const Tensor& position_bank,
                                    const TrainConfig& config,
                                    std::uint64_t seed, AdamW& optimizer,
                                    std::ostream* epoch_log);

}  // namespace kvla
