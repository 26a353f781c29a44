#include "kvla/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "kvla/vision.hpp"

namespace kvla {

void TrainConfig::validate(std::size_t position_bank_size) const {
  if (alpha_loc < 0.0 || alpha_cls < 0.0) {
    throw std::invalid_argument("train: loss weights must be >= 0");
  }
  if (negatives < 1) throw std::invalid_argument("train: M must be >= 1");
  if (negatives >= position_bank_size) {
    throw std::invalid_argument("train: M must be smaller than |P|");
  }
  if (learning_rate <= 0.0 || warmup_rate <= 0.0) {
    throw std::invalid_argument("train: learning rates must be positive");
  }
  if (epochs == 0 || batch_size == 0) {
    throw std::invalid_argument("train: epochs and batch size must be >= 1");
  }
  if (weight_decay < 0.0) {
    throw std::invalid_argument("train: weight decay must be >= 0");
  }
}

SupervisionTargets build_targets(const TripletSet& triplets,
                                 const KnowledgeBase& kb) {
  const std::vector<std::size_t> seen = kb.seen_entities();
  std::vector<std::size_t> slot_of(kb.entities.size(), kb.entities.size());
  for (std::size_t s = 0; s < seen.size(); ++s) slot_of[seen[s]] = s;

  SupervisionTargets targets;
  targets.exist.assign(seen.size(), kUnmentioned);
  targets.position.assign(seen.size(), std::nullopt);
  const std::size_t unspecified = kb.unspecified_position();
  for (const Triplet& t : triplets.triplets) {
    if (t.entity >= slot_of.size()) continue;
    const std::size_t slot = slot_of[t.entity];
    if (slot == kb.entities.size()) continue;  // unseen entity
    targets.exist[slot] = exist_token(t.exist);
    if (t.position != unspecified) targets.position[slot] = t.position;
  }
  return targets;
}

Tensor loss_cls(const Tensor& exist_logits, const SupervisionTargets& targets,
                Tape* tape) {
  if (exist_logits.rank() != 1 ||
      exist_logits.size() != targets.exist.size()) {
    throw std::invalid_argument("loss_cls: logits do not match targets");
  }
  std::vector<std::size_t> rows;
  std::vector<double> labels;
  for (std::size_t i = 0; i < targets.exist.size(); ++i) {
    if (targets.exist[i] == 0 || targets.exist[i] == 1) {
      rows.push_back(i);
      labels.push_back(static_cast<double>(targets.exist[i]));
    }
  }
  if (rows.empty()) return Tensor::scalar(0.0);
  return bce_with_logits_mean(gather_rows(exist_logits, rows, tape), labels,
                              tape);
}

std::vector<std::size_t> sample_negatives(std::size_t bank_size,
                                          std::size_t positive,
                                          std::size_t count, Rng& rng) {
  if (positive >= bank_size) {
    throw std::invalid_argument("sample_negatives: positive out of range");
  }
  if (count + 1 > bank_size) {
    throw std::invalid_argument("sample_negatives: not enough candidates");
  }
  std::vector<std::size_t> candidates;
  candidates.reserve(bank_size - 1);
  for (std::size_t i = 0; i < bank_size; ++i) {
    if (i != positive) candidates.push_back(i);
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j =
        i + static_cast<std::size_t>(rng.next_below(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(count);
  return candidates;
}

Tensor loss_loc(const Tensor& position_preds,
                const SupervisionTargets& targets, const Tensor& position_bank,
                std::size_t negatives, std::uint64_t stream_seed,
                LocVariant variant, Tape* tape) {
  if (position_preds.rank() != 2 ||
      position_preds.shape()[0] != targets.exist.size()) {
    throw std::invalid_argument("loss_loc: predictions do not match targets");
  }
  const std::size_t bank_size = position_bank.shape()[0];
  std::vector<ContrastEntry> entries;
  for (std::size_t slot = 0; slot < targets.position.size(); ++slot) {
    if (!targets.position[slot].has_value()) continue;
    const std::size_t positive = *targets.position[slot];
    Rng rng(derive_seed(stream_seed, "entity", slot));
    entries.push_back(
        {slot, positive, sample_negatives(bank_size, positive, negatives, rng)});
  }
  return position_contrast_mean(position_preds, position_bank, entries,
                                variant == LocVariant::Log, tape);
}

Tensor total_loss(const Tensor& l_cls, const Tensor& l_loc, double alpha_loc,
                  double alpha_cls, Tape* tape) {
  return add(scale(l_loc, alpha_loc, tape), scale(l_cls, alpha_cls, tape),
             tape);
}

AdamW::AdamW(ParamStore& params, double weight_decay)
    : params_(&params), weight_decay_(weight_decay) {
  for (const auto& [name, tensor] : params.entries()) {
    m_.emplace_back(tensor.size(), 0.0);
    v_.emplace_back(tensor.size(), 0.0);
  }
}

void AdamW::step(double learning_rate) {
  steps_ += 1;
  const double t = static_cast<double>(steps_);
  const double bias1 = 1.0 - std::pow(kBeta1, t);
  const double bias2 = 1.0 - std::pow(kBeta2, t);
  auto& entries = params_->entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor& tensor = entries[p].second;
    auto grad = tensor.grad();
    auto values = tensor.values_mut();
    std::vector<double>& m = m_[p];
    std::vector<double>& v = v_[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      values[i] -= learning_rate *
                   (m_hat / (std::sqrt(v_hat) + kEps) +
                    weight_decay_ * values[i]);
      if (!std::isfinite(values[i])) {
        throw std::domain_error("optimizer produced a non-finite parameter in " +
                                entries[p].first);
      }
    }
  }
}

double scheduled_learning_rate(const TrainConfig& config, std::size_t epoch) {
  if (config.warmup_epochs == 0 || epoch >= config.warmup_epochs) {
    return config.learning_rate;
  }
  const double progress = static_cast<double>(epoch) /
                          static_cast<double>(config.warmup_epochs);
  return config.warmup_rate +
         (config.learning_rate - config.warmup_rate) * progress;
}

std::vector<EpochStats> train_model(Model& model, const TrainData& data,
                                    const Tensor& queries,
                                    const Tensor& position_bank,
                                    const TrainConfig& config,
                                    std::uint64_t seed, AdamW& optimizer,
                                    std::ostream* epoch_log) {
  config.validate(position_bank.shape()[0]);
  if (data.samples == nullptr || data.train_indices.empty()) {
    throw std::invalid_argument("train: empty dataset");
  }
  if (data.targets.size() != data.samples->size()) {
    throw std::invalid_argument("train: targets do not cover the dataset");
  }

  std::vector<EpochStats> stats;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = scheduled_learning_rate(config, epoch);

    std::vector<std::size_t> order = data.train_indices;
    Rng shuffle_rng(derive_seed(seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);

    double sum_cls = 0.0, sum_loc = 0.0, sum_total = 0.0;
    for (std::size_t begin = 0; begin < order.size();
         begin += config.batch_size) {
      const std::size_t end =
          std::min(order.size(), begin + config.batch_size);
      Tape tape;
      Tensor batch_loss;
      for (std::size_t b = begin; b < end; ++b) {
        const std::size_t idx = order[b];
        const Sample& sample = (*data.samples)[idx];
        FeatureMap fm = encode_image(sample.image, model.vision, model.config,
                                     &tape);
        FusionOutput out = fuse(fm, queries, model.fusion, model.config,
                                &tape);
        Tensor l_cls = loss_cls(out.exist_logits, data.targets[idx], &tape);
        Tensor l_loc =
            config.alpha_loc != 0.0
                ? loss_loc(out.position_preds, data.targets[idx],
                           position_bank, config.negatives,
                           derive_seed(seed, "neg", epoch, idx),
                           config.loc_variant, &tape)
                : Tensor::scalar(0.0);
        Tensor total = total_loss(l_cls, l_loc, config.alpha_loc,
                                  config.alpha_cls, &tape);
        sum_cls += l_cls.item();
        sum_loc += l_loc.item();
        sum_total += total.item();
        batch_loss = batch_loss.defined() ? add(batch_loss, total, &tape)
                                          : total;
      }
      batch_loss = scale(batch_loss, 1.0 / static_cast<double>(end - begin),
                         &tape);
      if (batch_loss.requires_grad()) {
        tape.backward(batch_loss);
        optimizer.step(lr);
        model.params.zero_grads();
      }
    }

    EpochStats es;
    es.epoch = epoch;
    const double n = static_cast<double>(order.size());
    es.loss_cls = sum_cls / n;
    es.loss_loc = sum_loc / n;
    es.loss_total = sum_total / n;
    es.seconds = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - start)
                     .count();
    stats.push_back(es);
    if (epoch_log != nullptr) {
      char line[160];
      std::snprintf(line, sizeof(line), "%zu,%.6f,%.6f,%.6f,%.3f\n", epoch,
                    es.loss_cls, es.loss_loc, es.loss_total, es.seconds);
      (*epoch_log) << line;
      epoch_log->flush();
    }
  }
  return stats;
}

}  // namespace kvla
