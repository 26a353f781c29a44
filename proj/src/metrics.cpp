#include "kvla/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kvla {

PixelMask mask_from_indices(const std::vector<std::uint32_t>& indices,
                            std::size_t pixel_count) {
  PixelMask mask(pixel_count, 0);
  for (std::uint32_t idx : indices) {
    if (idx >= pixel_count) {
      throw std::invalid_argument("mask index out of range");
    }
    mask[idx] = 1;
  }
  return mask;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("auc: scores/labels mismatch");
  }
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("auc: labels must be 0/1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("auc: needs both classes");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  // average ranks over tie groups; ranks are 1-based
  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           scores[order[j + 1]] == scores[order[i]]) {
      ++j;
    }
    const double avg_rank = (static_cast<double>(i + 1) +
                             static_cast<double>(j + 1)) /
                            2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) positive_rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

ThresholdMetrics f1_acc_at_best_threshold(const std::vector<double>& scores,
                                          const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("f1 threshold scan: scores/labels mismatch");
  }
  std::vector<double> unique = scores;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());

  std::vector<double> candidates;
  candidates.push_back(unique.front() - 1.0);  // everything positive
  for (std::size_t i = 0; i + 1 < unique.size(); ++i) {
    candidates.push_back((unique[i] + unique[i + 1]) / 2.0);
  }
  candidates.push_back(unique.back() + 1.0);  // everything negative

  ThresholdMetrics best;
  bool first = true;
  for (double threshold : candidates) {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool predicted = scores[i] >= threshold;
      if (predicted && labels[i] == 1) {
        ++tp;
      } else if (predicted) {
        ++fp;
      } else if (labels[i] == 1) {
        ++fn;
      } else {
        ++tn;
      }
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    const double f1 = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    const double acc = static_cast<double>(tp + tn) /
                       static_cast<double>(scores.size());
    if (first || f1 > best.f1) {  // ties keep the lower threshold
      best = {f1, acc, threshold};
      first = false;
    }
  }
  return best;
}

bool pointing_game(const Heatmap& heatmap, const PixelMask& mask) {
  if (heatmap.values.size() != mask.size() || mask.empty()) {
    throw std::invalid_argument("pointing_game: shape mismatch");
  }
  if (std::find(mask.begin(), mask.end(), 1) == mask.end()) {
    throw std::invalid_argument("pointing_game: empty mask");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < heatmap.values.size(); ++i) {
    if (heatmap.values[i] > heatmap.values[best]) best = i;
  }
  return mask[best] != 0;
}

OverlapMetrics dice_iou_best_threshold(const Heatmap& heatmap,
                                       const PixelMask& mask) {
  if (heatmap.values.size() != mask.size() || mask.empty()) {
    throw std::invalid_argument("dice_iou: shape mismatch");
  }
  OverlapMetrics best;
  bool first = true;
  for (int step = 0; step <= 100; ++step) {
    const double threshold = static_cast<double>(step) / 100.0;
    std::size_t inter = 0, pred = 0, truth = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const bool p = heatmap.values[i] >= threshold;
      const bool t = mask[i] != 0;
      inter += static_cast<std::size_t>(p && t);
      pred += static_cast<std::size_t>(p);
      truth += static_cast<std::size_t>(t);
    }
    double dice, iou;
    if (pred + truth == 0) {
      dice = 1.0;
      iou = 1.0;
    } else {
      dice = 2.0 * static_cast<double>(inter) /
             static_cast<double>(pred + truth);
      const std::size_t uni = pred + truth - inter;
      iou = uni == 0 ? 1.0 : static_cast<double>(inter) /
                                 static_cast<double>(uni);
    }
    if (first || dice > best.dice) {  // ties keep the lower threshold
      best = {dice, iou, threshold};
      first = false;
    }
  }
  return best;
}

DetectionPR detection_pr(const std::vector<Heatmap>& heatmaps,
                         const std::vector<PixelMask>& masks,
                         double iou_threshold) {
  if (heatmaps.size() != masks.size()) {
    throw std::invalid_argument("detection_pr: instance count mismatch");
  }
  std::size_t true_positive = 0, predicted_positive = 0;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    const OverlapMetrics best = dice_iou_best_threshold(heatmaps[i], masks[i]);
    std::size_t inter = 0, pred = 0, truth = 0;
    for (std::size_t p = 0; p < masks[i].size(); ++p) {
      const bool pb = heatmaps[i].values[p] >= best.threshold;
      const bool tb = masks[i][p] != 0;
      inter += static_cast<std::size_t>(pb && tb);
      pred += static_cast<std::size_t>(pb);
      truth += static_cast<std::size_t>(tb);
    }
    if (pred > 0) ++predicted_positive;
    const std::size_t uni = pred + truth - inter;
    const double iou =
        uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    if (pred > 0 && iou >= iou_threshold) ++true_positive;
  }
  DetectionPR out;
  out.recall = heatmaps.empty()
                   ? 0.0
                   : static_cast<double>(true_positive) /
                         static_cast<double>(heatmaps.size());
  out.precision = predicted_positive == 0
                      ? 0.0
                      : static_cast<double>(true_positive) /
                            static_cast<double>(predicted_positive);
  return out;
}

void min_max_normalize(Heatmap& heatmap) {
  if (heatmap.values.empty()) return;
  double lo = heatmap.values[0], hi = heatmap.values[0];
  for (double v : heatmap.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(heatmap.values.begin(), heatmap.values.end(), 0.0);
    return;
  }
  const double range = hi - lo;
  for (double& v : heatmap.values) v = (v - lo) / range;
}

}  // namespace kvla
