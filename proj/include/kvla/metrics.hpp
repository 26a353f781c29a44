#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "kvla/fusion.hpp"

namespace kvla {

using PixelMask = std::vector<std::uint8_t>;  // one byte per pixel, 0/1

PixelMask mask_from_indices(const std::vector<std::uint32_t>& indices,
                            std::size_t pixel_count);

/// Rank-based area under the ROC curve; tied scores contribute one half.
/// Requires at least one positive and one negative label.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ThresholdMetrics {
  double f1 = 0.0;
  double accuracy = 0.0;
  double threshold = 0.0;
};

/// Exhaustive scan over {below-min} + midpoints of sorted unique scores +
/// {above-max}; prediction is score >= threshold; F1 ties break to the lower
/// threshold and accuracy is reported at the F1-best threshold.
ThresholdMetrics f1_acc_at_best_threshold(const std::vector<double>& scores,
                                          const std::vector<int>& labels);

/// Hit iff the heatmap's argmax pixel (ties to the lowest flat index) lies
/// inside the mask. The mask must be non-empty.
bool pointing_game(const Heatmap& heatmap, const PixelMask& mask);

struct OverlapMetrics {
  double dice = 0.0;
  double iou = 0.0;
  double threshold = 0.0;
};

/// Scans thresholds 0.00, 0.01, ..., 1.00 over a [0,1] heatmap, binarizing
/// with >=, and returns the Dice-maximizing threshold's Dice/IoU pair (ties
/// to the lowest threshold). Empty-vs-empty counts as Dice = IoU = 1.
OverlapMetrics dice_iou_best_threshold(const Heatmap& heatmap,
                                       const PixelMask& mask);

struct DetectionPR {
  double precision = 0.0;
  double recall = 0.0;
};

/// Instances binarize at their own Dice-best threshold; a true positive needs
/// IoU >= iou_threshold. Recall is over all instances, precision over those
/// with a non-empty prediction (0 when none predict).
DetectionPR detection_pr(const std::vector<Heatmap>& heatmaps,
                         const std::vector<PixelMask>& masks,
                         double iou_threshold = 0.1);

/// (v - min) / (max - min); a constant map collapses to all zeros.
void min_max_normalize(Heatmap& heatmap);

}  // namespace kvla
