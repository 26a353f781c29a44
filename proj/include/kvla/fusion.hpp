#pragma once

#include <cstddef>
#include <vector>

#include "kvla/model.hpp"
#include "kvla/tensor.hpp"
#include "kvla/vision.hpp"

namespace kvla {

/// Decoder outputs for one image and query set. Cross-attention weights are
/// kept for every layer and head; they feed grounding heatmaps at inference
/// and never receive a training loss.
struct FusionOutput {
  Tensor exist_logits;    // [n_q], pre-sigmoid
  Tensor position_preds;  // [n_q, d']
  std::size_t layers = 0, heads = 0, num_queries = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<double> attn;  // [layer][head][query][patch]

  double attn_at(std::size_t layer, std::size_t head, std::size_t query,
                 std::size_t patch) const {
    const std::size_t np = grid_h * grid_w;
    return attn[((layer * heads + head) * num_queries + query) * np + patch];
  }
};

/// Transformer decoder: queries projected d'->d, then per layer pre-norm
/// self-attention over queries (order-invariant reductions, optional),
/// cross-attention with patches, and a feed-forward block, all residual.
/// Existence and position heads read the final states.
FusionOutput fuse(const FeatureMap& fm, const Tensor& queries,
                  const FusionParams& params, const ModelConfig& config,
                  Tape* tape);

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // [0,1]
};

/// Mean over layers and heads of one query's attention over patches, laid
/// out on the grid via the patch index map, then nearest-neighbor upsampled.
/// Target dimensions must be multiples of the grid.
Heatmap extract_heatmap(const FusionOutput& out, std::size_t query,
                        std::size_t height, std::size_t width);

/// New query matrix with the description embedding appended as the last row;
/// the original matrix is untouched.
Tensor append_zero_shot_query(const Tensor& queries,
                              const std::vector<double>& embedding);

}  // namespace kvla
