#pragma once

#include <cstddef>
#include <utility>

#include "kvla/image.hpp"
#include "kvla/model.hpp"
#include "kvla/tensor.hpp"

namespace kvla {

/// h x w grid of d-dimensional patch features, stored flattened: row r of
/// `patches` holds grid cell (r / w, r % w). The index map is reversible, so
/// heatmaps can be laid back onto the image.
struct FeatureMap {
  std::size_t h = 0, w = 0, d = 0;
  Tensor patches;  // [(h*w), d]
};

/// Strided convolutional stack with a pointwise nonlinearity, then a learned
/// linear map to d. Input dimensions must be divisible by the total stride.
FeatureMap encode_image(const Image& image, const VisionParams& params,
                        const ModelConfig& config, Tape* tape);

/// The [(h*w), d] patch matrix (already the stored layout).
Tensor flatten_patches(const FeatureMap& fm);

std::size_t patch_row(const FeatureMap& fm, std::size_t y, std::size_t x);
std::pair<std::size_t, std::size_t> patch_cell(const FeatureMap& fm,
                                               std::size_t row);
double feature_at(const FeatureMap& fm, std::size_t y, std::size_t x,
                  std::size_t channel);

}  // namespace kvla
