#pragma once

#include <cstdint>
#include <vector>

#include "kvla/params.hpp"
#include "kvla/tensor.hpp"

namespace kvla {

/// Architecture dimensions shared by the vision encoder and fusion decoder.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t image_channels = 1;
  // One stride-2, kernel-3, pad-1 convolution per entry; total stride is
  // 2^len. A learned linear map takes the last width to d.
  std::vector<std::size_t> conv_channels = {16, 32};
  std::size_t d = 32;        // patch/query feature width
  std::size_t d_prime = 64;  // text embedding width
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 2;
  bool query_self_attention = true;
  double layer_norm_eps = 1e-5;

  std::size_t total_stride() const { return std::size_t{1} << conv_channels.size(); }
  std::size_t grid() const { return image_size / total_stride(); }
  std::size_t head_dim() const { return d / heads; }
  std::size_t num_patches() const { return grid() * grid(); }

  void validate() const;
};

struct VisionParams {
  struct ConvLayer {
    Tensor weight;  // [c_out, c_in, 3, 3]
    Tensor bias;    // [c_out]
  };
  std::vector<ConvLayer> conv;
  Tensor feat_weight;  // [c_last, d]
  Tensor feat_bias;    // [d]
};

struct FusionParams {
  Tensor query_proj_weight;  // [d', d]
  Tensor query_proj_bias;    // [d]
  // Learned per-patch code added to cross-attention values only, so keys
  // stay content-based while attended features identify their grid cell.
  Tensor patch_pos;          // [(h*w), d]

  struct Head {
    Tensor wq, wk, wv;  // [d, head_dim]
    Tensor wo;          // [head_dim, d]
  };
  struct Layer {
    Tensor self_norm_gain, self_norm_bias;
    std::vector<Head> self_heads;
    Tensor self_bias;  // [d]
    Tensor cross_norm_gain, cross_norm_bias;
    std::vector<Head> cross_heads;
    Tensor cross_bias;  // [d]
    Tensor ffn_norm_gain, ffn_norm_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  std::vector<Layer> layers;

  Tensor final_norm_gain, final_norm_bias;
  Tensor exist_w1, exist_b1, exist_w2, exist_b2;  // d -> d -> 1
  Tensor pos_w1, pos_b1, pos_w2, pos_b2;          // d -> d -> d'
};

VisionParams build_vision_params(ParamStore& store, const ModelConfig& config,
                                 std::uint64_t seed);
FusionParams build_fusion_params(ParamStore& store, const ModelConfig& config,
                                 std::uint64_t seed);

/// All learnable state of the artifact plus its architecture config.
struct Model {
  ModelConfig config;
  ParamStore params;
  VisionParams vision;
  FusionParams fusion;

  static Model init(const ModelConfig& config, std::uint64_t seed);
};

}  // namespace kvla
