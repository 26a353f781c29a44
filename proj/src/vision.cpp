#include "kvla/vision.hpp"

#include <stdexcept>
#include <string>

namespace kvla {

void ModelConfig::validate() const {
  if (image_size == 0 || image_channels == 0) {
    throw std::invalid_argument("model: image dimensions must be positive");
  }
  if (conv_channels.empty()) {
    throw std::invalid_argument("model: need at least one conv layer");
  }
  for (std::size_t c : conv_channels) {
    if (c == 0) throw std::invalid_argument("model: zero conv width");
  }
  if (image_size % total_stride() != 0) {
    throw std::invalid_argument("model: image size " +
                                std::to_string(image_size) +
                                " not divisible by total stride " +
                                std::to_string(total_stride()));
  }
  if (d == 0 || d_prime == 0 || layers == 0 || heads == 0 || ffn_mult == 0) {
    throw std::invalid_argument("model: zero dimension");
  }
  if (d % heads != 0) {
    throw std::invalid_argument("model: d must be divisible by head count");
  }
  if (layer_norm_eps <= 0.0) {
    throw std::invalid_argument("model: layer_norm_eps must be positive");
  }
}

VisionParams build_vision_params(ParamStore& store, const ModelConfig& config,
                                 std::uint64_t seed) {
  VisionParams p;
  std::size_t in_channels = config.image_channels;
  for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
    const std::size_t out_channels = config.conv_channels[i];
    const std::string base = "vision.conv" + std::to_string(i);
    VisionParams::ConvLayer layer;
    layer.weight = store.create_kaiming(base + ".weight",
                                        {out_channels, in_channels, 3, 3},
                                        in_channels * 9, seed);
    layer.bias = store.create_zeros(base + ".bias", {out_channels});
    p.conv.push_back(layer);
    in_channels = out_channels;
  }
  p.feat_weight = store.create_kaiming("vision.feat.weight",
                                       {in_channels, config.d}, in_channels,
                                       seed);
  p.feat_bias = store.create_zeros("vision.feat.bias", {config.d});
  return p;
}

FeatureMap encode_image(const Image& image, const VisionParams& params,
                        const ModelConfig& config, Tape* tape) {
  if (image.height != config.image_size || image.width != config.image_size ||
      image.channels != config.image_channels) {
    throw std::invalid_argument("encode_image: image does not match config");
  }
  if (image.height % config.total_stride() != 0 ||
      image.width % config.total_stride() != 0) {
    throw std::invalid_argument(
        "encode_image: dimensions not divisible by total stride");
  }

  // interleaved (y, x, c) pixels -> [C, H, W]
  std::vector<double> chw(image.pixels.size());
  const std::size_t hw = image.height * image.width;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        chw[c * hw + y * image.width + x] =
            image.pixels[(y * image.width + x) * image.channels + c];
      }
    }
  }
  Tensor activations = Tensor::from_values(
      {image.channels, image.height, image.width}, std::move(chw));

  for (const VisionParams::ConvLayer& layer : params.conv) {
    activations = relu(conv2d(activations, layer.weight, layer.bias,
                              /*stride=*/2, /*pad=*/1, tape),
                       tape);
  }

  FeatureMap fm;
  fm.h = activations.shape()[1];
  fm.w = activations.shape()[2];
  fm.d = config.d;
  Tensor patches = to_patch_matrix(activations, tape);
  fm.patches =
      add(matmul(patches, params.feat_weight, tape), params.feat_bias, tape);
  return fm;
}

Tensor flatten_patches(const FeatureMap& fm) { return fm.patches; }

std::size_t patch_row(const FeatureMap& fm, std::size_t y, std::size_t x) {
  if (y >= fm.h || x >= fm.w) {
    throw std::invalid_argument("patch_row: cell out of range");
  }
  return y * fm.w + x;
}

std::pair<std::size_t, std::size_t> patch_cell(const FeatureMap& fm,
                                               std::size_t row) {
  if (row >= fm.h * fm.w) {
    throw std::invalid_argument("patch_cell: row out of range");
  }
  return {row / fm.w, row % fm.w};
}

double feature_at(const FeatureMap& fm, std::size_t y, std::size_t x,
                  std::size_t channel) {
  if (channel >= fm.d) throw std::invalid_argument("feature_at: bad channel");
  return fm.patches.values()[patch_row(fm, y, x) * fm.d + channel];
}

}  // namespace kvla
