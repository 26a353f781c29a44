#include "kvla/fusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kvla {

namespace {

FusionParams::Head build_head(ParamStore& store, const std::string& base,
                              const ModelConfig& config, std::uint64_t seed) {
  FusionParams::Head h;
  const std::size_t dh = config.head_dim();
  h.wq = store.create_kaiming(base + ".wq", {config.d, dh}, config.d, seed);
  h.wk = store.create_kaiming(base + ".wk", {config.d, dh}, config.d, seed);
  h.wv = store.create_kaiming(base + ".wv", {config.d, dh}, config.d, seed);
  h.wo = store.create_kaiming(base + ".wo", {dh, config.d}, dh, seed);
  return h;
}

}  // namespace

FusionParams build_fusion_params(ParamStore& store, const ModelConfig& config,
                                 std::uint64_t seed) {
  FusionParams p;
  p.query_proj_weight = store.create_kaiming(
      "fusion.query_proj.weight", {config.d_prime, config.d}, config.d_prime,
      seed);
  p.query_proj_bias = store.create_zeros("fusion.query_proj.bias", {config.d});
  p.patch_pos = store.create_gaussian("fusion.patch_pos",
                                      {config.num_patches(), config.d}, 0.3,
                                      seed);
  const std::size_t ffn = config.d * config.ffn_mult;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string base = "fusion.layer" + std::to_string(l);
    FusionParams::Layer layer;
    layer.self_norm_gain = store.create_full(base + ".self_norm.gain",
                                             {config.d}, 1.0);
    layer.self_norm_bias = store.create_zeros(base + ".self_norm.bias",
                                              {config.d});
    for (std::size_t h = 0; h < config.heads; ++h) {
      layer.self_heads.push_back(build_head(
          store, base + ".self.h" + std::to_string(h), config, seed));
    }
    layer.self_bias = store.create_zeros(base + ".self.bias", {config.d});
    layer.cross_norm_gain = store.create_full(base + ".cross_norm.gain",
                                              {config.d}, 1.0);
    layer.cross_norm_bias = store.create_zeros(base + ".cross_norm.bias",
                                               {config.d});
    for (std::size_t h = 0; h < config.heads; ++h) {
      layer.cross_heads.push_back(build_head(
          store, base + ".cross.h" + std::to_string(h), config, seed));
    }
    layer.cross_bias = store.create_zeros(base + ".cross.bias", {config.d});
    layer.ffn_norm_gain = store.create_full(base + ".ffn_norm.gain",
                                            {config.d}, 1.0);
    layer.ffn_norm_bias = store.create_zeros(base + ".ffn_norm.bias",
                                             {config.d});
    layer.ffn_w1 = store.create_kaiming(base + ".ffn.w1", {config.d, ffn},
                                        config.d, seed);
    layer.ffn_b1 = store.create_zeros(base + ".ffn.b1", {ffn});
    layer.ffn_w2 = store.create_kaiming(base + ".ffn.w2", {ffn, config.d},
                                        ffn, seed);
    layer.ffn_b2 = store.create_zeros(base + ".ffn.b2", {config.d});
    p.layers.push_back(std::move(layer));
  }
  p.final_norm_gain = store.create_full("fusion.final_norm.gain", {config.d},
                                        1.0);
  p.final_norm_bias = store.create_zeros("fusion.final_norm.bias", {config.d});
  p.exist_w1 = store.create_kaiming("fusion.exist.w1", {config.d, config.d},
                                    config.d, seed);
  p.exist_b1 = store.create_zeros("fusion.exist.b1", {config.d});
  p.exist_w2 = store.create_kaiming("fusion.exist.w2", {config.d, 1}, config.d,
                                    seed);
  p.exist_b2 = store.create_zeros("fusion.exist.b2", {1});
  p.pos_w1 = store.create_kaiming("fusion.position.w1", {config.d, config.d},
                                  config.d, seed);
  p.pos_b1 = store.create_zeros("fusion.position.b1", {config.d});
  p.pos_w2 = store.create_kaiming("fusion.position.w2",
                                  {config.d, config.d_prime}, config.d, seed);
  p.pos_b2 = store.create_zeros("fusion.position.b2", {config.d_prime});
  return p;
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  m.vision = build_vision_params(m.params, config, seed);
  m.fusion = build_fusion_params(m.params, config, seed);
  return m;
}

FusionOutput fuse(const FeatureMap& fm, const Tensor& queries,
                  const FusionParams& params, const ModelConfig& config,
                  Tape* tape) {
  if (!queries.defined() || queries.rank() != 2 || queries.shape()[0] == 0) {
    throw std::invalid_argument("fuse: query matrix must be non-empty");
  }
  if (queries.shape()[1] != config.d_prime) {
    throw std::invalid_argument("fuse: query width " +
                                std::to_string(queries.shape()[1]) +
                                " != d' " + std::to_string(config.d_prime));
  }
  if (fm.patches.shape()[0] != fm.h * fm.w ||
      fm.patches.shape()[1] != config.d) {
    throw std::invalid_argument("fuse: feature map does not match config");
  }
  if (params.patch_pos.shape()[0] != fm.h * fm.w) {
    throw std::invalid_argument("fuse: patch count does not match patch_pos");
  }

  const std::size_t nq = queries.shape()[0];
  const std::size_t np = fm.h * fm.w;
  const double att_scale =
      1.0 / std::sqrt(static_cast<double>(config.head_dim()));
  const double eps = config.layer_norm_eps;

  FusionOutput out;
  out.layers = config.layers;
  out.heads = config.heads;
  out.num_queries = nq;
  out.grid_h = fm.h;
  out.grid_w = fm.w;
  out.attn.reserve(config.layers * config.heads * nq * np);

  Tensor x = add(matmul(queries, params.query_proj_weight, tape),
                 params.query_proj_bias, tape);
  // keys stay content-based; values carry the positional code
  Tensor values_in = add(fm.patches, params.patch_pos, tape);

  for (const FusionParams::Layer& layer : params.layers) {
    if (config.query_self_attention) {
      Tensor h = layer_norm(x, layer.self_norm_gain, layer.self_norm_bias, eps,
                            tape);
      Tensor acc;
      for (const FusionParams::Head& head : layer.self_heads) {
        AttentionResult att = scaled_dot_attention(
            matmul(h, head.wq, tape), matmul(h, head.wk, tape),
            matmul(h, head.wv, tape), att_scale,
            /*order_invariant_keys=*/true, tape);
        Tensor o = matmul(att.output, head.wo, tape);
        acc = acc.defined() ? add(acc, o, tape) : o;
      }
      x = add(x, add(acc, layer.self_bias, tape), tape);
    }
    {
      Tensor h = layer_norm(x, layer.cross_norm_gain, layer.cross_norm_bias,
                            eps, tape);
      Tensor acc;
      for (const FusionParams::Head& head : layer.cross_heads) {
        AttentionResult att = scaled_dot_attention(
            matmul(h, head.wq, tape), matmul(fm.patches, head.wk, tape),
            matmul(values_in, head.wv, tape), att_scale,
            /*order_invariant_keys=*/false, tape);
        out.attn.insert(out.attn.end(), att.weights.values().begin(),
                        att.weights.values().end());
        Tensor o = matmul(att.output, head.wo, tape);
        acc = acc.defined() ? add(acc, o, tape) : o;
      }
      x = add(x, add(acc, layer.cross_bias, tape), tape);
    }
    {
      Tensor h = layer_norm(x, layer.ffn_norm_gain, layer.ffn_norm_bias, eps,
                            tape);
      Tensor ff = add(
          matmul(relu(add(matmul(h, layer.ffn_w1, tape), layer.ffn_b1, tape),
                      tape),
                 layer.ffn_w2, tape),
          layer.ffn_b2, tape);
      x = add(x, ff, tape);
    }
  }

  Tensor final_state = layer_norm(x, params.final_norm_gain,
                                  params.final_norm_bias, eps, tape);
  Tensor exist_hidden = relu(
      add(matmul(final_state, params.exist_w1, tape), params.exist_b1, tape),
      tape);
  out.exist_logits = reshape(
      add(matmul(exist_hidden, params.exist_w2, tape), params.exist_b2, tape),
      {nq}, tape);
  Tensor pos_hidden = relu(
      add(matmul(final_state, params.pos_w1, tape), params.pos_b1, tape),
      tape);
  out.position_preds =
      add(matmul(pos_hidden, params.pos_w2, tape), params.pos_b2, tape);
  return out;
}

Heatmap extract_heatmap(const FusionOutput& out, std::size_t query,
                        std::size_t height, std::size_t width) {
  if (query >= out.num_queries) {
    throw std::invalid_argument("extract_heatmap: query index out of range");
  }
  const std::size_t h = out.grid_h, w = out.grid_w;
  if (h == 0 || w == 0 || height % h != 0 || width % w != 0) {
    throw std::invalid_argument(
        "extract_heatmap: target size must be a multiple of the grid");
  }
  const std::size_t np = h * w;
  std::vector<double> grid(np, 0.0);
  for (std::size_t l = 0; l < out.layers; ++l) {
    for (std::size_t hd = 0; hd < out.heads; ++hd) {
      for (std::size_t p = 0; p < np; ++p) {
        grid[p] += out.attn_at(l, hd, query, p);
      }
    }
  }
  const double denom = static_cast<double>(out.layers * out.heads);
  for (double& v : grid) v /= denom;

  Heatmap map;
  map.height = height;
  map.width = width;
  map.values.resize(height * width);
  const std::size_t block_y = height / h;
  const std::size_t block_x = width / w;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      map.values[y * width + x] = grid[(y / block_y) * w + (x / block_x)];
    }
  }
  return map;
}

Tensor append_zero_shot_query(const Tensor& queries,
                              const std::vector<double>& embedding) {
  if (!queries.defined() || queries.rank() != 2) {
    throw std::invalid_argument("append_zero_shot_query: need a query matrix");
  }
  if (embedding.size() != queries.shape()[1]) {
    throw std::invalid_argument(
        "append_zero_shot_query: embedding width mismatch");
  }
  std::vector<double> values(queries.values().begin(), queries.values().end());
  values.insert(values.end(), embedding.begin(), embedding.end());
  return Tensor::from_values({queries.shape()[0] + 1, queries.shape()[1]},
                             std::move(values));
}

}  // namespace kvla
