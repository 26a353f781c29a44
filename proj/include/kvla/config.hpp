#pragma once

#include <cstdint>
#include <string>

#include "kvla/model.hpp"
#include "kvla/training.hpp"
#include "kvla/world.hpp"

namespace kvla {

struct EmbedderConfig {
  std::size_t dim = 64;
  std::uint64_t seed = 0;  // 0: derive from the run seed
};

/// Complete description of one run. The world section drives datagen, the
/// rest drives training and inference; everything is serialized beside every
/// output for provenance.
struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t samples = 2000;
  WorldSpec world;
  ModelConfig model;
  TrainConfig train;
  EmbedderConfig embedder;

  void validate() const;
  std::uint64_t fingerprint() const;  // hash of the canonical dump
};

/// Desk preset: trains on one CPU core in minutes.
RunConfig desk_config();
/// Paper-sized constants: |Q|=75, |P|=51, M=7, d=256, d'=768, 4 layers and
/// 4 heads, lr 1e-4, batch 32, 60 epochs with 5 warm-up epochs.
RunConfig paper_config();
RunConfig config_from_preset(const std::string& name);

std::string config_to_json(const RunConfig& config);
/// Applies only the keys present in the text onto `base`, so a partial file
/// layers over a preset. Flags layer on top of the result.
RunConfig config_from_json(const std::string& text, RunConfig base);

std::string world_to_json(const WorldSpec& spec);
WorldSpec world_from_json(const std::string& text);
std::uint64_t world_spec_hash(const WorldSpec& spec);

/// The frozen text encoder for a run; embedder seed 0 derives an independent
/// stream from the run seed.
TextEmbedder make_embedder(const RunConfig& config);

}  // namespace kvla
