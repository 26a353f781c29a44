#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kvla/grammar.hpp"
#include "kvla/image.hpp"
#include "kvla/knowledge.hpp"

namespace kvla {

struct PositionCell {
  std::string name;
  std::size_t x0 = 0, y0 = 0, width = 0, height = 0;
};

/// Visual effect of one attribute bundle.
struct BlobStyle {
  double intensity = 0.8;
  double radius = 4.5;
  bool soft_edge = false;
  bool striped = false;
  bool hollow = false;  // annulus; inner 45% of the radius stays empty
};
BlobStyle style_from_attributes(const std::vector<std::string>& attributes);

struct EntityDef {
  std::string name;
  std::vector<std::string> attributes;
  bool seen = true;
};

/// Generative recipe for paired (image, report, ground truth) samples.
/// Entity descriptions in the derived knowledge base list exactly the
/// attribute words that drive rendering, so description embeddings encode
/// true visual structure.
struct WorldSpec {
  std::size_t canvas = 32;
  std::vector<PositionCell> cells;
  std::vector<EntityDef> entities;

  double present_rate = 0.30;          // seen entities, every sample
  double unseen_present_rate = 0.35;   // unseen entities, non-train samples
  double uncertain_rate = 0.08;        // seen entities; rendered half-contrast
                                       // with probability 1/2 when drawn
  double absent_mention_rate = 0.40;   // chance an absent entity is reported
  double position_mention_rate = 0.85; // chance a mention carries a position
  double filler_rate = 0.25;
  double noise = 0.02;
  std::array<double, 3> fractions = {0.6, 0.2, 0.2};

  void validate() const;
};

constexpr int kSplitTrain = 0;
constexpr int kSplitVal = 1;
constexpr int kSplitTest = 2;

struct Sample {
  std::size_t index = 0;
  int split = kSplitTrain;
  Image image;
  std::vector<std::string> sentences;
  std::vector<int> labels;                           // per entity, 0/1
  std::vector<std::vector<std::uint32_t>> masks;     // flat pixel indices
  std::vector<Triplet> provenance;                   // sorted (entity, position)
};

KnowledgeBase build_knowledge_base(const WorldSpec& spec);
ReportGrammar build_grammar(const WorldSpec& spec);

/// Deterministic in (spec, n, seed); per-sample streams are independent.
/// Unseen entities are never rendered or mentioned in samples assigned to
/// the train split, which is derived from (fractions, seed) exactly as
/// split_assignment does.
std::vector<Sample> generate_dataset(const WorldSpec& spec, std::size_t n,
                                     std::uint64_t seed);

std::vector<int> split_assignment(std::size_t n,
                                  const std::array<double, 3>& fractions,
                                  std::uint64_t seed);

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};
SplitIndices split(const std::vector<Sample>& dataset,
                   const std::array<double, 3>& fractions, std::uint64_t seed);

/// Desk-scale default: 32x32 canvas, 2x2 position grid, six seen entities
/// plus one unseen novel attribute combination.
WorldSpec desk_world();

/// Paper-shaped vocabulary sizes: |Q|=75 seen entities, |P|=51 positions
/// (7x7 cells plus unspecified/other) on a 224x224 canvas.
WorldSpec paper_world();

}  // namespace kvla
