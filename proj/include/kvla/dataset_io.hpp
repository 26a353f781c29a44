#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvla/grammar.hpp"
#include "kvla/knowledge.hpp"
#include "kvla/world.hpp"

namespace kvla {

/// A dataset directory holds manifest.json (format tag, n, seed, fractions,
/// spec and its hash), kb.txt, grammar.txt, and per-sample files under
/// images/ (P5 graymaps), reports/ (one sentence per line) and truth/
/// (line-oriented split/label/mask/triplet records using vocabulary ids).
struct DatasetOnDisk {
  WorldSpec spec;
  std::uint64_t seed = 0;
  KnowledgeBase kb;
  ReportGrammar grammar;
  std::vector<Sample> samples;
};

void save_dataset(const std::string& dir, const WorldSpec& spec,
                  std::uint64_t seed, const std::vector<Sample>& samples);

DatasetOnDisk load_dataset(const std::string& dir);

}  // namespace kvla
