#include "kvla/dataset_io.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "kvla/config.hpp"
#include "kvla/image.hpp"

namespace kvla {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "kvla-dataset";
constexpr int kManifestVersion = 1;

std::string sample_stem(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  return buf;
}

const char* split_name(int split) {
  switch (split) {
    case kSplitTrain: return "train";
    case kSplitVal: return "val";
    case kSplitTest: return "test";
  }
  throw std::logic_error("bad split tag");
}

int split_from_name(const std::string& name) {
  if (name == "train") return kSplitTrain;
  if (name == "val") return kSplitVal;
  if (name == "test") return kSplitTest;
  throw std::runtime_error("dataset: bad split name " + name);
}

ExistLabel exist_from_name(const std::string& name) {
  if (name == "present") return ExistLabel::Present;
  if (name == "absent") return ExistLabel::Absent;
  if (name == "uncertain") return ExistLabel::Uncertain;
  throw std::runtime_error("dataset: bad exist label " + name);
}

}  // namespace

void save_dataset(const std::string& dir, const WorldSpec& spec,
                  std::uint64_t seed, const std::vector<Sample>& samples) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "reports");
  fs::create_directories(fs::path(dir) / "truth");

  const KnowledgeBase kb = build_knowledge_base(spec);
  const ReportGrammar grammar = build_grammar(spec);
  {
    std::ofstream out(fs::path(dir) / "kb.txt");
    out << knowledge_to_text(kb);
  }
  {
    std::ofstream out(fs::path(dir) / "grammar.txt");
    out << grammar_to_text(grammar, kb.entity_names(), kb.positions);
  }
  {
    json manifest{{"format", kFormat},
                  {"version", kManifestVersion},
                  {"n", samples.size()},
                  {"seed", seed},
                  {"fractions", spec.fractions},
                  {"spec", json::parse(world_to_json(spec))},
                  {"spec_hash", world_spec_hash(spec)}};
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << manifest.dump(2) << "\n";
  }

  for (const Sample& s : samples) {
    const std::string stem = sample_stem(s.index);
    write_pgm((fs::path(dir) / "images" / (stem + ".pgm")).string(), s.image);
    {
      std::ofstream out(fs::path(dir) / "reports" / (stem + ".txt"));
      for (const std::string& sentence : s.sentences) out << sentence << "\n";
    }
    {
      std::ofstream out(fs::path(dir) / "truth" / (stem + ".txt"));
      out << "split " << split_name(s.split) << "\n";
      for (std::size_t e = 0; e < s.labels.size(); ++e) {
        out << "label " << e << " " << s.labels[e] << "\n";
        if (!s.masks[e].empty()) {
          out << "mask " << e << " " << s.masks[e].size();
          for (std::uint32_t idx : s.masks[e]) out << " " << idx;
          out << "\n";
        }
      }
      for (const Triplet& t : s.provenance) {
        out << "triplet " << t.entity << " " << t.position << " "
            << exist_name(t.exist) << "\n";
      }
    }
  }
}

DatasetOnDisk load_dataset(const std::string& dir) {
  std::ifstream manifest_in(fs::path(dir) / "manifest.json");
  if (!manifest_in) {
    throw std::runtime_error("not a dataset directory (no manifest): " + dir);
  }
  json manifest = json::parse(manifest_in);
  if (manifest.at("format") != kFormat) {
    throw std::runtime_error("dataset: unknown format tag");
  }
  if (manifest.at("version").get<int>() != kManifestVersion) {
    throw std::runtime_error("dataset: unsupported manifest version");
  }

  DatasetOnDisk ds;
  ds.spec = world_from_json(manifest.at("spec").dump());
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  if (manifest.at("spec_hash").get<std::uint64_t>() !=
      world_spec_hash(ds.spec)) {
    throw std::runtime_error("dataset: spec hash mismatch");
  }
  {
    std::ifstream in(fs::path(dir) / "kb.txt");
    std::stringstream buffer;
    buffer << in.rdbuf();
    ds.kb = knowledge_from_text(buffer.str());
  }
  {
    std::ifstream in(fs::path(dir) / "grammar.txt");
    std::stringstream buffer;
    buffer << in.rdbuf();
    ds.grammar = grammar_from_text(buffer.str(), ds.kb.entity_names(),
                                   ds.kb.positions);
  }

  const std::size_t n = manifest.at("n").get<std::size_t>();
  const std::size_t entity_count = ds.kb.entities.size();
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string stem = sample_stem(i);
    Sample s;
    s.index = i;
    s.image = read_pgm((fs::path(dir) / "images" / (stem + ".pgm")).string());
    {
      std::ifstream in(fs::path(dir) / "reports" / (stem + ".txt"));
      std::string line;
      while (std::getline(in, line)) {
        if (!line.empty()) s.sentences.push_back(line);
      }
    }
    s.labels.assign(entity_count, 0);
    s.masks.assign(entity_count, {});
    {
      std::ifstream in(fs::path(dir) / "truth" / (stem + ".txt"));
      if (!in) throw std::runtime_error("dataset: missing truth file " + stem);
      std::string keyword;
      while (in >> keyword) {
        if (keyword == "split") {
          std::string name;
          in >> name;
          s.split = split_from_name(name);
        } else if (keyword == "label") {
          std::size_t e;
          int value;
          in >> e >> value;
          if (e >= entity_count) {
            throw std::runtime_error("dataset: label entity out of range");
          }
          s.labels[e] = value;
        } else if (keyword == "mask") {
          std::size_t e, count;
          in >> e >> count;
          if (e >= entity_count) {
            throw std::runtime_error("dataset: mask entity out of range");
          }
          s.masks[e].resize(count);
          for (std::uint32_t& idx : s.masks[e]) in >> idx;
        } else if (keyword == "triplet") {
          std::size_t e, p;
          std::string label;
          in >> e >> p >> label;
          s.provenance.push_back({e, p, exist_from_name(label)});
        } else {
          throw std::runtime_error("dataset: bad truth keyword " + keyword);
        }
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace kvla
