#include "kvla/knowledge.hpp"

#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "kvla/grammar.hpp"
#include "kvla/rng.hpp"

namespace kvla {

void KnowledgeBase::validate() const {
  if (entities.empty()) throw std::invalid_argument("knowledge base: no entities");
  std::set<std::string> names;
  for (const Entity& e : entities) {
    if (e.name.empty()) throw std::invalid_argument("knowledge base: empty name");
    if (e.description.empty()) {
      throw std::invalid_argument("knowledge base: empty description for " +
                                  e.name);
    }
    if (!names.insert(e.name).second) {
      throw std::invalid_argument("knowledge base: duplicate entity " + e.name);
    }
  }
  std::set<std::string> pos_names;
  for (const std::string& p : positions) {
    if (!pos_names.insert(p).second) {
      throw std::invalid_argument("knowledge base: duplicate position " + p);
    }
  }
  if (!pos_names.count("unspecified") || !pos_names.count("other")) {
    throw std::invalid_argument(
        "knowledge base: positions must include 'unspecified' and 'other'");
  }
}

std::optional<std::size_t> KnowledgeBase::entity_id(
    std::string_view name) const {
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (entities[i].name == name) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> KnowledgeBase::position_id(
    std::string_view name) const {
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t KnowledgeBase::unspecified_position() const {
  auto id = position_id("unspecified");
  if (!id) throw std::logic_error("knowledge base lacks 'unspecified'");
  return *id;
}

std::vector<std::size_t> KnowledgeBase::seen_entities() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (entities[i].seen) out.push_back(i);
  }
  return out;
}

std::vector<std::string> KnowledgeBase::entity_names() const {
  std::vector<std::string> out;
  out.reserve(entities.size());
  for (const Entity& e : entities) out.push_back(e.name);
  return out;
}

namespace {

constexpr const char* kFormatTag = "kvla-kb v1";

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string knowledge_to_text(const KnowledgeBase& kb) {
  std::ostringstream out;
  out << kFormatTag << "\n\n[positions]\n";
  for (const std::string& p : kb.positions) out << p << "\n";
  out << "\n[entities]\n";
  for (const auto& e : kb.entities) {
    out << e.name << " | " << (e.seen ? "seen" : "unseen") << " | "
        << e.description << "\n";
  }
  return out.str();
}

KnowledgeBase knowledge_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kFormatTag) {
    throw std::invalid_argument("knowledge file: missing format tag");
  }
  KnowledgeBase kb;
  std::string section;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    if (section == "positions") {
      kb.positions.push_back(line);
    } else if (section == "entities") {
      const std::size_t p1 = line.find('|');
      const std::size_t p2 = p1 == std::string::npos
                                 ? std::string::npos
                                 : line.find('|', p1 + 1);
      if (p2 == std::string::npos) {
        throw std::invalid_argument("knowledge file: bad entity line: " + line);
      }
      KnowledgeBase::Entity e;
      e.name = trim(line.substr(0, p1));
      const std::string seen = trim(line.substr(p1 + 1, p2 - p1 - 1));
      e.description = trim(line.substr(p2 + 1));
      if (seen == "seen") {
        e.seen = true;
      } else if (seen == "unseen") {
        e.seen = false;
      } else {
        throw std::invalid_argument("knowledge file: bad seen flag: " + seen);
      }
      kb.entities.push_back(std::move(e));
    } else {
      throw std::invalid_argument("knowledge file: line outside a section: " +
                                  line);
    }
  }
  kb.validate();
  return kb;
}

std::vector<double> TextEmbedder::token_vector(std::string_view token) const {
  Rng rng(derive_seed(seed_, "token", fnv1a(token)));
  std::vector<double> v(dim_);
  double norm_sq = 0.0;
  for (double& x : v) {
    x = rng.next_gaussian();
    norm_sq += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (double& x : v) x *= inv;
  return v;
}

std::vector<double> TextEmbedder::embed(std::string_view text) const {
  const std::vector<std::string> tokens = tokenize_text(text);
  if (tokens.empty()) {
    throw std::invalid_argument("cannot embed empty text");
  }
  std::vector<double> sum(dim_, 0.0);
  for (const std::string& token : tokens) {
    const std::vector<double> v = token_vector(token);
    for (std::size_t i = 0; i < dim_; ++i) sum[i] += v[i];
  }
  const double count = static_cast<double>(tokens.size());
  for (double& x : sum) x /= count;
  return sum;
}

std::string describe(const KnowledgeBase& kb, std::size_t entity) {
  if (entity >= kb.entities.size()) {
    throw std::invalid_argument("unknown entity id " + std::to_string(entity));
  }
  return kb.entities[entity].description;
}

std::vector<double> embed_entity(const KnowledgeBase& kb,
                                 const TextEmbedder& embedder,
                                 std::size_t entity, bool entity_translation) {
  if (entity >= kb.entities.size()) {
    throw std::invalid_argument("unknown entity id " + std::to_string(entity));
  }
  return embedder.embed(entity_translation ? kb.entities[entity].description
                                           : kb.entities[entity].name);
}

std::string position_prompt(const KnowledgeBase& kb, std::size_t position) {
  if (position >= kb.positions.size()) {
    throw std::invalid_argument("unknown position id " +
                                std::to_string(position));
  }
  return "It is located at " + kb.positions[position];
}

std::vector<double> embed_position(const KnowledgeBase& kb,
                                   const TextEmbedder& embedder,
                                   std::size_t position) {
  return embedder.embed(position_prompt(kb, position));
}

Tensor build_query_embeddings(const KnowledgeBase& kb,
                              const TextEmbedder& embedder,
                              bool entity_translation) {
  const std::vector<std::size_t> seen = kb.seen_entities();
  if (seen.empty()) throw std::invalid_argument("knowledge base: no seen entities");
  std::vector<double> values;
  values.reserve(seen.size() * embedder.dim());
  for (std::size_t id : seen) {
    const std::vector<double> e = embed_entity(kb, embedder, id,
                                               entity_translation);
    values.insert(values.end(), e.begin(), e.end());
  }
  return Tensor::from_values({seen.size(), embedder.dim()}, std::move(values));
}

Tensor build_position_bank(const KnowledgeBase& kb,
                           const TextEmbedder& embedder) {
  std::vector<double> values;
  values.reserve(kb.positions.size() * embedder.dim());
  for (std::size_t p = 0; p < kb.positions.size(); ++p) {
    const std::vector<double> e = embed_position(kb, embedder, p);
    values.insert(values.end(), e.begin(), e.end());
  }
  return Tensor::from_values({kb.positions.size(), embedder.dim()},
                             std::move(values));
}

}  // namespace kvla
