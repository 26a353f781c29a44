#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kvla/tensor.hpp"

namespace kvla {

/// Entity names with attribute-word descriptions, a position vocabulary, and
/// the seen/unseen split that defines the training query set.
struct KnowledgeBase {
  struct Entity {
    std::string name;
    std::string description;
    bool seen = true;
  };

  std::vector<Entity> entities;
  std::vector<std::string> positions;  // includes "unspecified" and "other"

  void validate() const;

  std::optional<std::size_t> entity_id(std::string_view name) const;
  std::optional<std::size_t> position_id(std::string_view name) const;
  std::size_t unspecified_position() const;
  std::vector<std::size_t> seen_entities() const;
  std::vector<std::string> entity_names() const;
};

std::string knowledge_to_text(const KnowledgeBase& kb);
KnowledgeBase knowledge_from_text(const std::string& text);

/// Frozen deterministic text encoder: each token maps to a unit-norm vector
/// drawn from a stream seeded by the token string; a text embeds to the mean
/// of its token vectors and is left un-normalized. Texts sharing attribute
/// words are therefore provably closer in cosine similarity.
class TextEmbedder {
 public:
  TextEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<double> token_vector(std::string_view token) const;
  std::vector<double> embed(std::string_view text) const;  // rejects empty

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// Knowledge-base description of an entity (entity translation input).
std::string describe(const KnowledgeBase& kb, std::size_t entity);

/// Entity embedding: description when entity translation is on, bare name
/// otherwise.
std::vector<double> embed_entity(const KnowledgeBase& kb,
                                 const TextEmbedder& embedder,
                                 std::size_t entity,
                                 bool entity_translation = true);

/// Exact prompt used for every position: "It is located at {position name}".
std::string position_prompt(const KnowledgeBase& kb, std::size_t position);
std::vector<double> embed_position(const KnowledgeBase& kb,
                                   const TextEmbedder& embedder,
                                   std::size_t position);

/// Row i embeds the i-th seen entity.
Tensor build_query_embeddings(const KnowledgeBase& kb,
                              const TextEmbedder& embedder,
                              bool entity_translation = true);
/// Row j embeds position j.
Tensor build_position_bank(const KnowledgeBase& kb,
                           const TextEmbedder& embedder);

}  // namespace kvla
