#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "kvla/rng.hpp"

namespace kvla {

enum class ExistLabel { Present, Absent, Uncertain };

/// Tokenized presence value: 1 present, 0 absent, -1 uncertain.
int exist_token(ExistLabel label);
const char* exist_name(ExistLabel label);

/// One extracted report fact.
struct Triplet {
  std::size_t entity = 0;
  std::size_t position = 0;
  ExistLabel exist = ExistLabel::Present;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct Report {
  std::vector<std::string> sentences;
};

/// Lowercase alphanumeric tokens; every other character separates.
std::vector<std::string> tokenize_text(std::string_view text);

/// Deterministic lexicon-and-cue grammar. Surfaces are token sequences;
/// parsing is a single longest-match scan, so extending the lexicon never
/// changes the parse of sentences that only use old lexemes.
struct ReportGrammar {
  struct Surface {
    std::vector<std::string> tokens;
    std::size_t id = 0;
  };
  struct Template {
    ExistLabel exist = ExistLabel::Present;
    bool with_position = false;
    std::string text;  // contains {entity} and, when with_position, {position}
  };

  std::size_t num_entities = 0;
  std::size_t num_positions = 0;
  std::size_t unspecified_position = 0;

  std::vector<Surface> entity_surfaces;    // first per id is the emission form
  std::vector<Surface> position_surfaces;  // unspecified/other carry none
  std::vector<std::vector<std::string>> negation_cues;
  std::vector<std::vector<std::string>> uncertainty_cues;
  std::vector<Template> templates;
  std::vector<std::string> fillers;

  /// Structural checks plus a full emit->extract probe of every template
  /// against every (entity, position) pair.
  void validate() const;

  const Surface* primary_entity_surface(std::size_t entity) const;
  const Surface* primary_position_surface(std::size_t position) const;
};

/// Triplets asserted by one sentence. No lexicon entity yields an empty list;
/// a negation or uncertainty cue preceding an entity mention downgrades its
/// label; every position mention in the sentence pairs with every entity.
std::vector<Triplet> extract_triplets(const std::string& sentence,
                                      const ReportGrammar& grammar);

struct ParseDiagnostics {
  std::size_t sentences_without_entities = 0;
};

/// Per-sentence extraction merged per entity. Precedence Present > Absent >
/// Uncertain decides the merged label; the position comes from the winning
/// triplets, ties broken by the lowest position id. Output is sorted by
/// (entity, position).
struct TripletSet {
  std::vector<Triplet> triplets;
  ParseDiagnostics diagnostics;
};
TripletSet parse_report(const Report& report, const ReportGrammar& grammar);

/// Fills a template matching the triplet's label and position-ness.
std::string emit_sentence(const ReportGrammar& grammar, const Triplet& triplet,
                          Rng& rng);
std::string emit_filler(const ReportGrammar& grammar, Rng& rng);

/// Versioned key-value text format; surfaces and templates reference entity
/// and position vocabularies by name.
std::string grammar_to_text(const ReportGrammar& grammar,
                            const std::vector<std::string>& entity_names,
                            const std::vector<std::string>& position_names);
ReportGrammar grammar_from_text(const std::string& text,
                                const std::vector<std::string>& entity_names,
                                const std::vector<std::string>& position_names);

}  // namespace kvla
