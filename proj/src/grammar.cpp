#include "kvla/grammar.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kvla {

int exist_token(ExistLabel label) {
  switch (label) {
    case ExistLabel::Present: return 1;
    case ExistLabel::Absent: return 0;
    case ExistLabel::Uncertain: return -1;
  }
  throw std::logic_error("bad exist label");
}

const char* exist_name(ExistLabel label) {
  switch (label) {
    case ExistLabel::Present: return "present";
    case ExistLabel::Absent: return "absent";
    case ExistLabel::Uncertain: return "uncertain";
  }
  throw std::logic_error("bad exist label");
}

std::vector<std::string> tokenize_text(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

namespace {

enum class SpanKind { Negation, Uncertainty, Entity, Position };

struct SpanMatch {
  SpanKind kind;
  std::size_t id = 0;
  std::size_t begin = 0;
  std::size_t length = 0;
};

bool tokens_match(const std::vector<std::string>& haystack, std::size_t at,
                  const std::vector<std::string>& needle) {
  if (needle.empty() || at + needle.size() > haystack.size()) return false;
  for (std::size_t i = 0; i < needle.size(); ++i) {
    if (haystack[at + i] != needle[i]) return false;
  }
  return true;
}

std::vector<SpanMatch> scan_sentence(const std::vector<std::string>& tokens,
                                     const ReportGrammar& g) {
  std::vector<SpanMatch> spans;
  std::size_t i = 0;
  while (i < tokens.size()) {
    SpanMatch best;
    best.length = 0;
    auto consider = [&](SpanKind kind, std::size_t id,
                        const std::vector<std::string>& surface) {
      if (surface.size() > best.length && tokens_match(tokens, i, surface)) {
        best = SpanMatch{kind, id, i, surface.size()};
      }
    };
    for (std::size_t c = 0; c < g.negation_cues.size(); ++c) {
      consider(SpanKind::Negation, c, g.negation_cues[c]);
    }
    for (std::size_t c = 0; c < g.uncertainty_cues.size(); ++c) {
      consider(SpanKind::Uncertainty, c, g.uncertainty_cues[c]);
    }
    for (const auto& s : g.entity_surfaces) {
      consider(SpanKind::Entity, s.id, s.tokens);
    }
    for (const auto& s : g.position_surfaces) {
      consider(SpanKind::Position, s.id, s.tokens);
    }
    if (best.length > 0) {
      spans.push_back(best);
      i += best.length;
    } else {
      ++i;
    }
  }
  return spans;
}

bool triplet_order(const Triplet& a, const Triplet& b) {
  if (a.entity != b.entity) return a.entity < b.entity;
  if (a.position != b.position) return a.position < b.position;
  return exist_token(a.exist) > exist_token(b.exist);
}

int precedence(ExistLabel label) {
  switch (label) {
    case ExistLabel::Present: return 2;
    case ExistLabel::Absent: return 1;
    case ExistLabel::Uncertain: return 0;
  }
  return -1;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

std::vector<Triplet> extract_triplets(const std::string& sentence,
                                      const ReportGrammar& grammar) {
  const std::vector<std::string> tokens = tokenize_text(sentence);
  const std::vector<SpanMatch> spans = scan_sentence(tokens, grammar);

  std::vector<std::size_t> positions;
  std::vector<Triplet> out;
  for (const SpanMatch& s : spans) {
    if (s.kind == SpanKind::Position) positions.push_back(s.id);
  }
  for (const SpanMatch& s : spans) {
    if (s.kind != SpanKind::Entity) continue;
    // nearest cue that ends at or before the mention decides the label
    ExistLabel label = ExistLabel::Present;
    std::size_t best_end = 0;
    bool found = false;
    for (const SpanMatch& cue : spans) {
      if (cue.kind != SpanKind::Negation && cue.kind != SpanKind::Uncertainty) {
        continue;
      }
      const std::size_t end = cue.begin + cue.length;
      if (end <= s.begin && (!found || end > best_end)) {
        best_end = end;
        found = true;
        label = cue.kind == SpanKind::Negation ? ExistLabel::Absent
                                               : ExistLabel::Uncertain;
      }
    }
    if (positions.empty()) {
      out.push_back({s.id, grammar.unspecified_position, label});
    } else {
      for (std::size_t p : positions) out.push_back({s.id, p, label});
    }
  }
  std::sort(out.begin(), out.end(), triplet_order);
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

TripletSet parse_report(const Report& report, const ReportGrammar& grammar) {
  TripletSet result;
  std::map<std::size_t, std::vector<Triplet>> by_entity;
  for (const std::string& sentence : report.sentences) {
    std::vector<Triplet> extracted = extract_triplets(sentence, grammar);
    if (extracted.empty()) {
      result.diagnostics.sentences_without_entities += 1;
      continue;
    }
    for (const Triplet& t : extracted) by_entity[t.entity].push_back(t);
  }
  for (const auto& [entity, triplets] : by_entity) {
    int best_rank = -1;
    for (const Triplet& t : triplets) {
      best_rank = std::max(best_rank, precedence(t.exist));
    }
    Triplet merged;
    merged.entity = entity;
    merged.position = grammar.num_positions;  // sentinel above any real id
    for (const Triplet& t : triplets) {
      if (precedence(t.exist) != best_rank) continue;
      merged.exist = t.exist;
      merged.position = std::min(merged.position, t.position);
    }
    result.triplets.push_back(merged);
  }
  std::sort(result.triplets.begin(), result.triplets.end(), triplet_order);
  return result;
}

const ReportGrammar::Surface* ReportGrammar::primary_entity_surface(
    std::size_t entity) const {
  for (const Surface& s : entity_surfaces) {
    if (s.id == entity) return &s;
  }
  return nullptr;
}

const ReportGrammar::Surface* ReportGrammar::primary_position_surface(
    std::size_t position) const {
  for (const Surface& s : position_surfaces) {
    if (s.id == position) return &s;
  }
  return nullptr;
}

namespace {

std::string fill_template(const ReportGrammar& g,
                          const ReportGrammar::Template& tpl,
                          const Triplet& triplet) {
  const ReportGrammar::Surface* ent = g.primary_entity_surface(triplet.entity);
  if (ent == nullptr) {
    throw std::invalid_argument("no surface form for entity " +
                                std::to_string(triplet.entity));
  }
  std::string text = tpl.text;
  auto replace_all = [&text](const std::string& slot, const std::string& with) {
    for (std::size_t at = text.find(slot); at != std::string::npos;
         at = text.find(slot, at)) {
      text.replace(at, slot.size(), with);
      at += with.size();
    }
  };
  replace_all("{entity}", join_tokens(ent->tokens));
  if (tpl.with_position) {
    const ReportGrammar::Surface* pos =
        g.primary_position_surface(triplet.position);
    if (pos == nullptr) {
      throw std::invalid_argument("no surface form for position " +
                                  std::to_string(triplet.position));
    }
    replace_all("{position}", join_tokens(pos->tokens));
  }
  return text;
}

}  // namespace

std::string emit_sentence(const ReportGrammar& grammar, const Triplet& triplet,
                          Rng& rng) {
  const bool with_position = triplet.position != grammar.unspecified_position;
  std::vector<const ReportGrammar::Template*> candidates;
  for (const auto& tpl : grammar.templates) {
    if (tpl.exist == triplet.exist && tpl.with_position == with_position) {
      candidates.push_back(&tpl);
    }
  }
  if (candidates.empty()) {
    throw std::invalid_argument(std::string("no template for label ") +
                                exist_name(triplet.exist) +
                                (with_position ? " with" : " without") +
                                " position");
  }
  const std::size_t pick = rng.next_below(candidates.size());
  return fill_template(grammar, *candidates[pick], triplet);
}

std::string emit_filler(const ReportGrammar& grammar, Rng& rng) {
  if (grammar.fillers.empty()) {
    throw std::invalid_argument("grammar has no filler sentences");
  }
  return grammar.fillers[rng.next_below(grammar.fillers.size())];
}

void ReportGrammar::validate() const {
  if (num_entities == 0) throw std::invalid_argument("grammar: no entities");
  if (unspecified_position >= num_positions) {
    throw std::invalid_argument("grammar: unspecified position out of range");
  }
  std::set<std::vector<std::string>> seen_surfaces;
  auto check_surface = [&](const std::vector<std::string>& tokens,
                           const char* what) {
    if (tokens.empty()) {
      throw std::invalid_argument(std::string("grammar: empty ") + what);
    }
    if (!seen_surfaces.insert(tokens).second) {
      throw std::invalid_argument("grammar: ambiguous lexeme '" +
                                  join_tokens(tokens) + "'");
    }
  };
  for (const Surface& s : entity_surfaces) {
    if (s.id >= num_entities) {
      throw std::invalid_argument("grammar: entity surface id out of range");
    }
    check_surface(s.tokens, "entity surface");
  }
  for (const Surface& s : position_surfaces) {
    if (s.id >= num_positions) {
      throw std::invalid_argument("grammar: position surface id out of range");
    }
    check_surface(s.tokens, "position surface");
  }
  for (const auto& cue : negation_cues) check_surface(cue, "negation cue");
  for (const auto& cue : uncertainty_cues) check_surface(cue, "uncertainty cue");

  for (std::size_t e = 0; e < num_entities; ++e) {
    if (primary_entity_surface(e) == nullptr) {
      throw std::invalid_argument("grammar: entity " + std::to_string(e) +
                                  " has no surface form");
    }
  }

  // Invertibility: every template must recover its source triplet for every
  // entity/position combination, and fillers must parse to nothing.
  for (const Template& tpl : templates) {
    for (std::size_t e = 0; e < num_entities; ++e) {
      std::vector<std::size_t> probe_positions;
      if (tpl.with_position) {
        for (const Surface& s : position_surfaces) {
          probe_positions.push_back(s.id);
        }
      } else {
        probe_positions.push_back(unspecified_position);
      }
      for (std::size_t p : probe_positions) {
        const Triplet want{e, p, tpl.exist};
        const std::string sentence = fill_template(*this, tpl, want);
        const std::vector<Triplet> got = extract_triplets(sentence, *this);
        if (got.size() != 1 || !(got[0] == want)) {
          throw std::invalid_argument("grammar: template '" + tpl.text +
                                      "' is not invertible for '" + sentence +
                                      "'");
        }
      }
    }
  }
  for (const std::string& filler : fillers) {
    if (!extract_triplets(filler, *this).empty()) {
      throw std::invalid_argument("grammar: filler parses to a triplet: " +
                                  filler);
    }
  }
}

// ---- file format -----------------------------------------------------------

namespace {

constexpr const char* kFormatTag = "kvla-grammar v1";

std::size_t name_index(const std::vector<std::string>& names,
                       const std::string& name, const char* what) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw std::invalid_argument(std::string("grammar file: unknown ") + what +
                              " '" + name + "'");
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string grammar_to_text(const ReportGrammar& g,
                            const std::vector<std::string>& entity_names,
                            const std::vector<std::string>& position_names) {
  std::ostringstream out;
  out << kFormatTag << "\n\n[entity-surfaces]\n";
  for (const auto& s : g.entity_surfaces) {
    out << entity_names.at(s.id) << " = " << join_tokens(s.tokens) << "\n";
  }
  out << "\n[position-surfaces]\n";
  for (const auto& s : g.position_surfaces) {
    out << position_names.at(s.id) << " = " << join_tokens(s.tokens) << "\n";
  }
  out << "\n[negation-cues]\n";
  for (const auto& cue : g.negation_cues) out << join_tokens(cue) << "\n";
  out << "\n[uncertainty-cues]\n";
  for (const auto& cue : g.uncertainty_cues) out << join_tokens(cue) << "\n";
  out << "\n[templates]\n";
  for (const auto& tpl : g.templates) {
    out << exist_name(tpl.exist) << (tpl.with_position ? "+position" : "")
        << " = " << tpl.text << "\n";
  }
  for (const auto& filler : g.fillers) out << "filler = " << filler << "\n";
  return out.str();
}

ReportGrammar grammar_from_text(const std::string& text,
                                const std::vector<std::string>& entity_names,
                                const std::vector<std::string>& position_names) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kFormatTag) {
    throw std::invalid_argument("grammar file: missing format tag");
  }
  ReportGrammar g;
  g.num_entities = entity_names.size();
  g.num_positions = position_names.size();
  g.unspecified_position =
      name_index(position_names, "unspecified", "position");

  std::string section;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const std::size_t eq = line.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(line.substr(0, eq));
    const std::string value =
        eq == std::string::npos ? "" : trim(line.substr(eq + 1));
    if (section == "entity-surfaces") {
      g.entity_surfaces.push_back(
          {tokenize_text(value), name_index(entity_names, key, "entity")});
    } else if (section == "position-surfaces") {
      g.position_surfaces.push_back(
          {tokenize_text(value), name_index(position_names, key, "position")});
    } else if (section == "negation-cues") {
      g.negation_cues.push_back(tokenize_text(line));
    } else if (section == "uncertainty-cues") {
      g.uncertainty_cues.push_back(tokenize_text(line));
    } else if (section == "templates") {
      if (key == "filler") {
        g.fillers.push_back(value);
      } else {
        ReportGrammar::Template tpl;
        std::string label = key;
        tpl.with_position = false;
        if (label.size() > 9 && label.substr(label.size() - 9) == "+position") {
          tpl.with_position = true;
          label = label.substr(0, label.size() - 9);
        }
        if (label == "present") {
          tpl.exist = ExistLabel::Present;
        } else if (label == "absent") {
          tpl.exist = ExistLabel::Absent;
        } else if (label == "uncertain") {
          tpl.exist = ExistLabel::Uncertain;
        } else {
          throw std::invalid_argument("grammar file: bad template key '" +
                                      key + "'");
        }
        tpl.text = value;
        g.templates.push_back(tpl);
      }
    } else {
      throw std::invalid_argument("grammar file: line outside a section: " +
                                  line);
    }
  }
  g.validate();
  return g;
}

}  // namespace kvla
