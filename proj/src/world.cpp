#include "kvla/world.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "kvla/rng.hpp"

namespace kvla {

namespace {

struct AttributeEffect {
  const char* word;
  void (*apply)(BlobStyle&);
};

constexpr double kBackground = 0.08;

const AttributeEffect kAttributeTable[] = {
    {"bright", [](BlobStyle& s) { s.intensity = 0.85; }},
    {"vivid", [](BlobStyle& s) { s.intensity = 0.95; }},
    {"dim", [](BlobStyle& s) { s.intensity = 0.50; }},
    {"faint", [](BlobStyle& s) { s.intensity = 0.33; }},
    {"large", [](BlobStyle& s) { s.radius = 6.5; }},
    {"medium", [](BlobStyle& s) { s.radius = 5.5; }},
    {"small", [](BlobStyle& s) { s.radius = 4.5; }},
    {"tiny", [](BlobStyle& s) { s.radius = 3.5; }},
    {"sharp", [](BlobStyle& s) { s.soft_edge = false; }},
    {"soft", [](BlobStyle& s) { s.soft_edge = true; }},
    {"striped", [](BlobStyle& s) { s.striped = true; }},
    {"plain", [](BlobStyle& s) { s.striped = false; }},
    {"hollow", [](BlobStyle& s) { s.hollow = true; }},
    {"solid", [](BlobStyle& s) { s.hollow = false; }},
};

bool triplet_before(const Triplet& a, const Triplet& b) {
  if (a.entity != b.entity) return a.entity < b.entity;
  return a.position < b.position;
}

}  // namespace

BlobStyle style_from_attributes(const std::vector<std::string>& attributes) {
  if (attributes.empty()) {
    throw std::invalid_argument("entity has no attributes");
  }
  BlobStyle style;
  for (const std::string& word : attributes) {
    bool known = false;
    for (const AttributeEffect& effect : kAttributeTable) {
      if (word == effect.word) {
        effect.apply(style);
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::invalid_argument("unknown attribute word: " + word);
    }
  }
  return style;
}

void WorldSpec::validate() const {
  if (canvas == 0) throw std::invalid_argument("world: canvas must be positive");
  if (cells.empty()) throw std::invalid_argument("world: no position cells");
  if (entities.empty()) throw std::invalid_argument("world: no entities");

  std::set<std::string> cell_names;
  for (const PositionCell& c : cells) {
    if (c.name.empty() || c.width == 0 || c.height == 0) {
      throw std::invalid_argument("world: malformed cell");
    }
    if (c.x0 + c.width > canvas || c.y0 + c.height > canvas) {
      throw std::invalid_argument("world: cell outside canvas: " + c.name);
    }
    if (!cell_names.insert(c.name).second) {
      throw std::invalid_argument("world: duplicate cell name: " + c.name);
    }
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t j = i + 1; j < cells.size(); ++j) {
      const PositionCell& a = cells[i];
      const PositionCell& b = cells[j];
      const bool overlap = a.x0 < b.x0 + b.width && b.x0 < a.x0 + a.width &&
                           a.y0 < b.y0 + b.height && b.y0 < a.y0 + a.height;
      if (overlap) {
        throw std::invalid_argument("world: overlapping cells " + a.name +
                                    " / " + b.name);
      }
    }
  }

  std::set<std::string> names;
  std::set<std::string> seen_attribute_words;
  bool any_seen = false;
  for (const EntityDef& e : entities) {
    if (!names.insert(e.name).second) {
      throw std::invalid_argument("world: duplicate entity " + e.name);
    }
    const BlobStyle style = style_from_attributes(e.attributes);
    const std::size_t margin = static_cast<std::size_t>(std::ceil(style.radius));
    for (const PositionCell& c : cells) {
      if (c.width < 2 * margin + 1 || c.height < 2 * margin + 1) {
        throw std::invalid_argument("world: blob of entity " + e.name +
                                    " does not fit cell " + c.name);
      }
    }
    if (e.seen) {
      any_seen = true;
      for (const std::string& w : e.attributes) seen_attribute_words.insert(w);
    }
  }
  if (!any_seen) throw std::invalid_argument("world: no seen entities");
  for (const EntityDef& e : entities) {
    if (e.seen) continue;
    // unseen entities must be novel combinations of seen attribute words
    for (const std::string& w : e.attributes) {
      if (!seen_attribute_words.count(w)) {
        throw std::invalid_argument("world: unseen entity " + e.name +
                                    " uses attribute absent from seen set: " +
                                    w);
      }
    }
    for (const EntityDef& s : entities) {
      if (s.seen && s.attributes == e.attributes) {
        throw std::invalid_argument("world: unseen entity " + e.name +
                                    " duplicates attributes of " + s.name);
      }
    }
  }

  for (double rate : {present_rate, unseen_present_rate, uncertain_rate,
                      absent_mention_rate, position_mention_rate, filler_rate}) {
    if (!(rate >= 0.0 && rate <= 1.0)) {
      throw std::invalid_argument("world: rates must lie in [0,1]");
    }
  }
  if (present_rate + uncertain_rate > 1.0) {
    throw std::invalid_argument("world: present + uncertain rate exceeds 1");
  }
  if (!(noise >= 0.0)) throw std::invalid_argument("world: negative noise");
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("world: negative split fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("world: split fractions must sum to 1");
  }
}

KnowledgeBase build_knowledge_base(const WorldSpec& spec) {
  KnowledgeBase kb;
  for (const EntityDef& e : spec.entities) {
    std::string description;
    for (std::size_t i = 0; i < e.attributes.size(); ++i) {
      if (i) description += ' ';
      description += e.attributes[i];
    }
    kb.entities.push_back({e.name, description, e.seen});
  }
  for (const PositionCell& c : spec.cells) kb.positions.push_back(c.name);
  kb.positions.push_back("unspecified");
  kb.positions.push_back("other");
  kb.validate();
  return kb;
}

ReportGrammar build_grammar(const WorldSpec& spec) {
  const KnowledgeBase kb = build_knowledge_base(spec);
  ReportGrammar g;
  g.num_entities = kb.entities.size();
  g.num_positions = kb.positions.size();
  g.unspecified_position = kb.unspecified_position();
  for (std::size_t e = 0; e < kb.entities.size(); ++e) {
    g.entity_surfaces.push_back({tokenize_text(kb.entities[e].name), e});
  }
  for (std::size_t c = 0; c < spec.cells.size(); ++c) {
    g.position_surfaces.push_back({tokenize_text(spec.cells[c].name), c});
  }
  g.negation_cues = {{"no", "evidence", "of"}, {"no"}, {"without"}};
  g.uncertainty_cues = {{"possible"}, {"may", "represent"},
                        {"cannot", "exclude"}};
  g.templates = {
      {ExistLabel::Present, true, "There is {entity} in the {position}."},
      {ExistLabel::Present, true, "{entity} is seen in the {position}."},
      {ExistLabel::Present, true, "The {position} shows {entity}."},
      {ExistLabel::Present, false, "There is {entity}."},
      {ExistLabel::Present, false, "{entity} is noted."},
      {ExistLabel::Absent, true, "No evidence of {entity} in the {position}."},
      {ExistLabel::Absent, true, "The {position} is without {entity}."},
      {ExistLabel::Absent, false, "No {entity} is seen."},
      {ExistLabel::Absent, false, "There is no {entity}."},
      {ExistLabel::Uncertain, true, "Possible {entity} in the {position}."},
      {ExistLabel::Uncertain, true,
       "Cannot exclude {entity} in the {position}."},
      {ExistLabel::Uncertain, false, "Possible {entity}."},
      {ExistLabel::Uncertain, false, "The finding may represent {entity}."},
  };
  g.fillers = {"The technique is satisfactory.",
               "Comparison made to the prior study.",
               "Image quality is adequate.",
               "No acute osseous abnormality."};
  g.validate();
  return g;
}

std::vector<int> split_assignment(std::size_t n,
                                  const std::array<double, 3>& fractions,
                                  std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("split: fractions must sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  const std::size_t b1 = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * fractions[0]));
  const std::size_t b2 = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * (fractions[0] + fractions[1])));
  std::vector<int> assign(n, kSplitTest);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < b1) {
      assign[order[i]] = kSplitTrain;
    } else if (i < b2) {
      assign[order[i]] = kSplitVal;
    }
  }
  return assign;
}

SplitIndices split(const std::vector<Sample>& dataset,
                   const std::array<double, 3>& fractions, std::uint64_t seed) {
  const std::vector<int> assign =
      split_assignment(dataset.size(), fractions, seed);
  SplitIndices out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (assign[i] == kSplitTrain) {
      out.train.push_back(i);
    } else if (assign[i] == kSplitVal) {
      out.val.push_back(i);
    } else {
      out.test.push_back(i);
    }
  }
  return out;
}

namespace {

struct RenderedBlob {
  std::size_t cell = 0;
  std::vector<std::uint32_t> support;
};

RenderedBlob render_blob(std::vector<double>& canvas, std::size_t side,
                         const PositionCell& cell, const BlobStyle& style,
                         double contrast, Rng& rng) {
  const std::size_t margin = static_cast<std::size_t>(std::ceil(style.radius));
  const std::size_t lo_x = cell.x0 + margin;
  const std::size_t hi_x = cell.x0 + cell.width - 1 - margin;
  const std::size_t lo_y = cell.y0 + margin;
  const std::size_t hi_y = cell.y0 + cell.height - 1 - margin;
  const std::size_t cx = lo_x + rng.next_below(hi_x - lo_x + 1);
  const std::size_t cy = lo_y + rng.next_below(hi_y - lo_y + 1);

  RenderedBlob blob;
  const long r_ceil = static_cast<long>(margin);
  for (long dy = -r_ceil; dy <= r_ceil; ++dy) {
    for (long dx = -r_ceil; dx <= r_ceil; ++dx) {
      const double dist = std::sqrt(static_cast<double>(dx * dx + dy * dy));
      if (dist > style.radius) continue;
      if (style.hollow && dist < 0.45 * style.radius) continue;
      double amp = style.intensity * contrast;
      if (style.soft_edge) {
        amp *= 0.5 * (1.0 + std::cos(3.14159265358979323846 * dist /
                                     style.radius));
      }
      if (style.striped && (((dx + 1024) >> 1) & 1)) amp *= 0.45;
      if (amp <= 0.0) continue;
      const std::size_t x = static_cast<std::size_t>(
          static_cast<long>(cx) + dx);
      const std::size_t y = static_cast<std::size_t>(
          static_cast<long>(cy) + dy);
      canvas[y * side + x] += amp;
      blob.support.push_back(static_cast<std::uint32_t>(y * side + x));
    }
  }
  std::sort(blob.support.begin(), blob.support.end());
  return blob;
}

}  // namespace

std::vector<Sample> generate_dataset(const WorldSpec& spec, std::size_t n,
                                     std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate_dataset: n must be >= 1");
  spec.validate();
  const KnowledgeBase kb = build_knowledge_base(spec);
  const ReportGrammar grammar = build_grammar(spec);
  const std::vector<int> assignment = split_assignment(n, spec.fractions, seed);

  std::vector<BlobStyle> styles;
  for (const EntityDef& e : spec.entities) {
    styles.push_back(style_from_attributes(e.attributes));
  }

  std::vector<Sample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "sample", i));
    Sample s;
    s.index = i;
    s.split = assignment[i];
    const std::size_t side = spec.canvas;
    std::vector<double> canvas(side * side, kBackground);
    s.labels.assign(spec.entities.size(), 0);
    s.masks.assign(spec.entities.size(), {});

    std::vector<Triplet> mentions;
    for (std::size_t e = 0; e < spec.entities.size(); ++e) {
      const EntityDef& ent = spec.entities[e];
      if (!ent.seen && s.split == kSplitTrain) continue;  // leakage guard

      const double p_present =
          ent.seen ? spec.present_rate : spec.unseen_present_rate;
      const double p_uncertain = ent.seen ? spec.uncertain_rate : 0.0;
      const double u = rng.next_unit();

      if (u < p_present) {
        const std::size_t cell = rng.next_below(spec.cells.size());
        RenderedBlob blob =
            render_blob(canvas, side, spec.cells[cell], styles[e], 1.0, rng);
        s.labels[e] = 1;
        s.masks[e] = std::move(blob.support);
        const bool with_pos = rng.next_unit() < spec.position_mention_rate;
        mentions.push_back({e,
                            with_pos ? cell : grammar.unspecified_position,
                            ExistLabel::Present});
      } else if (u < p_present + p_uncertain) {
        const std::size_t cell = rng.next_below(spec.cells.size());
        const bool rendered = rng.next_unit() < 0.5;
        if (rendered) {
          RenderedBlob blob =
              render_blob(canvas, side, spec.cells[cell], styles[e], 0.5, rng);
          s.labels[e] = 1;
          s.masks[e] = std::move(blob.support);
        }
        const bool with_pos = rng.next_unit() < spec.position_mention_rate;
        mentions.push_back({e,
                            with_pos ? cell : grammar.unspecified_position,
                            ExistLabel::Uncertain});
      } else {
        if (ent.seen && rng.next_unit() < spec.absent_mention_rate) {
          const bool with_pos = rng.next_unit() < spec.position_mention_rate;
          const std::size_t cell =
              with_pos ? rng.next_below(spec.cells.size())
                       : grammar.unspecified_position;
          mentions.push_back({e, cell, ExistLabel::Absent});
        }
      }
    }

    for (const Triplet& t : mentions) {
      s.sentences.push_back(emit_sentence(grammar, t, rng));
    }
    if (rng.next_unit() < spec.filler_rate) {
      s.sentences.push_back(emit_filler(grammar, rng));
    }
    rng.shuffle(s.sentences);

    s.provenance = mentions;
    std::sort(s.provenance.begin(), s.provenance.end(), triplet_before);

    if (spec.noise > 0.0) {
      for (double& v : canvas) v += rng.next_gaussian() * spec.noise;
    }
    s.image.height = side;
    s.image.width = side;
    s.image.channels = 1;
    s.image.pixels.resize(canvas.size());
    for (std::size_t p = 0; p < canvas.size(); ++p) {
      s.image.pixels[p] = quantize_unit(canvas[p]);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

WorldSpec desk_world() {
  WorldSpec spec;
  spec.canvas = 32;
  spec.cells = {
      {"upper left", 0, 0, 16, 16},
      {"upper right", 16, 0, 16, 16},
      {"lower left", 0, 16, 16, 16},
      {"lower right", 16, 16, 16, 16},
  };
  spec.entities = {
      {"opacity", {"bright", "large", "sharp", "plain"}, true},
      {"nodule", {"bright", "small", "soft", "striped"}, true},
      {"effusion", {"dim", "large", "soft", "plain"}, true},
      {"collapse", {"dim", "small", "sharp", "striped"}, true},
      {"edema", {"bright", "large", "soft", "striped"}, true},
      {"fibrosis", {"dim", "small", "soft", "plain"}, true},
      {"xenopathy", {"bright", "small", "sharp", "plain"}, false},
  };
  spec.validate();
  return spec;
}

WorldSpec paper_world() {
  WorldSpec spec;
  spec.canvas = 224;
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t c = 0; c < 7; ++c) {
      spec.cells.push_back({"sector " + std::to_string(r) + " " +
                                std::to_string(c),
                            c * 32, r * 32, 32, 32});
    }
  }
  const char* intensities[] = {"bright", "vivid", "dim", "faint"};
  const char* radii[] = {"large", "medium", "small", "tiny"};
  const char* edges[] = {"sharp", "soft"};
  const char* textures[] = {"striped", "plain"};
  const char* shells[] = {"solid", "hollow"};
  for (std::size_t count = 0; count < 76; ++count) {
    const std::size_t i = count / 32, rem1 = count % 32;
    const std::size_t r = rem1 / 8, rem2 = rem1 % 8;
    const std::size_t e = rem2 / 4, rem3 = rem2 % 4;
    const std::size_t t = rem3 / 2, h = rem3 % 2;
    spec.entities.push_back({"finding" + std::to_string(count),
                             {intensities[i], radii[r], edges[e], textures[t],
                              shells[h]},
                             count < 75});
  }
  spec.validate();
  return spec;
}

}  // namespace kvla
