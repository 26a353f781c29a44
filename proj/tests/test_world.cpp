#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "kvla/image.hpp"
#include "kvla/world.hpp"

using namespace kvla;

TEST_CASE("generation is deterministic") {
  WorldSpec spec = desk_world();
  auto a = generate_dataset(spec, 40, 77);
  auto b = generate_dataset(spec, 40, 77);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.pixels == b[i].image.pixels);
    CHECK(a[i].sentences == b[i].sentences);
    CHECK(a[i].labels == b[i].labels);
    CHECK(a[i].masks == b[i].masks);
    CHECK(a[i].provenance == b[i].provenance);
    CHECK(a[i].split == b[i].split);
  }
  auto c = generate_dataset(spec, 40, 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    any_diff = any_diff || a[i].image.pixels != c[i].image.pixels;
  }
  CHECK(any_diff);
}

TEST_CASE("zero-noise single entity: mask equals rendered support") {
  WorldSpec spec = desk_world();
  spec.noise = 0.0;
  spec.uncertain_rate = 0.0;
  // keep only the sharp plain entity so amplitude is far from background
  spec.entities = {{"opacity", {"bright", "large", "sharp", "plain"}, true}};
  spec.present_rate = 0.8;
  auto samples = generate_dataset(spec, 30, 5);
  const double background = quantize_unit(0.08);
  int positives = 0;
  for (const Sample& s : samples) {
    if (s.labels[0] == 0) {
      CHECK(s.masks[0].empty());
      continue;
    }
    ++positives;
    std::set<std::uint32_t> support;
    for (std::size_t p = 0; p < s.image.pixels.size(); ++p) {
      if (s.image.pixels[p] != background) support.insert(p);
    }
    std::set<std::uint32_t> mask(s.masks[0].begin(), s.masks[0].end());
    CHECK(mask == support);
  }
  CHECK(positives > 5);
}

TEST_CASE("per-entity prevalence within three sigma at n=2000") {
  WorldSpec spec = desk_world();
  const std::size_t n = 2000;
  auto samples = generate_dataset(spec, n, 2024);
  for (std::size_t e = 0; e < spec.entities.size(); ++e) {
    const bool seen = spec.entities[e].seen;
    std::size_t eligible = 0, hits = 0;
    for (const Sample& s : samples) {
      if (!seen && s.split == kSplitTrain) continue;
      eligible += 1;
      hits += s.labels[e];
    }
    const double p = seen ? spec.present_rate + 0.5 * spec.uncertain_rate
                          : spec.unseen_present_rate;
    const double mean = p * static_cast<double>(eligible);
    const double sigma = std::sqrt(mean * (1.0 - p));
    CHECK(std::abs(static_cast<double>(hits) - mean) <= 3.0 * sigma);
  }
}

TEST_CASE("split sizes, disjointness, determinism") {
  WorldSpec spec = desk_world();
  auto ds = generate_dataset(spec, 10, 3);
  SplitIndices s = split(ds, {0.6, 0.2, 0.2}, 3);
  CHECK(s.train.size() == 6);
  CHECK(s.val.size() == 2);
  CHECK(s.test.size() == 2);
  std::set<std::size_t> all;
  for (auto i : s.train) all.insert(i);
  for (auto i : s.val) all.insert(i);
  for (auto i : s.test) all.insert(i);
  CHECK(all.size() == 10);

  SplitIndices again = split(ds, {0.6, 0.2, 0.2}, 3);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);
  CHECK(again.test == s.test);

  CHECK_THROWS_AS(split(ds, {0.5, 0.2, 0.2}, 3), std::invalid_argument);
}

TEST_CASE("dataset split tags agree with split_assignment") {
  WorldSpec spec = desk_world();
  auto ds = generate_dataset(spec, 50, 9);
  auto assign = split_assignment(50, spec.fractions, 9);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds[i].split == assign[i]);
  }
}

TEST_CASE("unseen entities never leak into the train split") {
  WorldSpec spec = desk_world();
  auto ds = generate_dataset(spec, 300, 13);
  std::size_t unseen_id = 6;
  REQUIRE(spec.entities[unseen_id].seen == false);
  const std::string& unseen_name = spec.entities[unseen_id].name;
  std::size_t unseen_in_test = 0;
  for (const Sample& s : ds) {
    if (s.split == kSplitTrain) {
      CHECK(s.labels[unseen_id] == 0);
      CHECK(s.masks[unseen_id].empty());
      for (const Triplet& t : s.provenance) CHECK(t.entity != unseen_id);
      for (const std::string& sentence : s.sentences) {
        CHECK(sentence.find(unseen_name) == std::string::npos);
      }
    } else {
      unseen_in_test += s.labels[unseen_id];
    }
  }
  CHECK(unseen_in_test > 0);  // the zero-shot testbed is populated
}

TEST_CASE("reports round-trip to provenance triplets") {
  WorldSpec spec = desk_world();
  const ReportGrammar grammar = build_grammar(spec);
  auto ds = generate_dataset(spec, 200, 21);
  for (const Sample& s : ds) {
    Report report{s.sentences};
    TripletSet parsed = parse_report(report, grammar);
    CHECK(parsed.triplets == s.provenance);
  }
}

TEST_CASE("label-mask consistency") {
  WorldSpec spec = desk_world();
  auto ds = generate_dataset(spec, 120, 31);
  for (const Sample& s : ds) {
    for (std::size_t e = 0; e < s.labels.size(); ++e) {
      CHECK((s.labels[e] == 1) == !s.masks[e].empty());
    }
  }
}

TEST_CASE("spec validation rejects malformed worlds") {
  WorldSpec ok = desk_world();
  ok.validate();

  WorldSpec overlap = ok;
  overlap.cells[1] = {"shifted", 8, 0, 16, 16};
  CHECK_THROWS_AS(overlap.validate(), std::invalid_argument);

  WorldSpec empty = ok;
  empty.entities.clear();
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);

  WorldSpec bad_attr = ok;
  bad_attr.entities[0].attributes = {"sparkly"};
  CHECK_THROWS_AS(bad_attr.validate(), std::invalid_argument);

  WorldSpec big_blob = ok;
  big_blob.cells = {{"tiny cell", 0, 0, 8, 8},
                    {"rest", 8, 8, 16, 16}};
  CHECK_THROWS_AS(big_blob.validate(), std::invalid_argument);

  WorldSpec dup_unseen = ok;
  dup_unseen.entities[6].attributes = ok.entities[0].attributes;
  CHECK_THROWS_AS(dup_unseen.validate(), std::invalid_argument);

  WorldSpec novel_violation = ok;
  novel_violation.entities[6].attributes = {"faint", "tiny", "sharp", "plain"};
  CHECK_THROWS_AS(novel_violation.validate(), std::invalid_argument);

  CHECK_THROWS_AS(generate_dataset(ok, 0, 1), std::invalid_argument);
}

TEST_CASE("paper-shaped world validates and renders") {
  WorldSpec spec = paper_world();
  CHECK(spec.entities.size() == 76);
  CHECK(spec.cells.size() == 49);
  auto samples = generate_dataset(spec, 2, 1);
  CHECK(samples[0].image.width == 224);
  KnowledgeBase kb = build_knowledge_base(spec);
  CHECK(kb.seen_entities().size() == 75);
  CHECK(kb.positions.size() == 51);
}

TEST_CASE("graymap files round-trip") {
  WorldSpec spec = desk_world();
  auto ds = generate_dataset(spec, 3, 41);
  const std::string path = "/tmp/kvla_test_sample.pgm";
  write_pgm(path, ds[0].image);
  Image back = read_pgm(path);
  CHECK(back.width == ds[0].image.width);
  CHECK(back.height == ds[0].image.height);
  CHECK(back.pixels == ds[0].image.pixels);
  std::remove(path.c_str());
}
