#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kvla/metrics.hpp"
#include "kvla/rng.hpp"

using namespace kvla;

namespace {

Heatmap make_map(std::size_t h, std::size_t w, std::vector<double> values) {
  Heatmap map;
  map.height = h;
  map.width = w;
  map.values = std::move(values);
  return map;
}

// O(n^2) pair-counting oracle, ties worth one half
double auc_oracle(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("auc basics") {
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);  // ties count half
  CHECK_THROWS_AS(auc({0.5, 0.6}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(auc({}, {}), std::invalid_argument);
}

TEST_CASE("auc matches the pair-counting oracle exactly") {
  Rng rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(20);
    std::vector<int> labels(20);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < 20; ++i) {
      // quantized scores force plenty of ties
      scores[i] = static_cast<double>(rng.next_below(8)) / 8.0;
      labels[i] = static_cast<int>(rng.next_below(2));
      has_pos = has_pos || labels[i] == 1;
      has_neg = has_neg || labels[i] == 0;
    }
    if (!has_pos) labels[0] = 1;
    if (!has_neg) labels[1] = 0;
    CHECK(auc(scores, labels) == auc_oracle(scores, labels));
  }
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
  Rng rng(73);
  std::vector<double> scores(15);
  std::vector<int> labels(15);
  for (std::size_t i = 0; i < 15; ++i) {
    scores[i] = rng.next_gaussian();
    labels[i] = static_cast<int>(rng.next_below(2));
  }
  labels[0] = 1;
  labels[1] = 0;
  const double base = auc(scores, labels);
  std::vector<double> affine = scores, squashed = scores;
  for (double& v : affine) v = 3.0 * v + 11.0;
  for (double& v : squashed) v = 1.0 / (1.0 + std::exp(-v));
  CHECK(auc(affine, labels) == base);
  CHECK(auc(squashed, labels) == base);
}

TEST_CASE("f1 threshold scan") {
  ThresholdMetrics tm = f1_acc_at_best_threshold({0.9, 0.1}, {1, 0});
  CHECK(tm.f1 == 1.0);
  CHECK(tm.accuracy == 1.0);

  // degenerate all-positive labels: everything predicted positive
  ThresholdMetrics all_pos = f1_acc_at_best_threshold({0.2, 0.7, 0.5},
                                                      {1, 1, 1});
  CHECK(all_pos.f1 == 1.0);
  CHECK(all_pos.threshold < 0.2);

  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> scores(10);
    std::vector<int> labels(10);
    for (std::size_t i = 0; i < 10; ++i) {
      scores[i] = static_cast<double>(rng.next_below(6)) / 6.0;
      labels[i] = static_cast<int>(rng.next_below(2));
    }
    ThresholdMetrics got = f1_acc_at_best_threshold(scores, labels);

    // brute force over the same candidate set, coded independently
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<double> candidates{sorted.front() - 1.0};
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
      candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
    }
    candidates.push_back(sorted.back() + 1.0);
    double best_f1 = -1.0, best_threshold = 0.0;
    for (double t : candidates) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= t;
        tp += pred && labels[i] == 1;
        fp += pred && labels[i] == 0;
        fn += !pred && labels[i] == 1;
      }
      const double f1 =
          (2 * tp + fp + fn) == 0
              ? 0.0
              : 2.0 * static_cast<double>(tp) /
                    static_cast<double>(2 * tp + fp + fn);
      if (f1 > best_f1) {
        best_f1 = f1;
        best_threshold = t;
      }
    }
    CHECK(got.f1 == best_f1);
    CHECK(got.threshold == best_threshold);
    // the returned f1 dominates every candidate threshold
    for (double t : candidates) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= t;
        tp += pred && labels[i] == 1;
        fp += pred && labels[i] == 0;
        fn += !pred && labels[i] == 1;
      }
      const double f1 =
          (2 * tp + fp + fn) == 0
              ? 0.0
              : 2.0 * static_cast<double>(tp) /
                    static_cast<double>(2 * tp + fp + fn);
      CHECK(got.f1 >= f1);
    }
  }
}

TEST_CASE("pointing game") {
  PixelMask full(16, 1);
  Heatmap map = make_map(4, 4, std::vector<double>(16, 0.3));
  CHECK(pointing_game(map, full));

  PixelMask corner(16, 0);
  corner[15] = 1;
  Heatmap peak = make_map(4, 4, std::vector<double>(16, 0.0));
  peak.values[3] = 1.0;  // outside the mask
  CHECK(!pointing_game(peak, corner));
  peak.values[15] = 2.0;
  CHECK(pointing_game(peak, corner));

  PixelMask empty(16, 0);
  CHECK_THROWS_AS(pointing_game(map, empty), std::invalid_argument);

  // batch accuracy equals the mean of per-instance hits
  Rng rng(79);
  std::vector<bool> hits;
  double acc = 0.0;
  for (int i = 0; i < 25; ++i) {
    Heatmap h = make_map(4, 4, {});
    h.values.resize(16);
    for (double& v : h.values) v = rng.next_unit();
    PixelMask m(16, 0);
    for (int k = 0; k < 5; ++k) m[rng.next_below(16)] = 1;
    bool any = false;
    for (auto b : m) any = any || b;
    if (!any) m[0] = 1;
    hits.push_back(pointing_game(h, m));
    acc += hits.back() ? 1.0 : 0.0;
  }
  double recomputed = 0.0;
  for (bool h : hits) recomputed += h ? 1.0 : 0.0;
  CHECK(acc == recomputed);
}

TEST_CASE("dice and iou threshold search") {
  // heatmap identical to the mask: perfect at any positive threshold
  PixelMask mask(16, 0);
  mask[5] = mask[6] = mask[9] = 1;
  Heatmap same = make_map(4, 4, std::vector<double>(16, 0.0));
  for (std::size_t i = 0; i < 16; ++i) same.values[i] = mask[i] ? 1.0 : 0.0;
  OverlapMetrics om = dice_iou_best_threshold(same, mask);
  CHECK(om.dice == 1.0);
  CHECK(om.iou == 1.0);

  // prediction disjoint from the mask at every threshold
  Heatmap wrong = make_map(4, 4, std::vector<double>(16, 0.0));
  wrong.values[0] = 1.0;
  PixelMask far_mask(16, 0);
  far_mask[15] = 1;
  OverlapMetrics bad = dice_iou_best_threshold(wrong, far_mask);
  CHECK(bad.dice < 0.2);  // only the all-positive threshold overlaps at all

  // random 8x8 instances against exhaustive pixel counting at every threshold
  Rng rng(83);
  for (int trial = 0; trial < 20; ++trial) {
    Heatmap h = make_map(8, 8, {});
    h.values.resize(64);
    for (double& v : h.values) {
      v = static_cast<double>(rng.next_below(101)) / 100.0;
    }
    PixelMask m(64, 0);
    for (auto& bit : m) bit = rng.next_below(2);

    double best_dice = -1.0, best_iou = 0.0, best_t = 0.0;
    for (int step = 0; step <= 100; ++step) {
      const double t = step / 100.0;
      std::size_t inter = 0, pred = 0, truth = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        const bool p = h.values[i] >= t;
        inter += p && m[i];
        pred += p;
        truth += m[i];
      }
      double dice, iou;
      if (pred + truth == 0) {
        dice = iou = 1.0;
      } else {
        dice = 2.0 * inter / static_cast<double>(pred + truth);
        iou = (pred + truth - inter) == 0
                  ? 1.0
                  : static_cast<double>(inter) /
                        static_cast<double>(pred + truth - inter);
      }
      if (dice > best_dice) {
        best_dice = dice;
        best_iou = iou;
        best_t = t;
      }
      CHECK(dice >= iou);  // with equality only at 0 and 1
      if (dice != iou) {
        CHECK(dice > 0.0);
        CHECK(dice < 1.0);
      }
    }
    OverlapMetrics got = dice_iou_best_threshold(h, m);
    CHECK(got.dice == best_dice);
    CHECK(got.iou == best_iou);
    CHECK(got.threshold == best_t);
  }
}

TEST_CASE("detection precision and recall") {
  // perfect predictions
  PixelMask mask(16, 0);
  mask[5] = mask[6] = 1;
  Heatmap exact = make_map(4, 4, std::vector<double>(16, 0.0));
  exact.values[5] = exact.values[6] = 1.0;
  DetectionPR perfect = detection_pr({exact, exact}, {mask, mask});
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);

  // empty instance set: documented degenerate convention
  DetectionPR none = detection_pr({}, {});
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);

  // ten instances tallied by hand: 6 accurate, 4 pointing at the wrong cell
  std::vector<Heatmap> maps;
  std::vector<PixelMask> masks;
  for (int i = 0; i < 10; ++i) {
    PixelMask m(16, 0);
    m[3] = 1;
    Heatmap h = make_map(4, 4, std::vector<double>(16, 0.0));
    h.values[i < 6 ? 3 : 12] = 1.0;
    maps.push_back(h);
    masks.push_back(m);
  }
  DetectionPR tallied = detection_pr(maps, masks);
  CHECK(tallied.recall == doctest::Approx(0.6));
  CHECK(tallied.precision == doctest::Approx(0.6));
}

TEST_CASE("min-max normalization") {
  Heatmap constant = make_map(2, 2, {0.4, 0.4, 0.4, 0.4});
  min_max_normalize(constant);
  for (double v : constant.values) CHECK(v == 0.0);

  Heatmap ramp = make_map(2, 2, {0.2, 0.3, 0.4, 0.6});
  Heatmap before = ramp;
  min_max_normalize(ramp);
  CHECK(ramp.values[0] == 0.0);
  CHECK(ramp.values[3] == 1.0);
  // argmax unchanged by the monotone map
  std::size_t a = 0, b = 0;
  for (std::size_t i = 1; i < 4; ++i) {
    if (before.values[i] > before.values[a]) a = i;
    if (ramp.values[i] > ramp.values[b]) b = i;
  }
  CHECK(a == b);
}
