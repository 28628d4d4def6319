#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"

using namespace lmnet;
using lmnet::testing::random_mask;

namespace {

using PixelSet = std::set<std::pair<std::size_t, std::size_t>>;

PixelSet pixels_of(const SegmentationMask& m, std::int32_t cls) {
  PixelSet s;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      if (m.at(y, x) == cls) s.insert({y, x});
  return s;
}

std::size_t intersection_size(const PixelSet& a, const PixelSet& b) {
  std::size_t n = 0;
  for (const auto& p : a) n += b.count(p);
  return n;
}

PixelSet boundary_oracle(const SegmentationMask& m) {
  PixelSet fg;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      if (m.at(y, x) != 0) fg.insert({y, x});
  PixelSet out;
  for (auto [y, x] : fg) {
    const bool interior = y > 0 && x > 0 && fg.count({y - 1, x}) && fg.count({y + 1, x}) && fg.count({y, x - 1}) &&
                          fg.count({y, x + 1});
    if (!interior) out.insert({y, x});
  }
  return out;
}

double hausdorff_oracle(const SegmentationMask& a, const SegmentationMask& b) {
  const auto ba = boundary_oracle(a), bb = boundary_oracle(b);
  auto directed = [](const PixelSet& from, const PixelSet& to) {
    double worst = 0;
    for (auto [y0, x0] : from) {
      double best = INFINITY;
      for (auto [y1, x1] : to) {
        const double dy = double(y0) - double(y1), dx = double(x0) - double(x1);
        best = std::min(best, dy * dy + dx * dx);
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(std::max(directed(ba, bb), directed(bb, ba)));
}

// Random blobs: a few filled rectangles, sometimes none.
SegmentationMask random_blobs(std::size_t size, std::mt19937_64& rng) {
  SegmentationMask m(size, size);
  std::uniform_int_distribution<int> count(0, 3), pos(0, int(size) - 1);
  for (int i = count(rng); i > 0; --i) {
    int y0 = pos(rng), y1 = pos(rng), x0 = pos(rng), x1 = pos(rng);
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) m.at(y, x) = 1;
  }
  return m;
}

}  // namespace

TEST(Confusion, MatchesPixelCounting) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_mask(8, 8, 3, rng), r = random_mask(8, 8, 3, rng);
    auto s = confusion_stats(p, r, 3);
    for (std::int32_t c = 0; c < 3; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        const bool pp = p.labels[i] == c, rr = r.labels[i] == c;
        tp += pp && rr;
        fp += pp && !rr;
        fn += !pp && rr;
        tn += !pp && !rr;
      }
      EXPECT_EQ(s[c].tp, tp);
      EXPECT_EQ(s[c].fp, fp);
      EXPECT_EQ(s[c].fn, fn);
      EXPECT_EQ(s[c].tn, tn);
    }
  }
}

TEST(Confusion, IdenticalAndComplementMasks) {
  std::mt19937_64 rng(52);
  auto m = random_mask(6, 6, 2, rng);
  for (const auto& s : confusion_stats(m, m, 2)) EXPECT_EQ(s.fp + s.fn, 0u);
  auto comp = m;
  for (auto& v : comp.labels) v = 1 - v;
  for (const auto& s : confusion_stats(m, comp, 2)) EXPECT_EQ(s.tp + s.tn, 0u);
  EXPECT_THROW(confusion_stats(m, SegmentationMask(5, 6), 2), ShapeError);
  EXPECT_THROW(confusion_stats(m, m, 1), ValueError);
}

TEST(Scores, ClosedForms) {
  SegmentationMask a(1, 4), b(1, 4);
  a.labels = {1, 1, 0, 0};
  b.labels = {0, 1, 1, 0};
  auto s = confusion_stats(a, b, 2)[1];
  EXPECT_DOUBLE_EQ(dice(s), 0.5);
  EXPECT_DOUBLE_EQ(iou(s), 1.0 / 3.0);
  auto same = confusion_stats(a, a, 2);
  EXPECT_EQ(dice(same[1]), 1.0);
  EXPECT_EQ(iou(same[0]), 1.0);
  EXPECT_EQ(accuracy(same), 1.0);
}

TEST(Scores, EmptyClassConventions) {
  SegmentationMask bg(3, 3), fg(3, 3, 1);
  auto empty = confusion_stats(bg, bg, 2)[1];
  EXPECT_EQ(dice(empty), 1.0);
  EXPECT_EQ(iou(empty), 1.0);
  EXPECT_EQ(precision(empty), 1.0);
  EXPECT_EQ(recall(empty), 1.0);
  auto missed = confusion_stats(bg, fg, 2)[1];
  EXPECT_EQ(precision(missed), 0.0);
  EXPECT_EQ(recall(missed), 0.0);
  EXPECT_EQ(dice(missed), 0.0);
}

TEST(Scores, MatchSetOracleAndDiceIouIdentity) {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = random_mask(16, 16, 2, rng, 0.3), r = random_mask(16, 16, 2, rng, 0.3);
    auto stats = confusion_stats(p, r, 2);
    std::size_t correct = 0;
    for (std::int32_t c = 0; c < 2; ++c) {
      const auto a = pixels_of(p, c), b = pixels_of(r, c);
      const std::size_t inter = intersection_size(a, b), uni = a.size() + b.size() - inter;
      correct += inter;
      EXPECT_EQ(dice(stats[c]), 2.0 * inter / double(a.size() + b.size()));
      EXPECT_EQ(iou(stats[c]), double(inter) / double(uni));
      // dice = 2 iou / (1 + iou) in exact integer arithmetic, and to the last bit or two in doubles.
      EXPECT_EQ(2 * inter * (uni + inter), 2 * inter * (a.size() + b.size()));
      const double j = iou(stats[c]);
      EXPECT_NEAR(dice(stats[c]), 2 * j / (1 + j), 4e-16);
    }
    EXPECT_EQ(accuracy(stats), double(correct) / 256.0);
  }
}

TEST(Hausdorff, ThreeFourFive) {
  SegmentationMask a(8, 8), b(8, 8);
  a.at(0, 0) = 1;
  b.at(3, 4) = 1;
  auto h = hausdorff(a, b);
  EXPECT_FALSE(h.empty);
  EXPECT_EQ(h.value, 5.0);
  EXPECT_EQ(hausdorff(a, a).value, 0.0);
}

TEST(Hausdorff, MatchesAllPairsOracle) {
  std::mt19937_64 rng(54);
  int compared = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto a = random_blobs(16, rng), b = random_blobs(16, rng);
    auto h = hausdorff(a, b);
    if (foreground_area(a) == 0 || foreground_area(b) == 0) {
      EXPECT_TRUE(h.empty);
      EXPECT_EQ(h.value, std::sqrt(512.0));
      continue;
    }
    EXPECT_EQ(h.value, hausdorff_oracle(a, b));
    ++compared;
  }
  EXPECT_GT(compared, 100);
}

TEST(Hausdorff, BoundaryMapMatchesOracle) {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    auto m = random_mask(10, 12, 2, rng, 0.7);
    auto b = boundary_map(m);
    const auto want = boundary_oracle(m);
    for (std::size_t y = 0; y < 10; ++y)
      for (std::size_t x = 0; x < 12; ++x) EXPECT_EQ(b[y * 12 + x] != 0, want.count({y, x}) == 1);
  }
}

TEST(Rad, ClosedFormsAndCounting) {
  SegmentationMask ref(4, 4), pred(4, 4);
  ref.at(0, 0) = ref.at(0, 1) = 1;
  pred.at(1, 0) = pred.at(1, 1) = pred.at(2, 2) = pred.at(3, 3) = 1;
  EXPECT_EQ(rad(pred, ref).value, 100.0);
  EXPECT_EQ(rad(ref, ref).value, 0.0);
  EXPECT_FALSE(rad(ref, SegmentationMask(4, 4)).defined);
  std::mt19937_64 rng(56);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = random_mask(16, 16, 2, rng, 0.2), r = random_mask(16, 16, 2, rng, 0.2);
    const double ap = double(pixels_of(p, 1).size()), ar = double(pixels_of(r, 1).size());
    if (ar == 0) continue;
    EXPECT_EQ(rad(p, r).value, 100.0 * (ap - ar) / ar);
  }
}

TEST(Report, MeansAndFlags) {
  SegmentationMask a(4, 4), b(4, 4);
  a.at(1, 1) = 1;
  MetricsAccumulator acc(2);
  acc.add(a, a);
  acc.add(b, a);  // nothing predicted
  acc.add(b, b);  // empty reference
  auto r = acc.report();
  EXPECT_EQ(r.images, 3u);
  EXPECT_DOUBLE_EQ(r.dice[1], (1.0 + 0.0 + 1.0) / 3.0);
  EXPECT_DOUBLE_EQ(r.dice[0], (1.0 + 30.0 / 31.0 + 1.0) / 3.0);
  EXPECT_DOUBLE_EQ(r.mean_dice, (r.dice[0] + r.dice[1]) / 2);
  EXPECT_EQ(r.hausdorff_empty, 2u);
  EXPECT_EQ(r.rad_undefined, 1u);
  EXPECT_DOUBLE_EQ(r.rad, (0.0 - 100.0) / 2);
  MetricsAccumulator fg(2, true);
  fg.add(a, a);
  fg.add(b, a);
  EXPECT_DOUBLE_EQ(fg.report().mean_dice, 0.5);
  nlohmann::json j = r;
  EXPECT_EQ(nlohmann::json(j.get<MetricsReport>()), j);
}

TEST(Report, SelfEvaluationIsPerfect) {
  std::mt19937_64 rng(57);
  MetricsAccumulator acc(3);
  for (int i = 0; i < 10; ++i) {
    auto m = random_mask(16, 16, 3, rng, 0.4);
    acc.add(m, m);
  }
  auto r = acc.report();
  EXPECT_EQ(r.mean_dice, 1.0);
  EXPECT_EQ(r.mean_iou, 1.0);
  EXPECT_EQ(r.hausdorff, 0.0);
  EXPECT_EQ(r.accuracy, 1.0);
}
