#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icseg/metrics.hpp"
#include "icseg/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace icseg;

namespace {

MaskGrid random_mask(Rng& rng, int64_t h, int64_t w, double p = 0.5) {
  MaskGrid m(h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) m(y, x) = rng.bernoulli(p);
  return m;
}

// O(N^2) all-pairs boundary matcher, the independent reference for the
// windowed implementation.
BoundaryF brute_force_boundary_f(const MaskGrid& pred, const MaskGrid& gt, double tol) {
  const MaskGrid pb = mask_boundary(pred);
  const MaskGrid gb = mask_boundary(gt);
  std::vector<std::pair<int64_t, int64_t>> ppts, gpts;
  for (int64_t y = 0; y < pred.rows(); ++y)
    for (int64_t x = 0; x < pred.cols(); ++x) {
      if (pb(y, x)) ppts.emplace_back(y, x);
      if (gb(y, x)) gpts.emplace_back(y, x);
    }
  BoundaryF out;
  if (ppts.empty() && gpts.empty()) {
    out.precision = out.recall = out.f = 1.0;
    return out;
  }
  if (ppts.empty() || gpts.empty()) return out;
  auto hits = [&](const auto& from, const auto& against) {
    int64_t n = 0;
    for (const auto& [y, x] : from) {
      bool ok = false;
      for (const auto& [gy, gx] : against) {
        const double d2 = double((y - gy) * (y - gy) + (x - gx) * (x - gx));
        if (d2 <= tol * tol) {
          ok = true;
          break;
        }
      }
      n += ok;
    }
    return n;
  };
  out.precision = double(hits(ppts, gpts)) / double(ppts.size());
  out.recall = double(hits(gpts, ppts)) / double(gpts.size());
  out.f = (out.precision + out.recall) == 0
              ? 0.0
              : 2 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

}  // namespace

TEST_CASE("perfect prediction scores one on every metric") {
  Rng rng(1);
  std::vector<LabelGrid> preds, gts;
  std::vector<MaskGrid> mpred, mgt;
  for (int i = 0; i < 4; ++i) {
    MaskGrid m = random_mask(rng, 12, 9);
    LabelGrid l(12, 9);
    for (int64_t y = 0; y < 12; ++y)
      for (int64_t x = 0; x < 9; ++x) l(y, x) = m(y, x) ? 1 + (i % 2) : 0;
    preds.push_back(l);
    gts.push_back(l);
    mpred.push_back(m);
    mgt.push_back(m);
  }
  CHECK(miou(preds, gts, 2) == 1.0);
  CHECK(fb_iou(mpred, mgt) == 1.0);
  CHECK(fw_iou(preds, gts, 2) == 1.0);
  JFScore s = j_and_f(mpred, mgt);
  CHECK(s.j == 1.0);
  CHECK(s.f == 1.0);
  CHECK(s.jf == 1.0);
}

TEST_CASE("complement prediction scores zero") {
  Rng rng(2);
  MaskGrid gt = random_mask(rng, 10, 10);
  MaskGrid pred = !gt;
  CHECK(binary_iou(pred, gt) == 0.0);
  CHECK(fb_iou({pred}, {gt}) == 0.0);
}

TEST_CASE("hand-computed 2x2 confusion case") {
  // gt = [fg fg; bg bg], pred = [fg bg; bg bg]
  LabelGrid gt(2, 2), pred(2, 2);
  gt << 1, 1, 0, 0;
  pred << 1, 0, 0, 0;
  SegmentationScorer scorer(1);
  scorer.add(pred, gt);
  CHECK(scorer.class_iou(1) == doctest::Approx(0.5));
  CHECK(scorer.class_iou(0) == doctest::Approx(2.0 / 3.0));
  CHECK(scorer.fb_iou() == doctest::Approx(7.0 / 12.0));
}

TEST_CASE("fwIoU with uniform class frequencies equals the class mean") {
  // two classes plus background, each covering exactly one third of pixels
  LabelGrid gt(3, 3), pred(3, 3);
  gt << 0, 0, 0, 1, 1, 1, 2, 2, 2;
  // flip one pixel per class so per-class IoUs are equal
  pred << 0, 0, 1, 1, 1, 2, 2, 2, 0;
  SegmentationScorer scorer(2);
  scorer.add(pred, gt);
  const double mean_iou =
      (scorer.class_iou(0) + scorer.class_iou(1) + scorer.class_iou(2)) / 3.0;
  CHECK(scorer.fw_iou() == doctest::Approx(mean_iou));
}

TEST_CASE("metrics are invariant to episode permutation and stay in [0,1]") {
  Rng rng(3);
  std::vector<LabelGrid> preds, gts;
  for (int i = 0; i < 6; ++i) {
    LabelGrid p(8, 8), g(8, 8);
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) {
        p(y, x) = int32_t(rng.below(3));
        g(y, x) = int32_t(rng.below(3));
      }
    preds.push_back(p);
    gts.push_back(g);
  }
  const double a = miou(preds, gts, 2);
  const double fw = fw_iou(preds, gts, 2);
  std::reverse(preds.begin(), preds.end());
  std::reverse(gts.begin(), gts.end());
  CHECK(miou(preds, gts, 2) == a);
  CHECK(fw_iou(preds, gts, 2) == fw);
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
  CHECK(fw >= 0.0);
  CHECK(fw <= 1.0);
}

TEST_CASE("boundary F equals the brute-force matcher on small masks") {
  Rng rng(4);
  for (int iter = 0; iter < 40; ++iter) {
    const int64_t h = 4 + rng.below(28), w = 4 + rng.below(28);
    MaskGrid pred = random_mask(rng, h, w, 0.3);
    MaskGrid gt = random_mask(rng, h, w, 0.3);
    const double tol = rng.uniform(0.5, 4.0);
    BoundaryF fast = boundary_f_measure(pred, gt, tol);
    BoundaryF slow = brute_force_boundary_f(pred, gt, tol);
    CHECK(fast.precision == doctest::Approx(slow.precision));
    CHECK(fast.recall == doctest::Approx(slow.recall));
    CHECK(fast.f == doctest::Approx(slow.f));
  }
}

TEST_CASE("one-pixel shift keeps F at one while J drops") {
  MaskGrid gt = MaskGrid::Constant(64, 64, false);
  gt.block(20, 20, 16, 16).setConstant(true);
  MaskGrid pred = MaskGrid::Constant(64, 64, false);
  pred.block(20, 21, 16, 16).setConstant(true);  // shifted right by 1
  BoundaryF bf = boundary_f_measure(pred, gt, 1.5);
  CHECK(bf.f == doctest::Approx(1.0));
  CHECK(binary_iou(pred, gt) < 1.0);
  JFScore s = j_and_f({pred}, {gt}, 1.5);
  CHECK(s.f == doctest::Approx(1.0));
  CHECK(s.j < 1.0);
}

TEST_CASE("empty prediction against non-empty ground truth scores zero") {
  MaskGrid gt = MaskGrid::Constant(16, 16, false);
  gt.block(4, 4, 6, 6).setConstant(true);
  MaskGrid pred = MaskGrid::Constant(16, 16, false);
  JFScore s = j_and_f({pred}, {gt});
  CHECK(s.j == 0.0);
  CHECK(s.f == 0.0);
  CHECK(s.jf == 0.0);
}

TEST_CASE("scorer rejects invalid inputs") {
  SegmentationScorer scorer(1);
  LabelGrid a(2, 2), b(3, 3);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(scorer.add(a, b), Error);
  LabelGrid bad(2, 2);
  bad << 0, 0, 0, 5;
  CHECK_THROWS_AS(scorer.add(bad, a), Error);
  CHECK_THROWS_AS(j_and_f({}, {}), Error);
}
