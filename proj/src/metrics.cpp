#include "icseg/metrics.hpp"

#include <cmath>

namespace icseg {

SegmentationScorer::SegmentationScorer(int32_t num_categories) : c_(num_categories) {
  check(c_ >= 1, "scorer needs at least one category");
  counts_.assign(size_t(c_ + 1) * size_t(c_ + 1), 0);
}

void SegmentationScorer::add(const LabelGrid& pred, const LabelGrid& gt) {
  check(pred.rows() == gt.rows() && pred.cols() == gt.cols(),
        "prediction / ground-truth size mismatch");
  const int32_t n = c_ + 1;
  for (int64_t y = 0; y < gt.rows(); ++y)
    for (int64_t x = 0; x < gt.cols(); ++x) {
      const int32_t g = gt(y, x), p = pred(y, x);
      check(g >= 0 && g <= c_ && p >= 0 && p <= c_, "label out of range");
      ++counts_[size_t(g) * size_t(n) + size_t(p)];
    }
  ++episodes_;
}

void SegmentationScorer::merge(const SegmentationScorer& other) {
  check(other.c_ == c_, "scorer category mismatch");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  episodes_ += other.episodes_;
}

int64_t SegmentationScorer::inter(int32_t c) const {
  return counts_[size_t(c) * size_t(c_ + 1) + size_t(c)];
}

int64_t SegmentationScorer::uni(int32_t c) const {
  int64_t gt_total = 0, pred_total = 0;
  for (int32_t k = 0; k <= c_; ++k) {
    gt_total += counts_[size_t(c) * size_t(c_ + 1) + size_t(k)];
    pred_total += counts_[size_t(k) * size_t(c_ + 1) + size_t(c)];
  }
  return gt_total + pred_total - inter(c);
}

double SegmentationScorer::class_iou(int32_t c) const {
  check(c >= 0 && c <= c_, "class out of range");
  const int64_t u = uni(c);
  if (u == 0) return -1.0;
  return double(inter(c)) / double(u);
}

double SegmentationScorer::miou() const {
  double sum = 0;
  int32_t n = 0;
  for (int32_t c = 1; c <= c_; ++c) {
    const double iou = class_iou(c);
    if (iou >= 0) {
      sum += iou;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / double(n);
}

double SegmentationScorer::fb_iou() const {
  double fg_sum = 0;
  int32_t fg_n = 0;
  for (int32_t c = 1; c <= c_; ++c) {
    const double iou = class_iou(c);
    if (iou >= 0) {
      fg_sum += iou;
      ++fg_n;
    }
  }
  const double bg = class_iou(0);
  const double fg = fg_n == 0 ? 0.0 : fg_sum / double(fg_n);
  return 0.5 * (fg + (bg >= 0 ? bg : 0.0));
}

double SegmentationScorer::fw_iou() const {
  int64_t total = 0;
  for (int64_t v : counts_) total += v;
  if (total == 0) return 0.0;
  double acc = 0;
  for (int32_t c = 0; c <= c_; ++c) {
    int64_t freq = 0;
    for (int32_t k = 0; k <= c_; ++k) freq += counts_[size_t(c) * size_t(c_ + 1) + size_t(k)];
    if (freq == 0) continue;
    const double iou = class_iou(c);
    acc += double(freq) / double(total) * (iou >= 0 ? iou : 0.0);
  }
  return acc;
}

double binary_iou(const MaskGrid& pred, const MaskGrid& gt) {
  check(pred.rows() == gt.rows() && pred.cols() == gt.cols(), "mask size mismatch");
  const int64_t inter = (pred && gt).count();
  const int64_t uni = (pred || gt).count();
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

namespace {

LabelGrid to_labels(const MaskGrid& m) {
  LabelGrid l(m.rows(), m.cols());
  for (int64_t y = 0; y < m.rows(); ++y)
    for (int64_t x = 0; x < m.cols(); ++x) l(y, x) = m(y, x) ? 1 : 0;
  return l;
}

}  // namespace

double miou(const std::vector<LabelGrid>& preds, const std::vector<LabelGrid>& gts, int32_t c) {
  check(preds.size() == gts.size() && !preds.empty(), "matched non-empty lists required");
  SegmentationScorer scorer(c);
  for (size_t i = 0; i < preds.size(); ++i) scorer.add(preds[i], gts[i]);
  return scorer.miou();
}

double fb_iou(const std::vector<MaskGrid>& preds, const std::vector<MaskGrid>& gts) {
  check(preds.size() == gts.size() && !preds.empty(), "matched non-empty lists required");
  SegmentationScorer scorer(1);
  for (size_t i = 0; i < preds.size(); ++i) scorer.add(to_labels(preds[i]), to_labels(gts[i]));
  return scorer.fb_iou();
}

double fw_iou(const std::vector<LabelGrid>& preds, const std::vector<LabelGrid>& gts, int32_t c) {
  check(preds.size() == gts.size() && !preds.empty(), "matched non-empty lists required");
  SegmentationScorer scorer(c);
  for (size_t i = 0; i < preds.size(); ++i) scorer.add(preds[i], gts[i]);
  return scorer.fw_iou();
}

MaskGrid mask_boundary(const MaskGrid& mask) {
  const int64_t h = mask.rows(), w = mask.cols();
  MaskGrid b(h, w);
  b.setConstant(false);
  auto bg_at = [&](int64_t y, int64_t x) {
    return y < 0 || y >= h || x < 0 || x >= w || !mask(y, x);
  };
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      if (mask(y, x))
        b(y, x) = bg_at(y - 1, x) || bg_at(y + 1, x) || bg_at(y, x - 1) || bg_at(y, x + 1);
  return b;
}

BoundaryF boundary_f_measure(const MaskGrid& pred, const MaskGrid& gt, double tol) {
  check(pred.rows() == gt.rows() && pred.cols() == gt.cols(), "mask size mismatch");
  check(tol >= 0, "negative boundary tolerance");
  const MaskGrid pb = mask_boundary(pred);
  const MaskGrid gb = mask_boundary(gt);
  const int64_t np = pb.count(), ng = gb.count();

  BoundaryF out;
  if (np == 0 && ng == 0) {
    out.precision = out.recall = out.f = 1.0;
    return out;
  }
  if (np == 0 || ng == 0) return out;  // zeros

  const int64_t h = pred.rows(), w = pred.cols();
  const int64_t r = int64_t(std::floor(tol));
  const double tol2 = tol * tol;
  auto matched = [&](const MaskGrid& from, const MaskGrid& against, int64_t y, int64_t x) {
    for (int64_t dy = -r; dy <= r; ++dy)
      for (int64_t dx = -r; dx <= r; ++dx) {
        const int64_t yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        if (against(yy, xx) && double(dy * dy + dx * dx) <= tol2) return true;
      }
    (void)from;
    return false;
  };
  int64_t p_hit = 0, g_hit = 0;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (pb(y, x) && matched(pb, gb, y, x)) ++p_hit;
      if (gb(y, x) && matched(gb, pb, y, x)) ++g_hit;
    }
  out.precision = double(p_hit) / double(np);
  out.recall = double(g_hit) / double(ng);
  out.f = (out.precision + out.recall) == 0
              ? 0.0
              : 2.0 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

JFScore j_and_f(const std::vector<MaskGrid>& preds, const std::vector<MaskGrid>& gts,
                double tol) {
  check(preds.size() == gts.size() && !preds.empty(), "matched non-empty sequences required");
  JFScore s;
  for (size_t i = 0; i < preds.size(); ++i) {
    double frame_tol = tol;
    if (frame_tol < 0) {
      const double diag = std::sqrt(double(preds[i].rows() * preds[i].rows() +
                                           preds[i].cols() * preds[i].cols()));
      frame_tol = 0.008 * diag;
    }
    s.j += binary_iou(preds[i], gts[i]);
    s.f += boundary_f_measure(preds[i], gts[i], frame_tol).f;
  }
  s.j /= double(preds.size());
  s.f /= double(preds.size());
  s.jf = 0.5 * (s.j + s.f);
  return s;
}

}  // namespace icseg
