#pragma once

#include "icseg/pmcodec.hpp"

#include <vector>

namespace icseg {

// Confusion-matrix accumulator over label grids; class 0 is background.
// Aggregation is integer and associative, so episode order (or parallel
// reduction) never changes a score.
class SegmentationScorer {
 public:
  explicit SegmentationScorer(int32_t num_categories);

  void add(const LabelGrid& pred, const LabelGrid& gt);
  void merge(const SegmentationScorer& other);

  // IoU of one class from the global confusion; -1 when the class never
  // occurs in either prediction or ground truth.
  double class_iou(int32_t c) const;
  // Mean IoU over categories 1..C (background excluded), skipping absent
  // classes.
  double miou() const;
  // Mean of foreground IoU and background IoU (binary tasks).
  double fb_iou() const;
  // Per-class IoU weighted by ground-truth pixel frequency, background
  // included.
  double fw_iou() const;

  int32_t categories() const { return c_; }
  int64_t episodes() const { return episodes_; }

 private:
  int64_t inter(int32_t c) const;
  int64_t uni(int32_t c) const;

  int32_t c_;
  std::vector<int64_t> counts_;  // (C+1)^2, row = gt, col = pred
  int64_t episodes_ = 0;
};

double binary_iou(const MaskGrid& pred, const MaskGrid& gt);

double miou(const std::vector<LabelGrid>& preds, const std::vector<LabelGrid>& gts, int32_t c);
double fb_iou(const std::vector<MaskGrid>& preds, const std::vector<MaskGrid>& gts);
double fw_iou(const std::vector<LabelGrid>& preds, const std::vector<LabelGrid>& gts, int32_t c);

// Foreground pixels with a 4-neighbour in the background (outside the image
// counts as background).
MaskGrid mask_boundary(const MaskGrid& mask);

struct BoundaryF {
  double precision = 0;
  double recall = 0;
  double f = 0;
};

// Boundary F-measure with tolerance-dilated matching: a boundary pixel
// matches when some counterpart lies within Euclidean distance tol.
BoundaryF boundary_f_measure(const MaskGrid& pred, const MaskGrid& gt, double tol);

struct JFScore {
  double j = 0;
  double f = 0;
  double jf = 0;
};

// Region similarity (mean per-frame IoU), boundary accuracy (mean per-frame
// boundary F), and their average. tol < 0 selects the 0.8%-of-diagonal
// convention.
JFScore j_and_f(const std::vector<MaskGrid>& preds, const std::vector<MaskGrid>& gts,
                double tol = -1.0);

}  // namespace icseg
