#pragma once

#include "icseg/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace icseg {

// H x W boolean foreground grid.
using MaskGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// H x W label grid; 0 is background, 1..C are categories.
using LabelGrid = Eigen::Array<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Parameters of the 3-channel pseudo-mask encoding. Background pixels map to
// the codeword (b, a, (a+b)/2), foreground to (a, b, (a+b)/2); the augmented
// variant additionally adds image/alpha. Defaults keep augmented values
// inside [-1, 1] for images in [-1, 1].
struct CodecParams {
  double a = -0.6;
  double b = 0.6;
  double alpha = 4.0;
  bool augmented = true;

  void validate() const {
    check(std::isfinite(a) && std::isfinite(b) && std::isfinite(alpha),
          "codec params must be finite");
    check(a < b, "codec requires a < b");
    check(alpha > 1.0, "codec requires alpha > 1");
  }
};

namespace pm {

// Binary mask -> 3-channel pseudo mask, two-codeword form.
template <typename S>
Tensor<S> encode_vanilla(const MaskGrid& mask, const CodecParams& p) {
  p.validate();
  const int64_t h = mask.rows(), w = mask.cols();
  Tensor<S> out({3, h, w});
  const S a = S(p.a), b = S(p.b), mid = S(0.5 * (p.a + p.b));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const bool fg = mask(y, x);
      out.at(0, y, x) = fg ? a : b;
      out.at(1, y, x) = fg ? b : a;
      out.at(2, y, x) = mid;
    }
  return out;
}

// Channel comparison; ties decode to background (strict >).
template <typename S>
MaskGrid decode_vanilla(const Tensor<S>& pred) {
  check(pred.rank() == 3 && pred.dim(0) == 3, "pseudo mask must be [3,H,W]");
  const int64_t h = pred.dim(1), w = pred.dim(2);
  MaskGrid mask(h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) mask(y, x) = pred.at(1, y, x) > pred.at(0, y, x);
  return mask;
}

// Vanilla codewords plus image/alpha, fusing image content into the target.
template <typename S>
Tensor<S> encode_augmented(const MaskGrid& mask, const Tensor<S>& image, const CodecParams& p) {
  p.validate();
  check(image.rank() == 3 && image.dim(0) == 3, "image must be [3,H,W]");
  check(image.dim(1) == mask.rows() && image.dim(2) == mask.cols(),
        "image / mask size mismatch");
  Tensor<S> out = encode_vanilla<S>(mask, p);
  const S inv_alpha = S(1.0 / p.alpha);
  for (int64_t i = 0; i < out.size(); ++i) out[i] += image[i] * inv_alpha;
  return out;
}

// Subtract image/alpha, then compare channels. At inference the image is the
// query image (the same image added at encode time for training targets).
template <typename S>
MaskGrid decode_augmented(const Tensor<S>& pred, const Tensor<S>& image, const CodecParams& p) {
  p.validate();
  check(pred.rank() == 3 && pred.dim(0) == 3, "pseudo mask must be [3,H,W]");
  check(pred.same_shape(image), "prediction / image shape mismatch");
  const int64_t h = pred.dim(1), w = pred.dim(2);
  const S inv_alpha = S(1.0 / p.alpha);
  MaskGrid mask(h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const S c0 = pred.at(0, y, x) - image.at(0, y, x) * inv_alpha;
      const S c1 = pred.at(1, y, x) - image.at(1, y, x) * inv_alpha;
      mask(y, x) = c1 > c0;
    }
  return mask;
}

// Codec-dispatching helpers.
template <typename S>
Tensor<S> encode(const MaskGrid& mask, const Tensor<S>& image, const CodecParams& p) {
  return p.augmented ? encode_augmented(mask, image, p) : encode_vanilla<S>(mask, p);
}

template <typename S>
MaskGrid decode(const Tensor<S>& pred, const Tensor<S>& image, const CodecParams& p) {
  return p.augmented ? decode_augmented(pred, image, p) : decode_vanilla(pred);
}

// Image/alpha already removed where applicable ("PM minus" channels 0 and 1).
template <typename S>
Tensor<S> subtract_image(const Tensor<S>& pred, const Tensor<S>& image, const CodecParams& p) {
  if (!p.augmented) return pred;
  Tensor<S> out = pred;
  const S inv_alpha = S(1.0 / p.alpha);
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= image[i] * inv_alpha;
  return out;
}

// Per-category foreground odds exp(PM[1]-PM[0]) normalized against an
// implicit background odds of 1, computed in log space via softmax over
// [0, gap_1, ..., gap_C]. Output shape [(C+1), H, W]; channel 0 = background.
template <typename S>
Tensor<S> category_probabilities(const std::vector<Tensor<S>>& per_category_pms) {
  check(!per_category_pms.empty(),
        "category_probabilities: pass (list, H, W) when the category list is empty");
  const int64_t c = static_cast<int64_t>(per_category_pms.size());
  int64_t h = 0, w = 0;
  for (const auto& t : per_category_pms) {
    check(t.rank() == 3 && t.dim(0) == 3, "pseudo mask must be [3,H,W]");
    if (h == 0) {
      h = t.dim(1);
      w = t.dim(2);
    }
    check(t.dim(1) == h && t.dim(2) == w, "pseudo masks must share H x W");
  }
  Tensor<S> out({c + 1, h, w});
  std::vector<S> logits(static_cast<size_t>(c) + 1);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      logits[0] = S(0);
      S mx = S(0);
      for (int64_t i = 0; i < c; ++i) {
        const Tensor<S>& t = per_category_pms[static_cast<size_t>(i)];
        logits[static_cast<size_t>(i) + 1] = t.at(1, y, x) - t.at(0, y, x);
        mx = std::max(mx, logits[static_cast<size_t>(i) + 1]);
      }
      S denom = 0;
      for (int64_t i = 0; i <= c; ++i) denom += std::exp(logits[static_cast<size_t>(i)] - mx);
      for (int64_t i = 0; i <= c; ++i)
        out.at(i, y, x) = std::exp(logits[static_cast<size_t>(i)] - mx) / denom;
    }
  return out;
}

// C = 0: a [1,H,W] map of ones.
template <typename S>
Tensor<S> category_probabilities(const std::vector<Tensor<S>>& per_category_pms, int64_t h,
                                 int64_t w) {
  if (per_category_pms.empty()) return Tensor<S>::full({1, h, w}, S(1));
  return category_probabilities(per_category_pms);
}

// Per-pixel argmax; ties break to the lowest channel index.
template <typename S>
LabelGrid assign_labels(const Tensor<S>& probs) {
  check(probs.rank() == 3 && probs.dim(0) >= 1, "probability map must be [(C+1),H,W]");
  const int64_t c1 = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  LabelGrid labels(h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      int32_t best = 0;
      S best_p = probs.at(0, y, x);
      for (int64_t i = 1; i < c1; ++i)
        if (probs.at(i, y, x) > best_p) {
          best_p = probs.at(i, y, x);
          best = static_cast<int32_t>(i);
        }
      labels(y, x) = best;
    }
  return labels;
}

}  // namespace pm
}  // namespace icseg
