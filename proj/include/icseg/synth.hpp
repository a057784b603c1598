#pragma once

#include "icseg/manifest.hpp"

#include <string>
#include <vector>

namespace icseg {

enum class ShapeClass { circle, square, triangle, ring, bar };

ShapeClass shape_class_from_name(const std::string& name);
const char* shape_class_name(ShapeClass c);

// Exact rasterization: a pixel is inside iff its center satisfies the
// analytic inclusion test.
MaskGrid rasterize_shape(ShapeClass shape, double cy, double cx, double size, double rotation,
                         int64_t resolution);

struct SyntheticDatasetSpec {
  int64_t resolution = 64;
  std::vector<std::string> categories = {"circle", "square", "triangle"};
  int64_t samples_per_category = 20;
  int64_t distractors_min = 0;
  int64_t distractors_max = 2;
  std::string texture = "flat";  // flat | noise | gradient
  bool video = false;
  int64_t frames_per_video = 4;  // video mode: each sample becomes this many frames
  uint64_t seed = 0;

  void validate() const;
};

// Writes images/, masks/ and manifest.txt under out_dir. Deterministic under
// the spec seed; each image holds exactly one labelled instance of its
// category plus distractor shapes of other classes, which count as
// background.
Manifest generate_dataset(const SyntheticDatasetSpec& spec, const std::string& out_dir);

}  // namespace icseg
