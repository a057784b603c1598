#include "icseg/synth.hpp"

#include "icseg/image_io.hpp"
#include "icseg/rng.hpp"

#include <cmath>
#include <filesystem>

namespace icseg {

namespace {

constexpr ShapeClass kAllShapes[5] = {ShapeClass::circle, ShapeClass::square,
                                      ShapeClass::triangle, ShapeClass::ring, ShapeClass::bar};

// distinctive base color per shape class, in [-1, 1]
constexpr float kPalette[5][3] = {
    {0.75f, -0.55f, -0.55f},   // circle: red
    {-0.55f, 0.70f, -0.55f},   // square: green
    {-0.50f, -0.35f, 0.80f},   // triangle: blue
    {0.75f, 0.60f, -0.60f},    // ring: yellow
    {0.65f, -0.55f, 0.70f},    // bar: magenta
};

bool inside_shape(ShapeClass shape, double py, double px, double cy, double cx, double size,
                  double rotation) {
  const double dy = py - cy, dx = px - cx;
  const double cu = std::cos(rotation), su = std::sin(rotation);
  const double u = cu * dx + su * dy;
  const double v = -su * dx + cu * dy;
  switch (shape) {
    case ShapeClass::circle:
      return dx * dx + dy * dy <= size * size;
    case ShapeClass::square:
      return std::max(std::abs(u), std::abs(v)) <= 0.9 * size;
    case ShapeClass::triangle: {
      // equilateral triangle with circumradius `size`
      double vy[3], vx[3];
      for (int k = 0; k < 3; ++k) {
        const double a = rotation - M_PI / 2.0 + 2.0 * M_PI * k / 3.0;
        vy[k] = cy + size * std::sin(a);
        vx[k] = cx + size * std::cos(a);
      }
      double sign = 0;
      for (int k = 0; k < 3; ++k) {
        const int j = (k + 1) % 3;
        const double cross =
            (vx[j] - vx[k]) * (py - vy[k]) - (vy[j] - vy[k]) * (px - vx[k]);
        if (cross == 0) continue;
        if (sign == 0) sign = cross > 0 ? 1 : -1;
        else if ((cross > 0 ? 1 : -1) != sign) return false;
      }
      return true;
    }
    case ShapeClass::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= size * size && d2 >= (0.55 * size) * (0.55 * size);
    }
    case ShapeClass::bar:
      return std::abs(u) <= size && std::abs(v) <= 0.30 * size;
  }
  return false;
}

struct Instance {
  ShapeClass shape;
  double cy, cx, size, rotation;
  float color[3];
  // rigid per-frame motion (video mode)
  double vy = 0, vx = 0, spin = 0;
};

void paint(Tensor<float>& image, const Instance& inst, const std::string& texture, Rng& rng) {
  const int64_t res = image.dim(1);
  for (int64_t y = 0; y < res; ++y)
    for (int64_t x = 0; x < res; ++x) {
      if (!inside_shape(inst.shape, y + 0.5, x + 0.5, inst.cy, inst.cx, inst.size,
                        inst.rotation))
        continue;
      for (int64_t c = 0; c < 3; ++c) {
        float v = inst.color[c];
        if (texture == "gradient")
          v += 0.25f * float((x + 0.5) / double(res) - 0.5);
        image.at(c, y, x) = std::clamp(v, -1.f, 1.f);
      }
    }
  (void)rng;
}

Instance random_instance(ShapeClass shape, int64_t res, Rng& rng, bool moving) {
  Instance inst;
  inst.shape = shape;
  inst.size = rng.uniform(0.13, 0.24) * double(res);
  inst.cy = rng.uniform(inst.size, double(res) - inst.size);
  inst.cx = rng.uniform(inst.size, double(res) - inst.size);
  inst.rotation = rng.uniform(0.0, 2.0 * M_PI);
  const float* base = kPalette[size_t(shape)];
  for (int64_t c = 0; c < 3; ++c)
    inst.color[c] = std::clamp(base[c] + float(rng.uniform(-0.08, 0.08)), -1.f, 1.f);
  if (moving) {
    inst.vy = rng.uniform(-2.5, 2.5);
    inst.vx = rng.uniform(-2.5, 2.5);
    inst.spin = rng.uniform(-0.3, 0.3);
  }
  return inst;
}

void advance(Instance& inst, int64_t res) {
  inst.cy += inst.vy;
  inst.cx += inst.vx;
  inst.rotation += inst.spin;
  if (inst.cy < inst.size || inst.cy > double(res) - inst.size) {
    inst.vy = -inst.vy;
    inst.cy = std::clamp(inst.cy, inst.size, double(res) - inst.size);
  }
  if (inst.cx < inst.size || inst.cx > double(res) - inst.size) {
    inst.vx = -inst.vx;
    inst.cx = std::clamp(inst.cx, inst.size, double(res) - inst.size);
  }
}

}  // namespace

ShapeClass shape_class_from_name(const std::string& name) {
  for (ShapeClass s : kAllShapes)
    if (name == shape_class_name(s)) return s;
  throw Error("unknown shape class: " + name);
}

const char* shape_class_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::circle: return "circle";
    case ShapeClass::square: return "square";
    case ShapeClass::triangle: return "triangle";
    case ShapeClass::ring: return "ring";
    case ShapeClass::bar: return "bar";
  }
  return "?";
}

MaskGrid rasterize_shape(ShapeClass shape, double cy, double cx, double size, double rotation,
                         int64_t resolution) {
  MaskGrid m(resolution, resolution);
  for (int64_t y = 0; y < resolution; ++y)
    for (int64_t x = 0; x < resolution; ++x)
      m(y, x) = inside_shape(shape, y + 0.5, x + 0.5, cy, cx, size, rotation);
  return m;
}

void SyntheticDatasetSpec::validate() const {
  check(resolution >= 8, "resolution too small");
  check(!categories.empty() && categories.size() <= 5, "1 to 5 categories supported");
  for (const std::string& c : categories) shape_class_from_name(c);
  for (size_t i = 0; i < categories.size(); ++i)
    for (size_t j = i + 1; j < categories.size(); ++j)
      check(categories[i] != categories[j], "duplicate category: " + categories[i]);
  check(samples_per_category >= 2, "need at least two samples per category");
  check(distractors_min >= 0 && distractors_min <= distractors_max, "bad distractor range");
  check(texture == "flat" || texture == "noise" || texture == "gradient",
        "texture must be flat, noise or gradient");
  check(!video || frames_per_video >= 2, "videos need at least two frames");
}

Manifest generate_dataset(const SyntheticDatasetSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");
  check(fs::exists(fs::path(out_dir) / "images"), "cannot create output directory " + out_dir);

  Rng rng(spec.seed);
  Manifest manifest;
  int64_t video_counter = 0;

  for (size_t ci = 0; ci < spec.categories.size(); ++ci) {
    const ShapeClass cls = shape_class_from_name(spec.categories[ci]);
    const int32_t cat_id = int32_t(ci) + 1;
    for (int64_t si = 0; si < spec.samples_per_category; ++si) {
      const bool moving = spec.video;
      Instance target = random_instance(cls, spec.resolution, rng, moving);
      const int64_t n_distract =
          spec.distractors_min + rng.below(spec.distractors_max - spec.distractors_min + 1);
      std::vector<Instance> distractors;
      for (int64_t d = 0; d < n_distract; ++d) {
        ShapeClass other = cls;
        while (other == cls)
          other = kAllShapes[size_t(rng.below(5))];
        distractors.push_back(random_instance(other, spec.resolution, rng, moving));
      }
      const float bg = float(rng.uniform(-0.25, 0.15));
      const int64_t frames = spec.video ? spec.frames_per_video : 1;
      const int64_t vid = spec.video ? video_counter++ : -1;

      for (int64_t f = 0; f < frames; ++f) {
        Tensor<float> image({3, spec.resolution, spec.resolution});
        for (int64_t i = 0; i < image.size(); ++i) image[i] = bg;
        if (spec.texture == "gradient")
          for (int64_t y = 0; y < spec.resolution; ++y)
            for (int64_t x = 0; x < spec.resolution; ++x)
              for (int64_t c = 0; c < 3; ++c)
                image.at(c, y, x) +=
                    0.2f * float((y + 0.5) / double(spec.resolution) - 0.5);
        for (const Instance& d : distractors) paint(image, d, spec.texture, rng);
        paint(image, target, spec.texture, rng);
        if (spec.texture == "noise")
          for (int64_t i = 0; i < image.size(); ++i)
            image[i] = std::clamp(image[i] + float(rng.uniform(-0.08, 0.08)), -1.f, 1.f);

        MaskGrid mask = rasterize_shape(target.shape, target.cy, target.cx, target.size,
                                        target.rotation, spec.resolution);
        check(mask.any(), "generated an empty mask");
        LabelGrid labels(spec.resolution, spec.resolution);
        labels.setZero();
        for (int64_t y = 0; y < spec.resolution; ++y)
          for (int64_t x = 0; x < spec.resolution; ++x)
            if (mask(y, x)) labels(y, x) = cat_id;

        std::string id = spec.categories[ci] + "_" + std::to_string(si);
        if (spec.video) id += "_f" + std::to_string(f);
        const std::string img_rel = "images/" + id + ".png";
        const std::string mask_rel = "masks/" + id + ".png";
        write_image_png((fs::path(out_dir) / img_rel).string(), image);
        write_label_png((fs::path(out_dir) / mask_rel).string(), labels);

        ManifestRecord rec;
        rec.id = id;
        rec.image_path = img_rel;
        rec.mask_path = mask_rel;
        rec.categories = {cat_id};
        rec.video_id = vid;
        rec.frame_index = spec.video ? f : -1;
        manifest.records.push_back(std::move(rec));

        if (f + 1 < frames) {
          advance(target, spec.resolution);
          for (Instance& d : distractors) advance(d, spec.resolution);
        }
      }
    }
  }
  manifest.write((fs::path(out_dir) / "manifest.txt").string());
  return manifest;
}

}  // namespace icseg
