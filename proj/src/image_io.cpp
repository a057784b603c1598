#include "icseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace icseg {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct PngRead {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngRead() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWrite {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWrite() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

void write_rows(const std::string& path, int width, int height, int color_type,
                const std::vector<png_color>* palette,
                const std::vector<const uint8_t*>& rows) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  check(fp != nullptr, "cannot open for writing: " + path);
  PngWrite ctx;
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  check(ctx.png != nullptr, "png_create_write_struct failed");
  ctx.info = png_create_info_struct(ctx.png);
  check(ctx.info != nullptr, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw Error("libpng error while writing " + path);
  png_init_io(ctx.png, fp.get());
  png_set_IHDR(ctx.png, ctx.info, png_uint_32(width), png_uint_32(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette)
    png_set_PLTE(ctx.png, ctx.info, palette->data(), int(palette->size()));
  png_write_info(ctx.png, ctx.info);
  for (const uint8_t* row : rows)
    png_write_row(ctx.png, const_cast<png_bytep>(row));
  png_write_end(ctx.png, ctx.info);
}

// Decoded 8-bit rows in the file's native color layout.
struct DecodedPng {
  int width = 0, height = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<uint8_t> data;  // height * width * channels
};

DecodedPng read_rows(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  check(fp != nullptr, "cannot open: " + path);
  uint8_t header[8];
  check(std::fread(header, 1, 8, fp.get()) == 8 && !png_sig_cmp(header, 0, 8),
        "not a PNG file: " + path);
  PngRead ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  check(ctx.png != nullptr, "png_create_read_struct failed");
  ctx.info = png_create_info_struct(ctx.png);
  check(ctx.info != nullptr, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw Error("libpng error while reading " + path);
  png_init_io(ctx.png, fp.get());
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);

  DecodedPng out;
  out.width = int(png_get_image_width(ctx.png, ctx.info));
  out.height = int(png_get_image_height(ctx.png, ctx.info));
  out.color_type = png_get_color_type(ctx.png, ctx.info);
  const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);
  if (bit_depth == 16) png_set_strip_16(ctx.png);
  if (out.color_type == PNG_COLOR_TYPE_PALETTE && bit_depth < 8)
    png_set_packing(ctx.png);
  if (out.color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(ctx.png);
  png_read_update_info(ctx.png, ctx.info);
  out.channels = int(png_get_channels(ctx.png, ctx.info));

  out.data.resize(size_t(out.height) * size_t(out.width) * size_t(out.channels));
  std::vector<png_bytep> rows(size_t(out.height));
  for (int y = 0; y < out.height; ++y)
    rows[size_t(y)] = out.data.data() + size_t(y) * size_t(out.width) * size_t(out.channels);
  png_read_image(ctx.png, rows.data());
  png_read_end(ctx.png, nullptr);
  return out;
}

// Fixed 256-entry palette: 0 black, then maximally distinct hues.
std::vector<png_color> label_palette() {
  std::vector<png_color> pal(256);
  pal[0] = {0, 0, 0};
  for (int i = 1; i < 256; ++i) {
    const double h = double((i * 47) % 360);
    const double s = 0.85, v = 0.95;
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    pal[size_t(i)] = {png_byte((r + m) * 255), png_byte((g + m) * 255),
                      png_byte((b + m) * 255)};
  }
  return pal;
}

}  // namespace

void write_image_png(const std::string& path, const Tensor<float>& image) {
  check(image.rank() == 3 && image.dim(0) == 3, "image must be [3,H,W]");
  const int h = int(image.dim(1)), w = int(image.dim(2));
  std::vector<uint8_t> rgb(size_t(h) * size_t(w) * 3);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), -1.f, 1.f);
        rgb[size_t((y * w + x) * 3 + c)] = uint8_t(std::lround((v + 1.f) * 0.5f * 255.f));
      }
  std::vector<const uint8_t*> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[size_t(y)] = rgb.data() + size_t(y) * size_t(w) * 3;
  write_rows(path, w, h, PNG_COLOR_TYPE_RGB, nullptr, rows);
}

Tensor<float> read_image_png(const std::string& path) {
  DecodedPng png = read_rows(path);
  check(png.color_type == PNG_COLOR_TYPE_RGB && png.channels == 3,
        "expected an 8-bit RGB PNG: " + path);
  Tensor<float> img({3, png.height, png.width});
  for (int64_t y = 0; y < png.height; ++y)
    for (int64_t x = 0; x < png.width; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img.at(c, y, x) =
            float(png.data[size_t((y * png.width + x) * 3 + c)]) / 255.f * 2.f - 1.f;
  return img;
}

void write_mask_png(const std::string& path, const MaskGrid& mask) {
  const int h = int(mask.rows()), w = int(mask.cols());
  std::vector<uint8_t> gray(size_t(h) * size_t(w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) gray[size_t(y * w + x)] = mask(y, x) ? 255 : 0;
  std::vector<const uint8_t*> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[size_t(y)] = gray.data() + size_t(y) * size_t(w);
  write_rows(path, w, h, PNG_COLOR_TYPE_GRAY, nullptr, rows);
}

MaskGrid read_mask_png(const std::string& path) {
  DecodedPng png = read_rows(path);
  check(png.channels == 1, "expected a single-channel mask PNG: " + path);
  MaskGrid mask(png.height, png.width);
  for (int64_t y = 0; y < png.height; ++y)
    for (int64_t x = 0; x < png.width; ++x)
      mask(y, x) = png.data[size_t(y * png.width + x)] != 0;
  return mask;
}

void write_label_png(const std::string& path, const LabelGrid& labels) {
  const int h = int(labels.rows()), w = int(labels.cols());
  std::vector<uint8_t> idx(size_t(h) * size_t(w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const int32_t v = labels(y, x);
      check(v >= 0 && v <= 255, "label out of the 8-bit palette range");
      idx[size_t(y * w + x)] = uint8_t(v);
    }
  std::vector<const uint8_t*> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[size_t(y)] = idx.data() + size_t(y) * size_t(w);
  const std::vector<png_color> pal = label_palette();
  write_rows(path, w, h, PNG_COLOR_TYPE_PALETTE, &pal, rows);
}

LabelGrid read_label_png(const std::string& path) {
  DecodedPng png = read_rows(path);
  check(png.channels == 1, "expected an indexed or grayscale mask PNG: " + path);
  LabelGrid labels(png.height, png.width);
  const bool gray = png.color_type == PNG_COLOR_TYPE_GRAY;
  for (int64_t y = 0; y < png.height; ++y)
    for (int64_t x = 0; x < png.width; ++x) {
      const uint8_t v = png.data[size_t(y * png.width + x)];
      labels(y, x) = gray ? (v != 0 ? 1 : 0) : int32_t(v);
    }
  return labels;
}

}  // namespace icseg
