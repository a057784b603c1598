#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icseg/config.hpp"
#include "icseg/image_io.hpp"
#include "icseg/manifest.hpp"
#include "icseg/synth.hpp"

#include <filesystem>
#include <fstream>

using namespace icseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("image png roundtrip is lossless at 8-bit precision") {
  Rng rng(1);
  const fs::path dir = temp_dir("icseg_io_test");
  Tensor<float> img({3, 12, 17});
  for (int64_t i = 0; i < img.size(); ++i)
    img[i] = float(std::round(rng.uniform(-1, 1) * 127.5 + 127.5) / 255.0 * 2.0 - 1.0);
  const std::string p = (dir / "img.png").string();
  write_image_png(p, img);
  Tensor<float> back = read_image_png(p);
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(back[i] - img[i]) < 1.0f / 255.0f);
  fs::remove_all(dir);
}

TEST_CASE("mask and label png roundtrips are exact") {
  Rng rng(2);
  const fs::path dir = temp_dir("icseg_mask_test");
  MaskGrid m(9, 14);
  for (int64_t y = 0; y < 9; ++y)
    for (int64_t x = 0; x < 14; ++x) m(y, x) = rng.bernoulli(0.4);
  write_mask_png((dir / "m.png").string(), m);
  CHECK((read_mask_png((dir / "m.png").string()) == m).all());

  LabelGrid l(7, 7);
  for (int64_t y = 0; y < 7; ++y)
    for (int64_t x = 0; x < 7; ++x) l(y, x) = int32_t(rng.below(5));
  write_label_png((dir / "l.png").string(), l);
  CHECK((read_label_png((dir / "l.png").string()) == l).all());

  // grayscale binary masks read back as labels 0/1
  CHECK((read_label_png((dir / "m.png").string()) == m.cast<int32_t>()).all());
  fs::remove_all(dir);
}

TEST_CASE("generated corpus is byte-identical under a fixed seed") {
  SyntheticDatasetSpec spec;
  spec.resolution = 32;
  spec.categories = {"circle", "square"};
  spec.samples_per_category = 3;
  spec.seed = 7;
  const fs::path a = temp_dir("icseg_gen_a");
  const fs::path b = temp_dir("icseg_gen_b");
  Manifest ma = generate_dataset(spec, a.string());
  Manifest mb = generate_dataset(spec, b.string());
  REQUIRE(ma.records.size() == mb.records.size());
  CHECK(file_bytes(a / "manifest.txt") == file_bytes(b / "manifest.txt"));
  for (const ManifestRecord& r : ma.records) {
    CHECK(file_bytes(a / r.image_path) == file_bytes(b / r.image_path));
    CHECK(file_bytes(a / r.mask_path) == file_bytes(b / r.mask_path));
  }
  // different seed, different corpus
  spec.seed = 8;
  const fs::path c = temp_dir("icseg_gen_c");
  generate_dataset(spec, c.string());
  CHECK(file_bytes(a / ma.records[0].image_path) != file_bytes(c / ma.records[0].image_path));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST_CASE("circle rasterization area tracks the analytic value") {
  for (double r : {9.0, 13.0, 17.0}) {
    MaskGrid m = rasterize_shape(ShapeClass::circle, 32.0, 32.0, r, 0.0, 64);
    const double area = double(m.count());
    const double expected = M_PI * r * r;
    CHECK(std::abs(area - expected) / expected < 0.04);
  }
}

TEST_CASE("every generated record has foreground and loads back") {
  SyntheticDatasetSpec spec;
  spec.resolution = 32;
  spec.categories = {"triangle", "ring", "bar"};
  spec.samples_per_category = 2;
  spec.texture = "noise";
  spec.seed = 11;
  const fs::path dir = temp_dir("icseg_gen_load");
  Manifest m = generate_dataset(spec, dir.string());
  CHECK(m.records.size() == 6);
  EpisodeDataset data = load_dataset((dir / "manifest.txt").string());
  CHECK(data.size() == 6);
  for (size_t i = 0; i < data.size(); ++i) {
    const DataSample& s = data.sample(i);
    CHECK((s.labels == s.categories[0]).any());
    CHECK(s.image.dim(1) == 32);
  }
  // episodes sample fine from the loaded corpus
  Rng rng(3);
  Episode ep = sample_episode(data, rng);
  CHECK(ep.prompts.size() == 1);
  fs::remove_all(dir);
}

TEST_CASE("video corpus pairs frames within a video") {
  SyntheticDatasetSpec spec;
  spec.resolution = 32;
  spec.categories = {"circle"};
  spec.samples_per_category = 2;
  spec.video = true;
  spec.frames_per_video = 3;
  spec.seed = 21;
  const fs::path dir = temp_dir("icseg_gen_video");
  Manifest m = generate_dataset(spec, dir.string());
  CHECK(m.records.size() == 6);
  int64_t with_video = 0;
  for (const ManifestRecord& r : m.records) with_video += r.video_id >= 0 ? 1 : 0;
  CHECK(with_video == 6);
  EpisodeDataset data = load_dataset((dir / "manifest.txt").string());
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    Episode ep = sample_episode(data, rng);
    CHECK(data.sample(ep.query_index).video_id == data.sample(ep.prompt_indices[0]).video_id);
  }
  fs::remove_all(dir);
}

TEST_CASE("manifest text roundtrip preserves every field") {
  Manifest m;
  m.records.push_back({"a0", "images/a0.png", "masks/a0.png", {1, 3}, -1, -1});
  m.records.push_back({"v0_f1", "images/v0_f1.png", "masks/v0_f1.png", {2}, 0, 1});
  const fs::path dir = temp_dir("icseg_manifest");
  m.write((dir / "manifest.txt").string());
  Manifest back = Manifest::read((dir / "manifest.txt").string());
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0].id == "a0");
  CHECK(back.records[0].categories == std::vector<int32_t>({1, 3}));
  CHECK(back.records[0].video_id == -1);
  CHECK(back.records[1].video_id == 0);
  CHECK(back.records[1].frame_index == 1);
  fs::remove_all(dir);
}

TEST_CASE("key-value config parsing, overrides and unknown keys") {
  KeyValueConfig kv = KeyValueConfig::parse_text(
      "# comment\n"
      "variant = n\n"
      "lr = 0.0005   # inline comment\n"
      "channel_mults = 1,2,4\n"
      "codec_augmented = false\n");
  CHECK(kv.get_string("variant", "f") == "n");
  CHECK(kv.get_double("lr", 0) == doctest::Approx(5e-4));
  CHECK(kv.get_int_list("channel_mults", {}) == std::vector<int64_t>({1, 2, 4}));
  CHECK(kv.get_bool("codec_augmented", true) == false);
  CHECK_NOTHROW(kv.throw_if_unused());

  KeyValueConfig bad = KeyValueConfig::parse_text("variant = n\nnot_a_real_key = 1\n");
  bad.get_string("variant", "f");
  CHECK_THROWS_AS(bad.throw_if_unused(), Error);

  CHECK_THROWS_AS(KeyValueConfig::parse_text("no equals sign here\n"), Error);
  CHECK_THROWS_AS(KeyValueConfig::parse_text("a = 1\na = 2\n"), Error);
  KeyValueConfig types = KeyValueConfig::parse_text("x = abc\n");
  CHECK_THROWS_AS(types.get_int("x", 0), Error);

  // round trip through canonical text
  KeyValueConfig kv2 = KeyValueConfig::parse_text(kv.canonical_text());
  CHECK(kv2.canonical_text() == kv.canonical_text());
}

TEST_CASE("pipeline config round trips through key-value form") {
  PipelineConfig cfg;
  cfg.variant = "n";
  cfg.codec_augmented = false;
  cfg.lora_rank = 4;
  cfg.resolution = 32;
  cfg.lr = 1e-3;
  KeyValueConfig kv = cfg.to_kv();
  PipelineConfig back = PipelineConfig::from_kv(kv);
  CHECK(back.variant == "n");
  CHECK(back.codec_augmented == false);
  CHECK(back.lora_rank == 4);
  CHECK(back.resolution == 32);
  CHECK(back.lr == doctest::Approx(1e-3));
  CHECK(back.to_kv().canonical_text() == kv.canonical_text());

  KeyValueConfig bad = cfg.to_kv();
  bad.set("variant", "x");
  CHECK_THROWS_AS(PipelineConfig::from_kv(bad), Error);
}
