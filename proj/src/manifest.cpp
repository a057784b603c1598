#include "icseg/manifest.hpp"

#include "icseg/image_io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace icseg {

namespace {

constexpr const char* kHeader = "# icseg-manifest v1";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, '\t')) out.push_back(field);
  return out;
}

}  // namespace

Manifest Manifest::read(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open manifest: " + path);
  std::string line;
  check(bool(std::getline(in, line)) && line == kHeader,
        "bad or missing manifest header in " + path);
  Manifest m;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> f = split_tabs(line);
    check(f.size() == 6, "manifest line " + std::to_string(lineno) + ": expected 6 fields");
    ManifestRecord r;
    r.id = f[0];
    r.image_path = f[1];
    r.mask_path = f[2];
    std::stringstream cats(f[3]);
    std::string c;
    while (std::getline(cats, c, ','))
      if (!c.empty()) r.categories.push_back(int32_t(std::stol(c)));
    check(!r.categories.empty(), "manifest line " + std::to_string(lineno) + ": no categories");
    if (f[4] != "-") r.video_id = std::stoll(f[4]);
    if (f[5] != "-") r.frame_index = std::stoll(f[5]);
    m.records.push_back(std::move(r));
  }
  return m;
}

void Manifest::write(const std::string& path) const {
  std::ofstream out(path);
  check(out.good(), "cannot write manifest: " + path);
  out << kHeader << "\n";
  for (const ManifestRecord& r : records) {
    out << r.id << '\t' << r.image_path << '\t' << r.mask_path << '\t';
    for (size_t i = 0; i < r.categories.size(); ++i) {
      if (i) out << ',';
      out << r.categories[i];
    }
    out << '\t' << (r.video_id < 0 ? std::string("-") : std::to_string(r.video_id));
    out << '\t' << (r.frame_index < 0 ? std::string("-") : std::to_string(r.frame_index));
    out << "\n";
  }
  check(out.good(), "failed writing manifest: " + path);
}

EpisodeDataset load_dataset(const std::string& manifest_path) {
  const Manifest m = Manifest::read(manifest_path);
  const std::filesystem::path root = std::filesystem::path(manifest_path).parent_path();
  EpisodeDataset data;
  for (const ManifestRecord& r : m.records) {
    DataSample s;
    s.id = r.id;
    s.image = read_image_png((root / r.image_path).string());
    s.labels = read_label_png((root / r.mask_path).string());
    s.categories = r.categories;
    s.video_id = r.video_id;
    s.frame_index = r.frame_index;
    check(s.labels.rows() == s.image.dim(1) && s.labels.cols() == s.image.dim(2),
          "mask size mismatch for sample " + r.id);
    bool any_fg = false;
    for (int32_t c : s.categories) any_fg = any_fg || (s.labels == c).any();
    check(any_fg, "sample " + r.id + " has no labelled foreground");
    data.add(std::move(s));
  }
  return data;
}

}  // namespace icseg
