#pragma once

#include "icseg/training.hpp"

#include <string>
#include <vector>

namespace icseg {

// One dataset record; paths are relative to the manifest's directory.
struct ManifestRecord {
  std::string id;
  std::string image_path;
  std::string mask_path;
  std::vector<int32_t> categories;
  int64_t video_id = -1;
  int64_t frame_index = -1;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  static Manifest read(const std::string& path);
  void write(const std::string& path) const;
};

// Reads the manifest and decodes every referenced image and mask.
EpisodeDataset load_dataset(const std::string& manifest_path);

}  // namespace icseg
