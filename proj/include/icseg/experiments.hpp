#pragma once

#include "icseg/evalharness.hpp"
#include "icseg/pipeline.hpp"

#include <map>
#include <string>
#include <vector>

namespace icseg {

// One ablation axis swept over a shared base configuration and corpus. Every
// cell trains with the same budget (iterations, batch, data, evaluation
// protocol); the runner refuses anything else.
struct AblationGrid {
  std::string axis;  // variant | codec | optim_space | lora_rank | k_instructions
  std::vector<std::string> values;
  PipelineConfig base;
  int64_t seeds_per_cell = 2;
  std::string train_manifest;
  std::string eval_manifest;
  int64_t eval_episodes = 40;
  uint64_t eval_seed = 9999;
  std::string out_dir;  // one subdirectory per cell; empty = no artifacts
  // optional per-cell config overrides (key -> value); budget keys rejected
  std::map<std::string, std::map<std::string, std::string>> cell_overrides;

  void validate() const;
};

struct CellResult {
  std::string cell;
  std::vector<double> mious;  // one per seed
  double mean = 0;
  double stddev = 0;
};

struct GridResult {
  std::string axis;
  std::vector<CellResult> cells;

  std::string table_text() const;
  const CellResult* find(const std::string& cell) const;
};

GridResult run_grid(const AblationGrid& grid);

// Ordinal relations between cells, compared against a pooled-seed-noise
// band. Failures are reported, never thrown.
struct DirectionalCheck {
  std::string name;
  std::string status;  // pass | fail | inconclusive
  double delta = 0;    // mean difference in the expected direction
  double band = 0;     // pooled standard deviation used as the noise band
};

std::vector<DirectionalCheck> directional_checks(const GridResult& grid);

std::string checks_text(const std::vector<DirectionalCheck>& checks);

}  // namespace icseg
