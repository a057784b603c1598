#include "icseg/experiments.hpp"

#include "icseg/checkpoint.hpp"
#include "icseg/manifest.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace icseg {

namespace {

// cells must not change the training or evaluation budget
const std::set<std::string>& budget_keys() {
  static const std::set<std::string> keys = {"iters", "batch", "resolution"};
  return keys;
}

PipelineConfig cell_config(const AblationGrid& grid, const std::string& value, uint64_t seed) {
  KeyValueConfig kv = grid.base.to_kv();
  if (grid.axis == "variant") {
    kv.set("variant", value);
  } else if (grid.axis == "codec") {
    check(value == "vanilla" || value == "augmented", "codec axis value must be vanilla|augmented");
    kv.set_bool("codec_augmented", value == "augmented");
  } else if (grid.axis == "optim_space") {
    kv.set("optimization_space", value);
  } else if (grid.axis == "lora_rank") {
    kv.set("lora_rank", value);
  } else if (grid.axis == "k_instructions") {
    // inference-time axis; the training config is the base config
  } else {
    throw Error("unknown ablation axis: " + grid.axis);
  }
  auto ov = grid.cell_overrides.find(value);
  if (ov != grid.cell_overrides.end())
    for (const auto& [k, v] : ov->second) kv.set(k, v);
  kv.set_int("seed", int64_t(seed));
  PipelineConfig cfg = PipelineConfig::from_kv(kv);
  kv.throw_if_unused();
  return cfg;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double m = mean_of(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / double(v.size() - 1));
}

double pooled_std(const CellResult& a, const CellResult& b) {
  return std::sqrt(0.5 * (a.stddev * a.stddev + b.stddev * b.stddev));
}

}  // namespace

void AblationGrid::validate() const {
  check(!values.empty(), "ablation grid has no values");
  check(seeds_per_cell >= 2, "at least two seeds per cell required");
  check(!train_manifest.empty() && !eval_manifest.empty(), "grid requires both manifests");
  for (const auto& [cell, overrides] : cell_overrides) {
    for (const auto& [k, v] : overrides)
      check(!budget_keys().count(k),
            "cell override `" + k + "` would break budget matching (cell " + cell + ")");
  }
  base.validate();
}

const CellResult* GridResult::find(const std::string& cell) const {
  for (const CellResult& c : cells)
    if (c.cell == cell) return &c;
  return nullptr;
}

std::string GridResult::table_text() const {
  std::string out = "axis\tcell\tseeds\tmean_miou\tstd\n";
  char buf[160];
  for (const CellResult& c : cells) {
    std::snprintf(buf, sizeof(buf), "%s\t%s\t%zu\t%.4f\t%.4f\n", axis.c_str(), c.cell.c_str(),
                  c.mious.size(), c.mean, c.stddev);
    out += buf;
  }
  return out;
}

GridResult run_grid(const AblationGrid& grid) {
  grid.validate();
  namespace fs = std::filesystem;
  const EpisodeDataset train_data = load_dataset(grid.train_manifest);
  const EpisodeDataset eval_data = load_dataset(grid.eval_manifest);

  GridResult result;
  result.axis = grid.axis;

  // the instruction-count axis reuses one checkpoint per seed and varies
  // only inference
  const bool k_axis = grid.axis == "k_instructions";
  std::vector<TrainState> shared_states;
  if (k_axis) {
    for (int64_t s = 0; s < grid.seeds_per_cell; ++s) {
      PipelineConfig cfg = cell_config(grid, grid.values[0], grid.base.seed + uint64_t(s));
      TrainState st = TrainState::init(cfg);
      run_training(st, train_data);
      shared_states.push_back(std::move(st));
    }
  }

  for (const std::string& value : grid.values) {
    CellResult cell;
    cell.cell = value;
    for (int64_t s = 0; s < grid.seeds_per_cell; ++s) {
      try {
        double miou = 0;
        if (k_axis) {
          const int64_t k = std::stoll(value);
          check(k >= 1, "instruction count must be >= 1");
          EvalReport rep =
              evaluate(shared_states[size_t(s)].model, eval_data, grid.eval_episodes,
                       grid.eval_seed, k);
          miou = rep.miou;
        } else {
          PipelineConfig cfg = cell_config(grid, value, grid.base.seed + uint64_t(s));
          TrainState st = TrainState::init(cfg);
          run_training(st, train_data);
          EvalReport rep =
              evaluate(st.model, eval_data, grid.eval_episodes, grid.eval_seed, 1);
          miou = rep.miou;
          if (!grid.out_dir.empty()) {
            const fs::path cell_dir =
                fs::path(grid.out_dir) / (grid.axis + "_" + value + "_seed" + std::to_string(s));
            fs::create_directories(cell_dir);
            std::ofstream((cell_dir / "config.txt").string())
                << cfg.to_kv().canonical_text();
            save_checkpoint(st, (cell_dir / "checkpoint.bin").string());
            std::ofstream((cell_dir / "report.txt").string()) << rep.to_text();
          }
        }
        cell.mious.push_back(miou);
      } catch (const std::exception& e) {
        throw Error("ablation cell `" + value + "` seed " + std::to_string(s) +
                    " failed: " + e.what());
      }
    }
    cell.mean = mean_of(cell.mious);
    cell.stddev = stddev_of(cell.mious);
    result.cells.push_back(std::move(cell));
  }
  if (!grid.out_dir.empty()) {
    fs::create_directories(grid.out_dir);
    std::ofstream((fs::path(grid.out_dir) / "table.txt").string()) << result.table_text();
  }
  return result;
}

std::vector<DirectionalCheck> directional_checks(const GridResult& grid) {
  std::vector<DirectionalCheck> out;
  auto relation = [&](const std::string& name, const CellResult* hi, const CellResult* lo) {
    if (!hi || !lo) return;
    DirectionalCheck c;
    c.name = name;
    c.delta = hi->mean - lo->mean;
    c.band = pooled_std(*hi, *lo);
    if (c.delta > c.band) c.status = "pass";
    else if (c.delta < -c.band) c.status = "fail";
    else c.status = "inconclusive";
    out.push_back(c);
  };

  if (grid.axis == "variant") {
    relation("miou(f) >= miou(n)", grid.find("f"), grid.find("n"));
  } else if (grid.axis == "codec") {
    relation("augmented >= vanilla", grid.find("augmented"), grid.find("vanilla"));
  } else if (grid.axis == "optim_space") {
    relation("pixel >= latent", grid.find("pixel"), grid.find("latent"));
  } else if (grid.axis == "k_instructions") {
    // non-decreasing in k within a 2-sigma noise band
    for (size_t i = 1; i < grid.cells.size(); ++i) {
      const CellResult& prev = grid.cells[i - 1];
      const CellResult& cur = grid.cells[i];
      DirectionalCheck c;
      c.name = "miou(k=" + cur.cell + ") >= miou(k=" + prev.cell + ") - band";
      c.band = 2.0 * pooled_std(cur, prev);
      c.delta = cur.mean - prev.mean;
      c.status = c.delta >= -c.band ? "pass" : "fail";
      out.push_back(c);
    }
  }
  return out;
}

std::string checks_text(const std::vector<DirectionalCheck>& checks) {
  std::string out;
  char buf[200];
  for (const DirectionalCheck& c : checks) {
    std::snprintf(buf, sizeof(buf), "[%s] %s (delta %.4f, band %.4f)\n", c.status.c_str(),
                  c.name.c_str(), c.delta, c.band);
    out += buf;
  }
  return out;
}

}  // namespace icseg
