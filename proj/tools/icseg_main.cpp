#include <CLI11.hpp>

#include "icseg/checkpoint.hpp"
#include "icseg/evalharness.hpp"
#include "icseg/experiments.hpp"
#include "icseg/gradcheck_suite.hpp"
#include "icseg/image_io.hpp"
#include "icseg/inference.hpp"
#include "icseg/manifest.hpp"
#include "icseg/synth.hpp"
#include "icseg/training.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace icseg;

namespace {

PipelineConfig config_from_flags(const std::string& config_path,
                                 const std::vector<std::string>& sets) {
  KeyValueConfig kv;
  if (!config_path.empty()) kv = KeyValueConfig::parse_file(config_path);
  for (const std::string& s : sets) {
    const size_t eq = s.find('=');
    check(eq != std::string::npos, "--set expects key=value, got: " + s);
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  PipelineConfig cfg = PipelineConfig::from_kv(kv);
  kv.throw_if_unused();
  return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_gen_data(const SyntheticDatasetSpec& spec, const std::string& out) {
  Manifest m = generate_dataset(spec, out);
  std::printf("wrote %zu samples under %s\n", m.records.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& out_dir,
              const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& resume, int64_t log_every) {
  EpisodeDataset data = load_dataset(data_path);
  TrainState st = resume.empty() ? TrainState::init(config_from_flags(config_path, sets))
                                 : load_checkpoint(resume);
  fs::create_directories(out_dir);
  std::ofstream((fs::path(out_dir) / "config.txt").string())
      << st.model.cfg.to_kv().canonical_text();

  double window = 0;
  int64_t window_n = 0;
  run_training(st, data, [&](int64_t step, float loss) {
    window += loss;
    ++window_n;
    if (log_every > 0 && (step + 1) % log_every == 0) {
      std::printf("step %6ld  loss %.5f\n", long(step + 1), window / double(window_n));
      std::fflush(stdout);
      window = 0;
      window_n = 0;
    }
  });

  const std::string ck = (fs::path(out_dir) / "checkpoint.bin").string();
  save_checkpoint(st, ck);
  std::ofstream loss_log((fs::path(out_dir) / "loss_log.txt").string());
  for (size_t i = 0; i < st.loss_log.size(); ++i)
    loss_log << i << "\t" << st.loss_log[i] << "\n";
  std::printf("checkpoint written to %s\n", ck.c_str());
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& query_path,
              const std::vector<std::string>& prompt_images,
              const std::vector<std::string>& prompt_masks, const std::string& out_path,
              const std::string& dump_steps, uint64_t seed, double gamma_q, double gamma_tau,
              int64_t steps) {
  check(!prompt_images.empty(), "at least one --prompt-image required");
  check(prompt_images.size() == prompt_masks.size(),
        "--prompt-image and --prompt-mask must be paired");
  ModelStateF model = load_model(checkpoint);
  if (gamma_q > 0) model.cfg.gamma_q = gamma_q;
  if (gamma_tau > 0) model.cfg.gamma_tau = gamma_tau;
  if (steps > 0) model.cfg.n_steps = steps;

  Tensor<float> query = read_image_png(query_path);
  std::vector<Prompt> prompts;
  for (size_t i = 0; i < prompt_images.size(); ++i)
    prompts.emplace_back(read_image_png(prompt_images[i]), read_mask_png(prompt_masks[i]));

  StepObserver observer = nullptr;
  if (!dump_steps.empty()) {
    fs::create_directories(dump_steps);
    observer = [&](int64_t si, int64_t t, const Tensor<float>& z, const Tensor<float>&) {
      char name[64];
      std::snprintf(name, sizeof(name), "step_%03ld_t%04ld.png", long(si), long(t));
      write_image_png((fs::path(dump_steps) / name).string(), model.latent.decode(z));
    };
  }
  InferenceResult r = infer(query, prompts, model, seed, observer);
  write_mask_png(out_path, r.mask);
  if (!dump_steps.empty())
    write_image_png((fs::path(dump_steps) / "pseudo_mask.png").string(), r.pseudo_mask);
  std::printf("mask written to %s\n", out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, int64_t episodes,
             uint64_t seed, int64_t k, const std::string& out_path, const std::string& pred_dir,
             bool video_protocol) {
  EvalReport rep;
  if (!pred_dir.empty()) {
    // score externally produced masks named <sample id>.png against the data
    const Manifest m = Manifest::read(data_path);
    const fs::path root = fs::path(data_path).parent_path();
    int32_t categories = 0;
    for (const ManifestRecord& r : m.records)
      for (int32_t c : r.categories) categories = std::max(categories, c);
    SegmentationScorer scorer(categories);
    SegmentationScorer binary(1);
    std::vector<MaskGrid> preds, gts;
    for (const ManifestRecord& r : m.records) {
      const LabelGrid gt = read_label_png((root / r.mask_path).string());
      LabelGrid pred = read_label_png((fs::path(pred_dir) / (r.id + ".png")).string());
      check(pred.rows() == gt.rows() && pred.cols() == gt.cols(),
            "prediction size mismatch for " + r.id);
      // grayscale binary predictions carry label 1; remap to the record's
      // category for single-category records
      if (r.categories.size() == 1) {
        for (int64_t y = 0; y < pred.rows(); ++y)
          for (int64_t x = 0; x < pred.cols(); ++x)
            if (pred(y, x) == 1) pred(y, x) = r.categories[0];
      }
      scorer.add(pred, gt);
      for (int32_t c : r.categories) {
        preds.push_back(pred == c);
        gts.push_back(gt == c);
        LabelGrid pb(pred.rows(), pred.cols()), gb(gt.rows(), gt.cols());
        for (int64_t y = 0; y < pred.rows(); ++y)
          for (int64_t x = 0; x < pred.cols(); ++x) {
            pb(y, x) = pred(y, x) == c ? 1 : 0;
            gb(y, x) = gt(y, x) == c ? 1 : 0;
          }
        binary.add(pb, gb);
      }
      ++rep.episode_count;
    }
    for (int32_t c = 1; c <= categories; ++c) {
      const double iou = scorer.class_iou(c);
      if (iou >= 0) rep.per_category_iou[c] = iou;
    }
    rep.miou = scorer.miou();
    rep.fb_iou = binary.fb_iou();
    rep.fw_iou = scorer.fw_iou();
    const JFScore s = j_and_f(preds, gts);
    rep.j = s.j;
    rep.f = s.f;
    rep.jf = s.jf;
  } else {
    ModelStateF model = load_model(checkpoint);
    EpisodeDataset data = load_dataset(data_path);
    rep = video_protocol ? evaluate_videos(model, data, seed)
                         : evaluate(model, data, episodes, seed, k);
  }
  const std::string text = rep.to_text();
  std::fputs(text.c_str(), stdout);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << text;
  }
  return 0;
}

int cmd_grad_check(int64_t seeds, double step) {
  const auto results = run_grad_check_suite(seeds, step);
  double worst = 0;
  for (const GradCheckResult& r : results) {
    std::printf("%-36s max rel err %.3e\n", r.name.c_str(), r.max_rel_error);
    worst = std::max(worst, r.max_rel_error);
  }
  std::printf("worst: %.3e (tolerance 1e-4)\n", worst);
  return worst < 1e-4 ? 0 : 1;
}

int cmd_ablate(const std::string& axis, const std::string& values_csv,
               const std::string& train_manifest, const std::string& eval_manifest,
               const std::string& config_path, const std::vector<std::string>& sets,
               int64_t seeds, int64_t eval_episodes, uint64_t eval_seed,
               const std::string& out_dir) {
  AblationGrid grid;
  grid.axis = axis;
  grid.values = split_csv(values_csv);
  grid.base = config_from_flags(config_path, sets);
  grid.seeds_per_cell = seeds;
  grid.train_manifest = train_manifest;
  grid.eval_manifest = eval_manifest;
  grid.eval_episodes = eval_episodes;
  grid.eval_seed = eval_seed;
  grid.out_dir = out_dir;
  GridResult result = run_grid(grid);
  std::fputs(result.table_text().c_str(), stdout);
  const auto checks = directional_checks(result);
  const std::string ct = checks_text(checks);
  std::fputs(ct.c_str(), stdout);
  if (!out_dir.empty()) {
    std::ofstream((fs::path(out_dir) / "checks.txt").string()) << ct;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"in-context segmentation via latent denoising"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic episodic corpus");
  SyntheticDatasetSpec spec;
  std::string gen_out, gen_cats = "circle,square,triangle";
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", spec.seed, "corpus seed");
  gen->add_option("--resolution", spec.resolution, "image side length");
  gen->add_option("--categories", gen_cats, "comma list from circle,square,triangle,ring,bar");
  gen->add_option("--samples", spec.samples_per_category, "samples per category");
  gen->add_option("--distractors-min", spec.distractors_min, "min distractors per image");
  gen->add_option("--distractors-max", spec.distractors_max, "max distractors per image");
  gen->add_option("--texture", spec.texture, "flat | noise | gradient");
  gen->add_flag("--video", spec.video, "emit per-sample frame sequences");
  gen->add_option("--frames", spec.frames_per_video, "frames per video");

  // train
  auto* train = app.add_subcommand("train", "train a model on a manifest");
  std::string train_data, train_out, train_config, train_resume;
  std::vector<std::string> train_sets;
  int64_t log_every = 100;
  train->add_option("--data", train_data, "manifest path")->required();
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--config", train_config, "key = value config file");
  train->add_option("--set", train_sets, "config override key=value (repeatable)");
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--log-every", log_every, "steps between loss lines (0 silences)");

  // infer
  auto* inf = app.add_subcommand("infer", "segment one query with visual prompts");
  std::string inf_ck, inf_query, inf_out, inf_dump;
  std::vector<std::string> inf_pimgs, inf_pmasks;
  uint64_t inf_seed = 0;
  double inf_gq = 0, inf_gt = 0;
  int64_t inf_steps = 0;
  inf->add_option("--checkpoint", inf_ck, "trained checkpoint")->required();
  inf->add_option("--query", inf_query, "query image PNG")->required();
  inf->add_option("--prompt-image", inf_pimgs, "prompt image PNG (repeatable)")->required();
  inf->add_option("--prompt-mask", inf_pmasks, "prompt mask PNG (repeatable)")->required();
  inf->add_option("--out", inf_out, "output mask PNG")->required();
  inf->add_option("--dump-steps", inf_dump, "directory for per-step decoded snapshots");
  inf->add_option("--seed", inf_seed, "inference seed");
  inf->add_option("--gamma-q", inf_gq, "query guidance override");
  inf->add_option("--gamma-tau", inf_gt, "instruction guidance override");
  inf->add_option("--steps", inf_steps, "denoising steps override");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string ev_ck, ev_data, ev_out, ev_pred;
  int64_t ev_episodes = 100, ev_k = 1;
  uint64_t ev_seed = 1234;
  bool ev_video = false;
  ev->add_option("--checkpoint", ev_ck, "trained checkpoint");
  ev->add_option("--data", ev_data, "manifest path")->required();
  ev->add_option("--episodes", ev_episodes, "episode count");
  ev->add_option("--seed", ev_seed, "episode sampling seed");
  ev->add_option("--k", ev_k, "prompts per episode");
  ev->add_option("--out", ev_out, "also write the report here");
  ev->add_option("--pred-dir", ev_pred, "score external masks named <id>.png instead");
  ev->add_flag("--video", ev_video, "first-frame propagation protocol");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
  int64_t gc_seeds = 20;
  double gc_step = 1e-5;
  gc->add_option("--seeds", gc_seeds, "random shapes per kernel");
  gc->add_option("--step", gc_step, "finite-difference step");

  // ablate
  auto* ab = app.add_subcommand("ablate", "budget-matched ablation grid");
  std::string ab_axis, ab_values, ab_train, ab_eval, ab_config, ab_out;
  std::vector<std::string> ab_sets;
  int64_t ab_seeds = 2, ab_eval_episodes = 40;
  uint64_t ab_eval_seed = 9999;
  ab->add_option("--axis", ab_axis, "variant | codec | optim_space | lora_rank | k_instructions")
      ->required();
  ab->add_option("--values", ab_values, "comma-separated cell values")->required();
  ab->add_option("--train-data", ab_train, "training manifest")->required();
  ab->add_option("--eval-data", ab_eval, "evaluation manifest")->required();
  ab->add_option("--config", ab_config, "base config file");
  ab->add_option("--set", ab_sets, "base config override key=value (repeatable)");
  ab->add_option("--seeds", ab_seeds, "seeds per cell");
  ab->add_option("--eval-episodes", ab_eval_episodes, "episodes per evaluation");
  ab->add_option("--eval-seed", ab_eval_seed, "evaluation episode seed");
  ab->add_option("--out", ab_out, "output directory for cells and tables");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      spec.categories = split_csv(gen_cats);
      return cmd_gen_data(spec, gen_out);
    }
    if (train->parsed())
      return cmd_train(train_data, train_out, train_config, train_sets, train_resume,
                       log_every);
    if (inf->parsed())
      return cmd_infer(inf_ck, inf_query, inf_pimgs, inf_pmasks, inf_out, inf_dump, inf_seed,
                       inf_gq, inf_gt, inf_steps);
    if (ev->parsed()) {
      check(!ev_pred.empty() || !ev_ck.empty(), "--checkpoint or --pred-dir required");
      return cmd_eval(ev_ck, ev_data, ev_episodes, ev_seed, ev_k, ev_out, ev_pred, ev_video);
    }
    if (gc->parsed()) return cmd_grad_check(gc_seeds, gc_step);
    if (ab->parsed())
      return cmd_ablate(ab_axis, ab_values, ab_train, ab_eval, ab_config, ab_sets, ab_seeds,
                        ab_eval_episodes, ab_eval_seed, ab_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
