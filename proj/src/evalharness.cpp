#include "icseg/evalharness.hpp"

#include <atomic>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace icseg {

namespace {

bool deterministic_mode() {
  const char* v = std::getenv("ICSEG_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

int worker_count(int64_t jobs) {
  if (deterministic_mode()) return 1;
  const unsigned hw = std::thread::hardware_concurrency();
  return int(std::min<int64_t>(jobs, std::max(1u, hw)));
}

LabelGrid mask_to_labels(const MaskGrid& m, int32_t category) {
  LabelGrid l(m.rows(), m.cols());
  for (int64_t y = 0; y < m.rows(); ++y)
    for (int64_t x = 0; x < m.cols(); ++x) l(y, x) = m(y, x) ? category : 0;
  return l;
}

struct EpisodeOutcome {
  int32_t category = 0;
  MaskGrid pred, gt;
};

EvalReport aggregate(const std::vector<EpisodeOutcome>& outcomes, int32_t categories) {
  EvalReport rep;
  rep.episode_count = int64_t(outcomes.size());
  SegmentationScorer scorer(categories);
  SegmentationScorer binary(1);
  std::vector<MaskGrid> preds, gts;
  for (const EpisodeOutcome& o : outcomes) {
    scorer.add(mask_to_labels(o.pred, o.category), mask_to_labels(o.gt, o.category));
    binary.add(mask_to_labels(o.pred, 1), mask_to_labels(o.gt, 1));
    preds.push_back(o.pred);
    gts.push_back(o.gt);
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
  return rep;
}

}  // namespace

int32_t max_category(const EpisodeDataset& data) {
  int32_t c = 0;
  for (size_t i = 0; i < data.size(); ++i)
    for (int32_t cat : data.sample(i).categories) c = std::max(c, cat);
  return c;
}

EvalReport evaluate(ModelStateF& model, const EpisodeDataset& data, int64_t episodes,
                    uint64_t seed, int64_t k_prompts) {
  check(episodes >= 1, "need at least one evaluation episode");
  const int32_t categories = max_category(data);
  check(categories >= 1, "dataset has no categories");

  // sample the episode list up front so the protocol is identical no matter
  // how many workers run inference
  Rng rng(seed ^ 0x6576616cULL);
  std::vector<Episode> eps;
  for (int64_t i = 0; i < episodes; ++i) eps.push_back(sample_episode(data, rng, k_prompts));
  data.pair_pool(1);  // pools are cached; touch before threading

  std::vector<EpisodeOutcome> outcomes(static_cast<size_t>(episodes));
  std::atomic<int64_t> next{0};
  auto work = [&]() {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= episodes) return;
      const Episode& ep = eps[size_t(i)];
      InferenceResult r = infer(ep.query_image, ep.prompts, model, seed + uint64_t(i));
      outcomes[size_t(i)] = EpisodeOutcome{ep.category_id, r.mask, ep.query_mask};
    }
  };
  const int workers = worker_count(episodes);
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }
  return aggregate(outcomes, categories);
}

EvalReport all_foreground_baseline(const EpisodeDataset& data, int64_t episodes, uint64_t seed,
                                   int32_t categories) {
  Rng rng(seed ^ 0x6576616cULL);
  std::vector<EpisodeOutcome> outcomes;
  for (int64_t i = 0; i < episodes; ++i) {
    Episode ep = sample_episode(data, rng);
    MaskGrid all_fg = MaskGrid::Constant(ep.query_mask.rows(), ep.query_mask.cols(), true);
    outcomes.push_back(EpisodeOutcome{ep.category_id, all_fg, ep.query_mask});
  }
  return aggregate(outcomes, categories);
}

EvalReport evaluate_videos(ModelStateF& model, const EpisodeDataset& data, uint64_t seed) {
  // collect frames per video in frame order
  std::map<int64_t, std::vector<size_t>> videos;
  for (size_t i = 0; i < data.size(); ++i)
    if (data.sample(i).is_video()) videos[data.sample(i).video_id].push_back(i);
  check(!videos.empty(), "dataset has no videos");
  for (auto& [vid, frames] : videos)
    std::sort(frames.begin(), frames.end(), [&](size_t a, size_t b) {
      return data.sample(a).frame_index < data.sample(b).frame_index;
    });

  const int32_t categories = max_category(data);
  SegmentationScorer scorer(categories);
  std::vector<MaskGrid> preds, gts;
  int64_t episode_count = 0;
  EvalReport rep;

  for (const auto& [vid, frame_idx] : videos) {
    if (frame_idx.size() < 2) continue;
    std::vector<Tensor<float>> frames;
    for (size_t i : frame_idx) frames.push_back(data.sample(i).image);
    const DataSample& first = data.sample(frame_idx[0]);
    std::vector<MaskGrid> ann;
    std::vector<int32_t> cats = first.categories;
    for (int32_t c : cats) ann.push_back(data.binary_mask(frame_idx[0], c));

    std::vector<LabelGrid> labels = infer_video(frames, ann, model, seed + uint64_t(vid));
    for (size_t f = 1; f < frame_idx.size(); ++f) {
      const DataSample& gt_frame = data.sample(frame_idx[f]);
      // map local annotation channels back to dataset category ids
      LabelGrid pred_global(gt_frame.labels.rows(), gt_frame.labels.cols());
      pred_global.setZero();
      for (int64_t y = 0; y < pred_global.rows(); ++y)
        for (int64_t x = 0; x < pred_global.cols(); ++x) {
          const int32_t local = labels[f](y, x);
          if (local > 0) pred_global(y, x) = cats[size_t(local - 1)];
        }
      scorer.add(pred_global, gt_frame.labels);
      for (int32_t c : cats) {
        preds.push_back(pred_global == c);
        gts.push_back(gt_frame.labels == c);
      }
      ++episode_count;
    }
  }
  check(episode_count > 0, "no evaluable video frames");
  for (int32_t c = 1; c <= categories; ++c) {
    const double iou = scorer.class_iou(c);
    if (iou >= 0) rep.per_category_iou[c] = iou;
  }
  rep.miou = scorer.miou();
  rep.fb_iou = fb_iou(preds, gts);
  rep.fw_iou = scorer.fw_iou();
  const JFScore s = j_and_f(preds, gts);
  rep.j = s.j;
  rep.f = s.f;
  rep.jf = s.jf;
  rep.episode_count = episode_count;
  return rep;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out.precision(4);
  out << std::fixed;
  out << "episodes    " << episode_count << "\n";
  for (const auto& [c, iou] : per_category_iou)
    out << "iou[" << c << "]      " << iou << "\n";
  out << "miou        " << miou << "\n";
  out << "fb_iou      " << fb_iou << "\n";
  out << "fw_iou      " << fw_iou << "\n";
  out << "j_region    " << j << "\n";
  out << "f_boundary  " << f << "\n";
  out << "j_and_f     " << jf << "\n";
  return out.str();
}

}  // namespace icseg
