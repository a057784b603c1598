#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icseg/inference.hpp"
#include "icseg/metrics.hpp"
#include "icseg/training.hpp"
#include "test_util.hpp"

using namespace icseg;
using namespace icseg::testutil;

namespace {

// One-episode corpus trained to memorization.
struct Memorized {
  EpisodeDataset data;
  TrainState st;

  explicit Memorized(const char* variant, int64_t iters) {
    data = make_blob_dataset(77, 1, 2, 16);
    PipelineConfig cfg = toy_config(variant, 13);
    cfg.iters = iters;
    cfg.lr = 3e-3;
    cfg.timesteps = 1000;
    cfg.n_steps = 10;
    cfg.flip_prob = 0.0;
    cfg.p_drop = variant[0] == 'n' ? 0.05 : 0.0;
    // the noise variant needs base width above its 2*c_z input channels
    if (variant[0] == 'n') cfg.base_width = 32;
    st = TrainState::init(cfg);
    run_training(st, data);
  }

  Tensor<float> query() const { return data.sample(0).image; }
  MaskGrid query_mask() const { return data.binary_mask(0, 1); }
  std::vector<Prompt> prompts() const {
    return {{data.sample(1).image, data.binary_mask(1, 1)}};
  }
};

}  // namespace

TEST_CASE("cfg_combine algebra") {
  GuidanceConfig g{1.5, 7.0, 20};
  Tensor<float> v = Tensor<float>::full({4}, 0.37f);
  // all branches equal: any guidance returns the shared value
  Tensor<float> out = cfg_combine(v, v, v, g);
  for (int64_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(0.37f));

  // unit weights reproduce the fully conditioned branch bit-exactly
  Rng rng(5);
  Tensor<float> a = rng.normal_tensor<float>({8});
  Tensor<float> b = rng.normal_tensor<float>({8});
  Tensor<float> c = rng.normal_tensor<float>({8});
  GuidanceConfig unit{1.0, 1.0, 20};
  CHECK(cfg_combine(a, b, c, unit).bit_equal(c));

  // scalar case: 0 + 1.5*(1-0) + 7*(2-1) = 8.5 exactly
  Tensor<float> e0 = Tensor<float>::scalar(0.f);
  Tensor<float> e1 = Tensor<float>::scalar(1.f);
  Tensor<float> e2 = Tensor<float>::scalar(2.f);
  CHECK(cfg_combine(e0, e1, e2, g)[0] == 8.5f);

  Tensor<float> wrong = Tensor<float>::zeros({3});
  CHECK_THROWS_AS(cfg_combine(e0, e1, wrong, g), Error);
}

TEST_CASE("one-step inference: shape, determinism, memorization") {
  Memorized m("f", 400);
  InferenceResult r = infer_f(m.query(), m.prompts(), m.st.model, 3);
  CHECK(r.mask.rows() == 16);
  CHECK(r.mask.cols() == 16);
  CHECK(r.pseudo_mask.shape() == Shape({3, 16, 16}));

  InferenceResult r2 = infer_f(m.query(), m.prompts(), m.st.model, 3);
  CHECK((r.mask == r2.mask).all());
  CHECK(r.pseudo_mask.bit_equal(r2.pseudo_mask));

  const double iou = binary_iou(r.mask, m.query_mask());
  INFO("memorization IoU ", iou);
  CHECK(iou > 0.95);

  // variant mismatch is rejected
  PipelineConfig ncfg = toy_config("n", 1);
  TrainState nst = TrainState::init(ncfg);
  CHECK_THROWS_AS(infer_f(m.query(), m.prompts(), nst.model, 0), Error);
  CHECK_THROWS_AS(infer_n(m.query(), m.prompts(), m.st.model, GuidanceConfig{}, 0), Error);
}

TEST_CASE("multi-step inference: determinism, snapshots, memorization") {
  Memorized m("n", 5000);
  GuidanceConfig g{1.5, 7.0, 10};

  std::vector<Tensor<float>> snapshots;
  std::vector<int64_t> steps;
  Tensor<float> z_q = m.st.model.latent.encode(m.query());
  const int64_t cz = m.st.model.cfg.c_z(), hs = m.st.model.cfg.latent_size();
  bool query_channels_intact = true;
  StepObserver obs = [&](int64_t si, int64_t t, const Tensor<float>& z,
                         const Tensor<float>& z_in) {
    snapshots.push_back(z);
    steps.push_back(t);
    // rows 1 and 2 carry the query in channels [cz, 2cz)
    for (int64_t row : {int64_t(1), int64_t(2)}) {
      const float* q = z_in.data() + (row * 2 * cz + cz) * hs * hs;
      query_channels_intact =
          query_channels_intact &&
          std::memcmp(q, z_q.data(), size_t(z_q.size()) * sizeof(float)) == 0;
    }
  };
  InferenceResult r = infer_n(m.query(), m.prompts(), m.st.model, g, 7, obs);
  CHECK(snapshots.size() == 10);
  CHECK(query_channels_intact);
  for (size_t i = 1; i < steps.size(); ++i) CHECK(steps[i] < steps[i - 1]);

  // the final snapshot decodes to exactly the returned mask
  Tensor<float> last_pm = m.st.model.latent.decode(snapshots.back());
  CHECK(last_pm.bit_equal(r.pseudo_mask));
  MaskGrid last_mask = pm::decode(last_pm, m.query(), m.st.model.cfg.codec_params());
  CHECK((last_mask == r.mask).all());

  InferenceResult r2 = infer_n(m.query(), m.prompts(), m.st.model, g, 7);
  CHECK((r.mask == r2.mask).all());

  const double iou = binary_iou(r.mask, m.query_mask());
  INFO("memorization IoU ", iou);
  CHECK(iou > 0.9);

  // single-step plan hits the data directly
  GuidanceConfig g1{1.5, 7.0, 1};
  InferenceResult one = infer_n(m.query(), m.prompts(), m.st.model, g1, 7);
  CHECK(one.mask.rows() == 16);
}

TEST_CASE("video inference: trivial single frame, label range, propagation") {
  Memorized m("f", 400);

  // one frame: the annotation is returned untouched
  std::vector<Tensor<float>> single{m.query()};
  std::vector<MaskGrid> ann{m.query_mask()};
  auto labels1 = infer_video(single, ann, m.st.model, 5);
  REQUIRE(labels1.size() == 1);
  for (int64_t y = 0; y < 16; ++y)
    for (int64_t x = 0; x < 16; ++x)
      CHECK(labels1[0](y, x) == (m.query_mask()(y, x) ? 1 : 0));

  // identical second frame: memorized model reproduces the annotation.
  // prompt = (frame0, mask) and query = frame0's twin matches the
  // memorized (query=s0, prompt=s1) episode only loosely, so check the
  // self-consistent pair instead: frame0 = prompt sample, frame1 = query.
  std::vector<Tensor<float>> frames{m.prompts()[0].first, m.query()};
  std::vector<MaskGrid> first_ann{m.prompts()[0].second};
  auto labels = infer_video(frames, first_ann, m.st.model, 5);
  REQUIRE(labels.size() == 2);
  int32_t max_label = 0;
  for (int64_t y = 0; y < 16; ++y)
    for (int64_t x = 0; x < 16; ++x) max_label = std::max(max_label, labels[1](y, x));
  CHECK(max_label <= 1);
  MaskGrid pred = labels[1] == 1;
  const double iou = binary_iou(pred, m.query_mask());
  INFO("video propagation IoU ", iou);
  CHECK(iou > 0.9);

  CHECK_THROWS_AS(infer_video({}, ann, m.st.model, 0), Error);
  CHECK_THROWS_AS(infer_video(single, {}, m.st.model, 0), Error);
}

TEST_CASE("multi-category video fusion picks the strongest category") {
  // constructed pseudo masks drive the aggregation without a model
  Tensor<float> strong = Tensor<float>::zeros({3, 2, 2});
  Tensor<float> weak = Tensor<float>::zeros({3, 2, 2});
  for (int64_t i = 0; i < 4; ++i) {
    strong[4 + i] = 2.0f;   // channel 1 - channel 0 gap = 2
    weak[4 + i] = -1.0f;    // negative gap: background-ish
  }
  auto probs = pm::category_probabilities(std::vector<Tensor<float>>{weak, strong});
  LabelGrid labels = pm::assign_labels(probs);
  CHECK((labels == 2).all());
}
