#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "capsct/checkpoint.hpp"
#include "capsct/config.hpp"
#include "capsct/error.hpp"
#include "capsct/grad_check.hpp"
#include "capsct/pipeline.hpp"

using namespace capsct;

namespace {

Tensor random_image(std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t({1, side, side});
  for (auto& v : t.mutable_data()) v = u(rng);
  return t;
}

Stage1Config toy_stage1() {
  Stage1Config c;
  c.input_side = 8;
  c.conv_channels = {2, 3, 4, 4};
  c.pool_window = 2;
  c.capsules = {{{16, 4}, {3, 4}, {2, 4}}};
  return c;
}

Stage2Config toy_stage2(std::size_t k = 2) {
  Stage2Config c;
  c.candidate_count = k;
  c.input_side = 8;
  c.conv_channels = {2, 3, 4};
  c.pool_window = 2;
  c.capsules = {{{16, 4}, {3, 4}}};
  return c;
}

// 16x16 images; infected ones carry a bright square at a random place.
SliceSet toy_slices(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pos(2, 9);
  std::normal_distribution<double> noise(0.0, 0.05);
  SliceSet s;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t({1, 16, 16});
    auto d = t.mutable_data();
    for (auto& v : d) v = 0.3 + noise(rng);
    const bool infected = i % 2 == 0;
    if (infected) {
      const int y0 = pos(rng), x0 = pos(rng);
      for (int y = y0; y < y0 + 4; ++y)
        for (int x = x0; x < x0 + 4; ++x) d[static_cast<std::size_t>(y * 16 + x)] = 1.0;
    }
    s.images.push_back(t);
    s.infected.push_back(infected ? 1 : 0);
    s.group.push_back(i / 2);
  }
  return s;
}

Stage1Config small_stage1() {
  Stage1Config c;
  c.input_side = 16;
  c.conv_channels = {4, 4, 8, 8};
  c.pool_window = 4;
  c.capsules = {{{16, 8}, {4, 8}, {2, 8}}};
  return c;
}

// Candidate sets whose class shows in the image: covid a small bright
// square, cap a large dim block, normal flat.
std::vector<CandidateSet> toy_candidates(std::size_t per_class, std::size_t k, std::uint64_t seed,
                                         std::vector<int>& labels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::uniform_real_distribution<double> p_hi(0.7, 1.0), p_lo(0.0, 0.3);
  std::vector<CandidateSet> out;
  for (std::size_t i = 0; i < 3 * per_class; ++i) {
    const int label = static_cast<int>(i % 3);
    CandidateSet c;
    c.patient_id = "t" + std::to_string(i);
    for (std::size_t j = 0; j < k; ++j) {
      Tensor t({1, 8, 8});
      auto d = t.mutable_data();
      for (auto& v : d) v = 0.2 + noise(rng);
      if (label == 0)
        for (int y = 2; y < 4; ++y)
          for (int x = 2; x < 4; ++x) d[static_cast<std::size_t>(y * 8 + x)] = 1.0;
      if (label == 1)
        for (int y = 4; y < 8; ++y)
          for (int x = 0; x < 8; ++x) d[static_cast<std::size_t>(y * 8 + x)] = 0.6;
      c.slices.push_back(t);
      c.slice_index.push_back(j);
      c.p_inf.push_back(label == 2 ? p_lo(rng) : p_hi(rng));
    }
    std::sort(c.p_inf.rbegin(), c.p_inf.rend());
    out.push_back(c);
    labels.push_back(label);
  }
  return out;
}

// Zero-initialized biases put dead-neighbourhood pre-activations exactly on
// the relu kink; finite differences need a differentiable point.
void jitter_biases(ParameterSet& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (const auto& [name, t] : params.entries())
    if (name.ends_with(".bias") || name.ends_with(".beta")) {
      Tensor h = t;
      for (auto& v : h.mutable_data()) v = u(rng);
    }
}

}  // namespace

// ---------------------------------------------------------------- stage 1

TEST(InfectionProbability, ClosedForms) {
  EXPECT_DOUBLE_EQ(infection_probability(0.9, 0.1), 0.9);
  EXPECT_EQ(infection_probability(0.4, 0.4), 0.5);
  EXPECT_EQ(infection_probability(0.0, 0.0), 0.5);
  NoGrad off;
  EXPECT_DOUBLE_EQ(infection_probability(Tensor::vector({0.9, 0.1})).item(), 0.9);
}

TEST(Stage1, ConfigValidation) {
  EXPECT_NO_THROW(Stage1Config{}.validate());
  auto c = Stage1Config{};
  c.capsules[0].count = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  c = Stage1Config{};
  c.shortcuts[0] = {2, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = Stage1Config{};
  c.capsules[2].count = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = Stage1Config{};
  c.pool_window = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Stage1, ShapesDeterminismAndErrors) {
  auto cfg = toy_stage1();
  auto params = init_stage1(cfg, 3);
  std::mt19937_64 rng(4);
  Tensor slice = random_image(8, rng);
  const double p = infer_stage1(params, cfg, slice);
  EXPECT_GE(p, 0.0);
  EXPECT_LE(p, 1.0);
  EXPECT_EQ(infer_stage1(params, cfg, slice), p);
  EXPECT_EQ(infer_stage1(params, cfg, reshape(slice, {8, 8})), p);
  EXPECT_THROW(infer_stage1(params, cfg, random_image(9, rng)), DimensionError);
  EXPECT_THROW(infer_stage1(params, cfg, Tensor({2, 8, 8})), DimensionError);
}

TEST(Stage1, UnitClassWeightsEqualUnweightedLoss) {
  auto cfg = toy_stage1();
  auto params = init_stage1(cfg, 5);
  std::mt19937_64 rng(6);
  std::vector<Tensor> batch{random_image(8, rng), random_image(8, rng), random_image(8, rng)};
  NoGrad off;
  Tensor norms = stage1_forward(params, cfg, batch, Mode::kInfer).norms;
  std::vector<int> y{1, 0, 1};
  MarginLossConfig unit;
  unit.class_weights = {1.0, 1.0};
  EXPECT_EQ(stage1_loss(norms, y, unit).item(), stage1_loss(norms, y, MarginLossConfig{}).item());
}

class FullGraphGradients : public ::testing::TestWithParam<int> {};

TEST_P(FullGraphGradients, Stage1) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto cfg = toy_stage1();
  auto params = init_stage1(cfg, seed);
  jitter_biases(params, seed);
  std::mt19937_64 rng(seed + 100);
  std::vector<Tensor> batch{random_image(8, rng), random_image(8, rng)};
  std::vector<int> y{1, 0};
  RoutingTrace trace;
  {
    NoGrad off;
    stage1_forward(params, cfg, batch, Mode::kTrain, &trace);
  }
  trace.mode = RoutingTrace::Mode::kReplay;
  auto loss_fn = [&] {
    trace.cursor = 0;
    return stage1_loss(stage1_forward(params, cfg, batch, Mode::kTrain, &trace).norms, y, cfg.loss);
  };
  GradCheckOptions opt;
  opt.max_entries_per_tensor = 12;
  opt.seed = seed;
  auto r = grad_check(loss_fn, params.trainable(), opt);
  EXPECT_TRUE(r.passed) << r.max_error << " at " << r.worst;
}

TEST_P(FullGraphGradients, Stage2) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto cfg = toy_stage2(2);
  auto params = init_stage2(cfg, seed);
  jitter_biases(params, seed);
  std::mt19937_64 rng(seed + 200);
  std::vector<CandidateSet> patients(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& p : patients) {
    p.slices = {random_image(8, rng), random_image(8, rng)};
    p.p_inf = {u(rng), u(rng)};
    std::sort(p.p_inf.rbegin(), p.p_inf.rend());
  }
  std::vector<const CandidateSet*> ptrs{&patients[0], &patients[1]};
  std::vector<int> y{0, 2};
  RoutingTrace trace;
  {
    NoGrad off;
    stage2_forward(params, cfg, ptrs, Mode::kTrain, &trace);
  }
  trace.mode = RoutingTrace::Mode::kReplay;
  auto loss_fn = [&] {
    trace.cursor = 0;
    return stage2_loss(stage2_forward(params, cfg, ptrs, Mode::kTrain, &trace).pooled, y, cfg.loss);
  };
  GradCheckOptions opt;
  opt.max_entries_per_tensor = 12;
  opt.seed = seed;
  auto r = grad_check(loss_fn, params.trainable(), opt);
  EXPECT_TRUE(r.passed) << r.max_error << " at " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, FullGraphGradients, ::testing::Range(1, 21));

TEST(Stage1Training, OverfitsEightSlices) {
  auto data = toy_slices(8, 11);
  TrainSpec spec{.learning_rate = 1e-2, .batch_size = 4, .epochs = 60, .seed = 3,
                 .validation_fraction = 0.0};
  auto cfg = small_stage1();
  auto result = train_stage1(data, cfg, spec);
  ASSERT_EQ(result.history.train_loss.size(), 60u);
  EXPECT_TRUE(result.history.validation_loss.empty());
  EXPECT_LT(result.history.train_loss.back(), result.history.train_loss.front());
  auto p = infer_stage1(result.params, cfg, data.images);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i] > 0.5, data.infected[i] == 1) << i << " " << p[i];
}

TEST(Stage1Training, SameSeedSameParameters) {
  auto data = toy_slices(12, 12);
  TrainSpec spec{.learning_rate = 1e-3, .batch_size = 4, .epochs = 3, .seed = 9};
  auto cfg = small_stage1();
  auto a = train_stage1(data, cfg, spec);
  auto b = train_stage1(data, cfg, spec);
  ASSERT_EQ(a.params.entries().size(), b.params.entries().size());
  for (std::size_t i = 0; i < a.params.entries().size(); ++i) {
    auto x = a.params.entries()[i].second.data();
    auto y = b.params.entries()[i].second.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << a.params.entries()[i].first;
  }
  EXPECT_EQ(a.history.validation_loss, b.history.validation_loss);
  EXPECT_EQ(a.history.validation_loss.size(), 3u);
}

TEST(Stage1Training, SingleClassIsDataError) {
  auto data = toy_slices(8, 13);
  for (auto& v : data.infected) v = 1;
  TrainSpec spec{.epochs = 1, .validation_fraction = 0.0};
  EXPECT_THROW(train_stage1(data, small_stage1(), spec), DataError);
}

// ---------------------------------------------------------------- candidates

TEST(Candidates, TopTenOfThirtySortedDescending) {
  std::mt19937_64 rng(21);
  std::vector<double> p(30);
  for (std::size_t i = 0; i < 30; ++i) p[i] = (static_cast<double>(i) + 0.5) / 30.0;
  std::shuffle(p.begin(), p.end(), rng);
  auto c = select_candidates(p, 10);
  std::vector<double> sorted = p;
  std::sort(sorted.rbegin(), sorted.rend());
  ASSERT_EQ(c.p_inf.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(c.p_inf[i], sorted[i]);
    EXPECT_EQ(p[c.slice_index[i]], sorted[i]);
  }
}

TEST(Candidates, PadsWithBestSlice) {
  std::vector<double> p{0.2, 0.9, 0.4, 0.1};
  auto c = select_candidates(p, 10);
  EXPECT_EQ(c.slice_index,
            (std::vector<std::size_t>{1, 2, 0, 3, 1, 1, 1, 1, 1, 1}));
  EXPECT_TRUE(std::is_sorted(c.p_inf.begin(), c.p_inf.begin() + 4, std::greater<>()));
}

TEST(Candidates, TiesByIndexAndErrors) {
  std::vector<double> p(15, 0.5);
  auto c = select_candidates(p, 10);
  std::vector<std::size_t> first(10);
  std::iota(first.begin(), first.end(), 0);
  EXPECT_EQ(c.slice_index, first);
  EXPECT_THROW(select_candidates(std::vector<double>{}, 10), DataError);
}

// ---------------------------------------------------------------- gating

TEST(Gating, SingleCandidateArithmetic) {
  std::vector<std::array<double, 3>> norms{{0.8, 0.3, 0.9}};
  std::vector<double> p{1.0};
  auto r = gate_and_pool(norms, p);
  EXPECT_EQ(r.scores, (std::array<double, 3>{0.8, 0.3, 0.0}));
  EXPECT_EQ(r.decision, 0);
}

TEST(Gating, TwoCandidatesHandComputed) {
  std::vector<std::array<double, 3>> norms{{0.5, 0.7, 0.2}, {0.1, 0.1, 0.9}};
  std::vector<double> p{0.9, 0.2};
  auto r = gate_and_pool(norms, p);
  EXPECT_NEAR(r.scores[0], 0.45, 1e-15);
  EXPECT_NEAR(r.scores[1], 0.63, 1e-15);
  EXPECT_NEAR(r.scores[2], 0.72, 1e-15);
  EXPECT_EQ(r.decision, 2);
  EXPECT_NEAR(r.probabilities[0] + r.probabilities[1] + r.probabilities[2], 1.0, 1e-12);
}

TEST(Gating, ZeroProbabilityMeansNormal) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::array<double, 3>> norms(5);
    for (auto& n : norms) n = {u(rng), u(rng), u(rng)};
    std::vector<double> p(5, 0.0);
    auto r = gate_and_pool(norms, p);
    EXPECT_EQ(r.scores[0], 0.0);
    EXPECT_EQ(r.scores[1], 0.0);
    EXPECT_EQ(r.decision, 2);
  }
  EXPECT_EQ(decide(std::vector<double>{0.0, 0.0, 0.0}), 2);
}

TEST(Gating, PermutationInvariant) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  std::vector<std::array<double, 3>> norms(6);
  std::vector<double> p(6);
  for (std::size_t k = 0; k < 6; ++k) {
    norms[k] = {u(rng), u(rng), u(rng)};
    p[k] = u(rng);
  }
  auto base = gate_and_pool(norms, p);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::array<double, 3>> n2;
    std::vector<double> p2;
    for (std::size_t i : perm) {
      n2.push_back(norms[i]);
      p2.push_back(p[i]);
    }
    auto r = gate_and_pool(n2, p2);
    EXPECT_EQ(r.scores, base.scores);
    EXPECT_EQ(r.decision, base.decision);
  }
}

// ---------------------------------------------------------------- stage 2

TEST(Stage2, CandidateOrderAndDuplicationDoNotMatter) {
  auto cfg3 = toy_stage2(3);
  auto params = init_stage2(cfg3, 31);
  std::mt19937_64 rng(32);
  CandidateSet c;
  c.slices = {random_image(8, rng), random_image(8, rng), random_image(8, rng)};
  c.p_inf = {0.9, 0.6, 0.3};
  auto base = infer_stage2(params, cfg3, c);
  CandidateSet swapped = c;
  std::swap(swapped.slices[0], swapped.slices[2]);
  std::swap(swapped.p_inf[0], swapped.p_inf[2]);
  auto r = infer_stage2(params, cfg3, swapped);
  EXPECT_EQ(r.scores, base.scores);
  EXPECT_NEAR(base.probabilities[0] + base.probabilities[1] + base.probabilities[2], 1.0, 1e-9);

  CandidateSet single;
  single.slices = {c.slices[1]};
  single.p_inf = {c.p_inf[1]};
  CandidateSet repeated;
  repeated.slices = {c.slices[1], c.slices[1], c.slices[1]};
  repeated.p_inf = {c.p_inf[1], c.p_inf[1], c.p_inf[1]};
  EXPECT_EQ(infer_stage2(params, toy_stage2(1), single).scores,
            infer_stage2(params, cfg3, repeated).scores);
}

TEST(Stage2, ZeroImagesWithZeroProbabilityAreNormal) {
  auto cfg = toy_stage2(2);
  auto params = init_stage2(cfg, 33);
  CandidateSet c;
  c.slices = {Tensor({1, 8, 8}), Tensor({1, 8, 8})};
  c.p_inf = {0.0, 0.0};
  auto r = infer_stage2(params, cfg, c);
  EXPECT_EQ(r.scores[0], 0.0);
  EXPECT_EQ(r.scores[1], 0.0);
  EXPECT_EQ(r.decision, 2);
}

TEST(Stage2, CandidateCountMismatchIsConfigError) {
  auto cfg = toy_stage2(2);
  auto params = init_stage2(cfg, 34);
  CandidateSet c;
  c.slices = {Tensor({1, 8, 8})};
  c.p_inf = {0.5};
  EXPECT_THROW(infer_stage2(params, cfg, c), ConfigError);
}

TEST(Stage2Training, LossDescendsAndIsDeterministic) {
  std::vector<int> labels;
  auto data = toy_candidates(6, 2, 41, labels);
  TrainSpec spec{.learning_rate = 5e-3, .batch_size = 6, .epochs = 15, .seed = 5};
  auto cfg = toy_stage2(2);
  auto a = train_stage2(data, labels, cfg, spec);
  ASSERT_EQ(a.history.validation_loss.size(), 15u);
  EXPECT_LT(a.history.train_loss[a.history.best_epoch], a.history.train_loss.front());
  auto b = train_stage2(data, labels, cfg, spec);
  EXPECT_EQ(encode_checkpoint(a.params, {}), encode_checkpoint(b.params, {}));
}

TEST(Stage2Training, MissingClassIsDataError) {
  std::vector<int> labels;
  auto data = toy_candidates(3, 2, 42, labels);
  for (auto& l : labels)
    if (l == 1) l = 0;
  EXPECT_THROW(train_stage2(data, labels, toy_stage2(2), TrainSpec{.epochs = 1}), DataError);
}

// ---------------------------------------------------------------- fusion

namespace {

// Class probabilities that already name the class; the clinical block is
// constant so it carries no signal.
void informative_fusion_set(std::size_t n, std::uint64_t seed,
                            std::vector<std::vector<double>>& x, std::vector<int>& y) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 3);
    std::array<double, 3> probs{};
    const double top = 0.5 + 0.5 * u(rng);
    for (int c = 0; c < 3; ++c) probs[static_cast<std::size_t>(c)] = c == label ? top : (1.0 - top) / 2.0;
    const std::array<double, 8> clinical{};
    x.push_back(fusion_input(probs, clinical));
    y.push_back(label);
  }
}

}  // namespace

TEST(Fusion, InformativeProbabilitiesCarryOver) {
  std::vector<std::vector<double>> x, xt;
  std::vector<int> y, yt;
  informative_fusion_set(150, 51, x, y);
  informative_fusion_set(60, 52, xt, yt);
  auto fit = train_fusion(x, y, TrainSpec{.learning_rate = 3e-3, .batch_size = 16, .epochs = 30, .seed = 1});
  std::size_t fusion_correct = 0, stage2_correct = 0;
  for (std::size_t i = 0; i < xt.size(); ++i) {
    auto pred = infer_fusion(fit.params, xt[i]);
    EXPECT_NEAR(pred.probabilities[0] + pred.probabilities[1] + pred.probabilities[2], 1.0, 1e-9);
    for (double p : pred.probabilities) {
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
    fusion_correct += pred.decision == yt[i];
    stage2_correct += decide(std::span<const double>(xt[i].data(), 3)) == yt[i];
  }
  EXPECT_GE(fusion_correct, stage2_correct);
}

TEST(Fusion, DeterministicAndRejectsBadLength) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  informative_fusion_set(30, 53, x, y);
  TrainSpec spec{.learning_rate = 1e-3, .epochs = 3, .seed = 2};
  auto a = train_fusion(x, y, spec);
  auto b = train_fusion(x, y, spec);
  EXPECT_EQ(encode_checkpoint(a.params, {}), encode_checkpoint(b.params, {}));
  auto p1 = infer_fusion(a.params, x[0]);
  auto p2 = infer_fusion(a.params, x[0]);
  EXPECT_EQ(p1.probabilities, p2.probabilities);
  EXPECT_THROW(infer_fusion(a.params, std::vector<double>(10, 0.0)), DataError);
  x[3].push_back(0.0);
  EXPECT_THROW(train_fusion(x, y, spec), DataError);
}

TEST(Fusion, ClinicalScaling) {
  std::vector<ClinicalFeatures> train(2);
  train[0].age = 40;
  train[0].weight = 60;
  train[1].age = 60;
  train[1].weight = 100;
  train[1].sex = Sex::kFemale;
  train[1].fever = true;
  auto s = ClinicalScaler::fit(train);
  EXPECT_EQ(s.age_mean, 50.0);
  EXPECT_EQ(s.age_sd, 10.0);
  auto e = s.encode(train[1]);
  EXPECT_EQ(e, (std::array<double, 8>{1, 1, 1, 0, 1, 0, 0, 0}));
}

// ---------------------------------------------------------------- checkpoint & config

TEST(Checkpoint, RoundTripMatchesFloatRounding) {
  auto params = init_stage1(toy_stage1(), 61);
  nlohmann::json cfg = to_json(toy_stage1());
  auto cp = decode_checkpoint(encode_checkpoint(params, cfg));
  EXPECT_EQ(cp.config, cfg);
  round_to_float(params);
  ASSERT_EQ(cp.params.entries().size(), params.entries().size());
  for (std::size_t i = 0; i < params.entries().size(); ++i) {
    const auto& [name, t] = params.entries()[i];
    EXPECT_EQ(cp.params.entries()[i].first, name);
    EXPECT_EQ(cp.params.get(name).shape(), t.shape());
    auto a = cp.params.get(name).data();
    auto b = t.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
  }
  EXPECT_EQ(cp.params.trainable().size(), params.trainable().size());
}

TEST(Checkpoint, HeaderLayout) {
  ParameterSet ps;
  ps.add("w", Tensor::vector({1.5, -2.0}));
  const std::string bytes = encode_checkpoint(ps, nlohmann::json::object());
  const std::string expected = std::string("CVCP") + std::string("\x01\x00", 2) +
                               std::string("\x01\x00\x00\x00", 4) + std::string("\x01\x00\x00\x00", 4) +
                               "w" + std::string("\x01\x00\x00\x00", 4) +
                               std::string("\x02\x00\x00\x00", 4) +
                               std::string("\x00\x00\xc0\x3f", 4) +   // 1.5f
                               std::string("\x00\x00\x00\xc0", 4) +   // -2.0f
                               std::string("\x02\x00\x00\x00", 4) + "{}";
  EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, RejectsCorruptInput) {
  ParameterSet ps;
  ps.add("w", Tensor::vector({1.0}));
  std::string bytes = encode_checkpoint(ps, {});
  EXPECT_THROW(decode_checkpoint("XXXX" + bytes.substr(4)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  std::string v2 = bytes;
  v2[4] = 2;
  EXPECT_THROW(decode_checkpoint(v2), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.cvcp"), IoError);
}

TEST(Config, RoundTripAndStrictKeys) {
  RunConfig c;
  c.seed = 77;
  c.stage2.candidate_count = 4;
  c.train_fusion.epochs = 12;
  auto j = to_json(c);
  auto back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);

  EXPECT_THROW(run_config_from_json({{"sede", 1}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"stage1", {{"conv_channels", {8, 8, 16}}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"train", {{"stage3", nlohmann::json::object()}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"stage2", {{"loss", {{"mplus", 0.9}}}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"seed", "seven"}}), ConfigError);
  auto partial = run_config_from_json({{"train", {{"stage1", {{"epochs", 5}}}}}});
  EXPECT_EQ(partial.train_stage1.epochs, 5u);
  EXPECT_EQ(partial.train_stage1.batch_size, 16u);
}
