#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "capsct/error.hpp"
#include "capsct/gradcam.hpp"

using namespace capsct;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
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

Stage2Config toy_stage2() {
  Stage2Config c;
  c.candidate_count = 3;
  c.input_side = 8;
  c.conv_channels = {2, 3, 4};
  c.pool_window = 2;
  c.capsules = {{{16, 4}, {3, 4}}};
  return c;
}

Heatmap from_values(std::size_t h, std::size_t w, std::vector<double> v) {
  Heatmap m;
  m.height = h;
  m.width = w;
  m.values = std::move(v);
  return m;
}

}  // namespace

TEST(GradcamMap, ZeroGradientGivesZeroMap) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 4, 5}, rng, 0.0, 2.0);
  auto h = gradcam_map(a, std::vector<double>(60, 0.0));
  EXPECT_EQ(h.height, 4u);
  EXPECT_EQ(h.width, 5u);
  for (double v : h.values) EXPECT_EQ(v, 0.0);
}

TEST(GradcamMap, SingleChannelIsReluOfScaledMap) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({1, 3, 3}, rng, -1.0, 1.0);
  std::vector<double> g(9);
  for (std::size_t i = 0; i < 9; ++i) g[i] = 0.1 * static_cast<double>(i);  // mean 0.4
  auto h = gradcam_map(a, g);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(h.values[i], std::max(0.0, 0.4 * a[i]), 1e-15);
}

TEST(GradcamMap, WeightedSumOracleAndLinearity) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({4, 2, 3}, rng, 0.0, 1.0);
  Tensor gt = random_tensor({4, 2, 3}, rng, -1.0, 1.0);
  std::vector<double> g(gt.data().begin(), gt.data().end());
  auto h = gradcam_map(a, g);
  for (std::size_t i = 0; i < 6; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      double alpha = 0.0;
      for (std::size_t j = 0; j < 6; ++j) alpha += g[k * 6 + j] / 6.0;
      acc += alpha * a[k * 6 + i];
    }
    EXPECT_NEAR(h.values[i], std::max(acc, 0.0), 1e-14);
  }
  std::vector<double> g3(g);
  for (auto& v : g3) v *= 3.0;
  auto h3 = gradcam_map(a, g3);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(h3.values[i], 3.0 * h.values[i], 1e-14);
  EXPECT_EQ(render_heatmap(h3, 6), render_heatmap(h, 6));
}

TEST(Gradcam, LayerExtentsAndNonNegativity) {
  auto cfg = toy_stage1();
  const std::vector<std::pair<std::string, std::size_t>> extents{
      {"conv1", 8}, {"conv2", 8}, {"conv3", 4}, {"conv4", 4}, {"", 4}};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto params = init_stage1(cfg, seed);
    std::mt19937_64 rng(seed);
    Tensor slice = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
    for (Label target : {Label::kCovid, Label::kCap, Label::kNormal})
      for (const auto& [layer, side] : extents) {
        auto h = gradcam_stage1(params, cfg, slice, target, layer);
        EXPECT_EQ(h.height, side);
        EXPECT_EQ(h.width, side);
        EXPECT_EQ(h.target, target);
        for (double v : h.values) EXPECT_GE(v, 0.0);
      }
    for (const auto& [name, t] : params.entries()) EXPECT_FALSE(t.has_grad()) << name;
  }
}

TEST(Gradcam, Stage2LayersAndErrors) {
  auto cfg = toy_stage2();
  auto params = init_stage2(cfg, 4);
  std::mt19937_64 rng(5);
  CandidateSet c;
  for (int i = 0; i < 3; ++i) c.slices.push_back(random_tensor({1, 8, 8}, rng, 0.0, 1.0));
  c.p_inf = {0.9, 0.5, 0.2};
  for (const auto& layer : gradcam_layers(2))
    for (std::size_t k = 0; k < 3; ++k) {
      auto h = gradcam_stage2(params, cfg, c, k, Label::kCovid, layer);
      EXPECT_EQ(h.height, layer == "conv3" ? 4u : 8u);
      for (double v : h.values) EXPECT_GE(v, 0.0);
    }
  EXPECT_EQ(gradcam_stage2(params, cfg, c, 0, Label::kCap).layer, "conv3");
  EXPECT_THROW(gradcam_stage2(params, cfg, c, 0, Label::kCap, "conv4"), ConfigError);
  auto p1 = init_stage1(toy_stage1(), 1);
  EXPECT_THROW(gradcam_stage1(p1, toy_stage1(), c.slices[0], Label::kCovid, "fc"), ConfigError);
}

TEST(Gradcam, FusionMapFollowsTheImagePath) {
  auto cfg = toy_stage2();
  auto s2 = init_stage2(cfg, 4);
  auto fusion = init_fusion(9);
  std::mt19937_64 rng(6);
  CandidateSet c;
  for (int i = 0; i < 3; ++i) c.slices.push_back(random_tensor({1, 8, 8}, rng, 0.0, 1.0));
  c.p_inf = {0.9, 0.8, 0.7};
  const std::array<double, 8> clinical{1, 0.3, -0.2, 1, 0, 1, 0, 0};
  double total = 0.0;
  for (auto target : {Label::kCovid, Label::kCap, Label::kNormal})
    for (std::size_t k = 0; k < 3; ++k) {
      auto h = gradcam_fusion(s2, fusion, cfg, c, k, clinical, target, "conv2");
      EXPECT_EQ(h.layer, "conv2");
      for (double v : h.values) {
        EXPECT_GE(v, 0.0);
        total += v;
      }
    }
  EXPECT_GT(total, 0.0);
  for (const auto& [name, t] : fusion.entries())
    EXPECT_EQ(t.grad_or_zeros(), std::vector<double>(t.numel(), 0.0)) << name;

  // Cut the stage-2 shares out of the first fusion layer: the score no
  // longer depends on the image.
  Tensor w = fusion.get("fusion.fc1.weight");
  for (std::size_t i = 0; i < 3 * kFusionHidden; ++i) w.mutable_data()[i] = 0.0;
  for (std::size_t k = 0; k < 3; ++k)
    for (double v : gradcam_fusion(s2, fusion, cfg, c, k, clinical, Label::kCovid).values) EXPECT_EQ(v, 0.0);
}

TEST(Render, Endpoints) {
  auto black = render_heatmap(from_values(2, 2, {0, 0, 0, 0}), 4);
  EXPECT_EQ(black, std::vector<std::uint8_t>(16, 0));
  auto white = render_heatmap(from_values(2, 2, {0.3, 0.3, 0.3, 0.3}), 4);
  EXPECT_EQ(white, std::vector<std::uint8_t>(16, 255));
}

TEST(Render, HalfUpRoundingAndNearestUpscale) {
  const double m = 0.8;
  auto px = render_heatmap(from_values(2, 2, {0, m / 2, m / 2, m}), 2);
  EXPECT_EQ(px, (std::vector<std::uint8_t>{0, 128, 128, 255}));
  auto big = render_heatmap(from_values(2, 2, {0, m / 2, m / 2, m}), 4);
  EXPECT_EQ(big, (std::vector<std::uint8_t>{0, 0, 128, 128,  //
                                            0, 0, 128, 128,  //
                                            128, 128, 255, 255,  //
                                            128, 128, 255, 255}));
}

TEST(Render, PgmFileAndName) {
  const fs::path dir = fs::temp_directory_path() / "capsct_gradcam_test";
  fs::create_directories(dir);
  const auto path = dir / heatmap_filename("p0003", 7, Label::kCovid);
  EXPECT_EQ(path.filename().string(), "p0003_7_covid.pgm");
  write_pgm(path, std::vector<std::uint8_t>{0, 128, 128, 255}, 2);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes, std::string("P5\n2 2\n255\n") + std::string("\x00\x80\x80\xff", 4));
  fs::remove_all(dir);
  EXPECT_THROW(write_pgm("/nonexistent/dir/x.pgm", std::vector<std::uint8_t>{0}, 1), IoError);
}
