#include "capsct/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "capsct/error.hpp"

namespace capsct {

Heatmap gradcam_map(const Tensor& activation, std::span<const double> gradient) {
  if (activation.rank() != 3 || gradient.size() != activation.numel())
    throw DimensionError("gradcam needs a [C×H×W] activation and a matching gradient, got " +
                         shape_str(activation.shape()));
  const std::size_t c = activation.dim(0), h = activation.dim(1), w = activation.dim(2);
  const std::size_t plane = h * w;
  Heatmap out;
  out.height = h;
  out.width = w;
  out.values.assign(plane, 0.0);
  auto a = activation.data();
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += gradient[k * plane + i];
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) out.values[i] += alpha * a[k * plane + i];
  }
  for (auto& v : out.values) v = std::max(v, 0.0);
  return out;
}

std::vector<std::string> gradcam_layers(int stage) {
  if (stage == 1) return {"conv1", "conv2", "conv3", "conv4"};
  if (stage == 2) return {"conv1", "conv2", "conv3"};
  throw ConfigError("gradcam is available for stage 1 and 2 only");
}

namespace {

std::size_t layer_index(int stage, const std::string& layer) {
  const auto names = gradcam_layers(stage);
  if (layer.empty()) return names.size() - 1;
  auto it = std::find(names.begin(), names.end(), layer);
  if (it == names.end())
    throw ConfigError("unknown stage " + std::to_string(stage) + " layer \"" + layer + "\"");
  return static_cast<std::size_t>(it - names.begin());
}

// Runs `score_fn` on a fresh tape, differentiates it and returns the map
// of `activation()` (valid after `score_fn`); parameter gradients are
// cleared again.
template <class ScoreFn, class ActivationFn>
Heatmap differentiate(std::initializer_list<ParameterSet*> params, ScoreFn&& score_fn,
                      ActivationFn&& activation) {
  for (auto* p : params) p->zero_grad();
  Tape tape;
  Tensor score;
  {
    Recording rec(tape);
    score = score_fn();
  }
  Tensor act = activation();
  backward(tape, score);
  const std::vector<double> grad = act.grad_or_zeros();
  for (auto* p : params) p->zero_grad();
  return gradcam_map(act.detach(), grad);
}

}  // namespace

Heatmap gradcam_stage1(ParameterSet& params, const Stage1Config& config, const Tensor& slice,
                       Label target, const std::string& layer) {
  const std::size_t idx = layer_index(1, layer);
  Stage1Forward fwd;
  Heatmap h = differentiate(
      {&params},
      [&] {
        fwd = stage1_forward(params, config, {slice}, Mode::kInfer);
        Tensor shares = reshape(normalize_sum(select_row(fwd.norms, 0)), {2, 1});
        return select_row(shares, target == Label::kNormal ? 1 : 0);
      },
      [&] { return fwd.activations.front()[idx]; });
  h.target = target;
  h.layer = gradcam_layers(1)[idx];
  return h;
}

Heatmap gradcam_stage2(ParameterSet& params, const Stage2Config& config,
                       const CandidateSet& candidates, std::size_t candidate, Label target,
                       const std::string& layer) {
  const std::size_t idx = layer_index(2, layer);
  if (candidate >= candidates.slices.size())
    throw DimensionError("candidate " + std::to_string(candidate) + " out of range");
  Stage2Forward fwd;
  Heatmap h = differentiate(
      {&params},
      [&] {
        fwd = stage2_forward(params, config, {&candidates}, Mode::kInfer);
        return select_row(reshape(fwd.pooled.front(), {3, 1}), static_cast<std::size_t>(target));
      },
      [&] { return fwd.activations.front()[candidate][idx]; });
  h.target = target;
  h.layer = gradcam_layers(2)[idx];
  return h;
}

Heatmap gradcam_fusion(ParameterSet& stage2, ParameterSet& fusion, const Stage2Config& config,
                       const CandidateSet& candidates, std::size_t candidate,
                       const std::array<double, 8>& clinical, Label target, const std::string& layer) {
  const std::size_t idx = layer_index(2, layer);
  if (candidate >= candidates.slices.size())
    throw DimensionError("candidate " + std::to_string(candidate) + " out of range");
  // The fusion input row is probs·E + c, with E placing the three class
  // shares in the first columns and c holding the clinical encoding.
  Tensor embed({3, kFusionInputs}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) embed.mutable_data()[i * kFusionInputs + i] = 1.0;
  Tensor fixed({1, kFusionInputs}, 0.0);
  for (std::size_t i = 0; i < clinical.size(); ++i) fixed.mutable_data()[3 + i] = clinical[i];
  Stage2Forward fwd;
  Heatmap h = differentiate(
      {&stage2, &fusion},
      [&] {
        fwd = stage2_forward(stage2, config, {&candidates}, Mode::kInfer);
        Tensor probs = reshape(normalize_sum(reshape(fwd.pooled.front(), {3})), {1, 3});
        Tensor x = add(matmul(probs, embed), fixed);
        Tensor p = softmax_axis(fusion_forward(fusion, x, Mode::kInfer), 1);
        return select_row(reshape(p, {3, 1}), static_cast<std::size_t>(target));
      },
      [&] { return fwd.activations.front()[candidate][idx]; });
  h.target = target;
  h.layer = gradcam_layers(2)[idx];
  return h;
}

std::vector<std::uint8_t> render_heatmap(const Heatmap& heatmap, std::size_t side) {
  if (heatmap.values.size() != heatmap.height * heatmap.width || heatmap.values.empty())
    throw DimensionError("malformed heatmap");
  const double peak = *std::max_element(heatmap.values.begin(), heatmap.values.end());
  std::vector<std::uint8_t> out(side * side, 0);
  if (!(peak > 0.0)) return out;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double v = heatmap.values[(y * heatmap.height / side) * heatmap.width + x * heatmap.width / side];
      out[y * side + x] = static_cast<std::uint8_t>(std::floor(255.0 * v / peak + 0.5));
    }
  return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
               std::size_t side) {
  if (pixels.size() != side * side) throw DimensionError("pgm pixel count does not match side");
  std::string bytes = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  detail::write_file(path, bytes);
}

std::string heatmap_filename(const std::string& patient, std::size_t slice, Label target) {
  return patient + "_" + std::to_string(slice) + "_" + std::string(label_name(target)) + ".pgm";
}

}  // namespace capsct
