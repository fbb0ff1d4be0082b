#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "capsct/data.hpp"
#include "capsct/pipeline.hpp"

namespace capsct {

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, all >= 0
  Label target = Label::kCovid;
  std::string layer;
};

// relu(sum_k alpha_k A_k) with alpha_k the spatial mean of the score
// gradient over channel k; both tensors are [C×H×W].
Heatmap gradcam_map(const Tensor& activation, std::span<const double> gradient);

// Layer names are "conv1".."conv4" for stage 1 and "conv1".."conv3" for
// stage 2; an empty name selects the last one.
std::vector<std::string> gradcam_layers(int stage);

// Stage-1 class score: p_inf for covid and cap, 1 - p_inf for normal.
Heatmap gradcam_stage1(ParameterSet& params, const Stage1Config& config, const Tensor& slice,
                       Label target, const std::string& layer = "");

// Stage-2 class score: the gated, pooled score of `target`; the map is taken
// on candidate `candidate`.
Heatmap gradcam_stage2(ParameterSet& params, const Stage2Config& config,
                       const CandidateSet& candidates, std::size_t candidate, Label target,
                       const std::string& layer = "");

// Fusion class probability, differentiated through the fusion head into the
// stage-2 layers; `clinical` is the scaled clinical encoding of the patient.
Heatmap gradcam_fusion(ParameterSet& stage2, ParameterSet& fusion, const Stage2Config& config,
                       const CandidateSet& candidates, std::size_t candidate,
                       const std::array<double, 8>& clinical, Label target,
                       const std::string& layer = "");

// Nearest-neighbour upscale to side×side and a linear map of [0, max] to
// 0..255 with round half up; an all-zero map renders black.
std::vector<std::uint8_t> render_heatmap(const Heatmap& heatmap, std::size_t side);
void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
               std::size_t side);
std::string heatmap_filename(const std::string& patient, std::size_t slice, Label target);

}  // namespace capsct
