#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capsct/capsule.hpp"
#include "capsct/data.hpp"
#include "capsct/ops.hpp"
#include "capsct/optim.hpp"
#include "capsct/tensor.hpp"

namespace capsct {

struct CapsuleSpec {
  std::size_t count = 0;
  std::size_t dim = 0;
  bool operator==(const CapsuleSpec&) const = default;
};

// Output of conv layer `from` is concatenated to the input of layer `to`.
struct Shortcut {
  std::size_t from = 0;
  std::size_t to = 0;
  bool operator==(const Shortcut&) const = default;
};

// Slice-level infection detector: four 3x3 conv layers (relu) with a max
// pool after layer 2, batch norm after layer 4, then primary, hidden and
// final capsules. The first capsule entry is the primary layer, whose count
// must equal (channels/dim) * pooled side^2. Final capsule 0 is "infected".
struct Stage1Config {
  std::size_t input_side = 32;
  std::array<std::size_t, 4> conv_channels{8, 8, 16, 16};
  std::size_t pool_window = 4;
  std::array<CapsuleSpec, 3> capsules{{{128, 8}, {8, 8}, {2, 16}}};
  std::array<Shortcut, 2> shortcuts{{{1, 3}, {2, 4}}};
  std::size_t routing_iterations = kDefaultRoutingIterations;
  MarginLossConfig loss;

  void validate() const;
  std::size_t pooled_side() const { return input_side / pool_window; }
};

// Per-candidate patient classifier: conv1, conv2, batch norm, max pool,
// conv3, then primary capsules and the covid/cap/normal class capsules.
struct Stage2Config {
  std::size_t candidate_count = 10;
  std::size_t input_side = 32;
  std::array<std::size_t, 3> conv_channels{8, 16, 16};
  std::size_t pool_window = 4;
  std::array<CapsuleSpec, 2> capsules{{{128, 8}, {3, 16}}};
  std::size_t routing_iterations = kDefaultRoutingIterations;
  MarginLossConfig loss;

  void validate() const;
  std::size_t pooled_side() const { return input_side / pool_window; }
};

struct TrainSpec {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  double validation_fraction = 0.30;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> train_loss;       // mean batch loss per epoch
  std::vector<double> validation_loss;  // empty without a validation split
  std::size_t best_epoch = 0;
};

struct TrainResult {
  ParameterSet params;
  TrainHistory history;
};

// ---- stage 1 ----

ParameterSet init_stage1(const Stage1Config& config, std::uint64_t seed);

struct Stage1Forward {
  Tensor norms;  // [N×2]: infected, non-infected capsule norms
  std::vector<std::array<Tensor, 4>> activations;  // post-relu conv outputs
};

// Runs a batch of [1×side×side] slices. Train mode uses (and updates) the
// batch statistics of the batch-norm layer.
Stage1Forward stage1_forward(ParameterSet& params, const Stage1Config& config,
                             const std::vector<Tensor>& slices, Mode mode,
                             RoutingTrace* trace = nullptr);

// Mean class-weighted margin loss of a batch; infected[i] selects capsule 0.
Tensor stage1_loss(const Tensor& norms, std::span<const int> infected,
                   const MarginLossConfig& loss);

// |v_inf| / (|v_inf| + |v_non|), 0.5 when both vanish.
double infection_probability(double inf_norm, double non_norm);
// Differentiable form over a [2] norm vector.
Tensor infection_probability(const Tensor& norms);

double infer_stage1(ParameterSet& params, const Stage1Config& config, const Tensor& slice);
std::vector<double> infer_stage1(ParameterSet& params, const Stage1Config& config,
                                 const std::vector<Tensor>& slices);

struct SliceSet {
  std::vector<Tensor> images;
  std::vector<int> infected;       // 1 infected, 0 clean
  std::vector<std::size_t> group;  // patient index, for the validation split
};

TrainResult train_stage1(const SliceSet& data, const Stage1Config& config, const TrainSpec& spec);

// ---- candidates and gating ----

struct CandidateSet {
  std::string patient_id;
  std::vector<std::size_t> slice_index;
  std::vector<double> p_inf;  // non-increasing
  std::vector<Tensor> slices;
};

// Top-k slices by p_inf (ties by ascending index); fewer than k slices are
// padded by repeating the best one. Slices are left empty.
CandidateSet select_candidates(std::span<const double> p_infs, std::size_t k);

struct GateResult {
  std::array<double, 3> scores{};
  std::array<double, 3> probabilities{};
  int decision = 2;
};

// Class order covid, cap, normal. Ties go to the later class, so an
// all-zero score vector is decided normal.
int decide(std::span<const double> scores);

// Gating of K×3 capsule norms by p_inf followed by the max over candidates.
GateResult gate_and_pool(std::span<const std::array<double, 3>> norms,
                         std::span<const double> p_inf);
// Differentiable form: [K×3] norms -> pooled [3] scores.
Tensor gate_and_pool(const Tensor& norms, std::span<const double> p_inf);

// ---- stage 2 ----

ParameterSet init_stage2(const Stage2Config& config, std::uint64_t seed);

struct Stage2Forward {
  std::vector<Tensor> pooled;  // per patient [3]
  std::vector<Tensor> norms;   // per patient [K×3]
  std::vector<std::vector<std::array<Tensor, 3>>> activations;  // [patient][candidate]
};

Stage2Forward stage2_forward(ParameterSet& params, const Stage2Config& config,
                             const std::vector<const CandidateSet*>& patients, Mode mode,
                             RoutingTrace* trace = nullptr);

Tensor stage2_loss(const std::vector<Tensor>& pooled, std::span<const int> labels,
                   const MarginLossConfig& loss);

GateResult infer_stage2(ParameterSet& params, const Stage2Config& config,
                        const CandidateSet& candidates);

TrainResult train_stage2(const std::vector<CandidateSet>& data, std::span<const int> labels,
                         const Stage2Config& config, const TrainSpec& spec);

// ---- clinical fusion ----

inline constexpr std::size_t kFusionInputs = 11;
inline constexpr std::size_t kFusionHidden = 64;
inline constexpr std::size_t kFusionBlocks = 4;

// Age and weight are standardized with statistics of the training split.
struct ClinicalScaler {
  double age_mean = 0.0, age_sd = 1.0;
  double weight_mean = 0.0, weight_sd = 1.0;

  static ClinicalScaler fit(std::span<const ClinicalFeatures> train);
  // sex, age, weight, cough, fever, dyspnea, chest pain, fatigue
  std::array<double, 8> encode(const ClinicalFeatures& c) const;
};

std::vector<double> fusion_input(const std::array<double, 3>& class_probs,
                                 const std::array<double, 8>& clinical);

ParameterSet init_fusion(std::uint64_t seed);
// [N×11] inputs -> [N×3] logits.
Tensor fusion_forward(ParameterSet& params, const Tensor& inputs, Mode mode);

struct FusionPrediction {
  std::array<double, 3> probabilities{};
  int decision = 0;
};

FusionPrediction infer_fusion(ParameterSet& params, std::span<const double> input);
TrainResult train_fusion(const std::vector<std::vector<double>>& inputs,
                         std::span<const int> labels, const TrainSpec& spec);

}  // namespace capsct
