#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capsct/tensor.hpp"

namespace capsct {

// `count` capsule vectors of length `dim`, stored as a [count×dim] tensor.
struct CapsuleStack {
  Tensor values;
  std::size_t count() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

// Couplings of the most recent routing call. `history` holds c after every
// iteration, the last entry being `couplings`.
struct RoutingState {
  Tensor logits;     // b, [count_in×count_out]
  Tensor couplings;  // c, [count_in×count_out]
  std::size_t iterations = 0;
  std::vector<Tensor> history;
};

// Freezes routing for finite-difference checks: in kRecord mode every
// routing call appends its final couplings; in kReplay mode routing skips
// the agreement loop and reuses them in order.
struct RoutingTrace {
  enum class Mode { kRecord, kReplay };
  Mode mode = Mode::kRecord;
  std::vector<Tensor> couplings;
  std::size_t cursor = 0;
};

struct MarginLossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_neg = 0.5;
  std::vector<double> class_weights;  // empty: all ones

  void validate(std::size_t classes) const;
  double weight(std::size_t k) const { return class_weights.empty() ? 1.0 : class_weights[k]; }
};

inline constexpr std::size_t kDefaultRoutingIterations = 3;

// v = (|s|^2 / (1 + |s|^2)) * s / |s|, and 0 for s = 0.
std::vector<double> squash(std::span<const double> s);
// Row-wise squash of a [count×dim] tensor (differentiable).
Tensor squash_rows(const Tensor& s);

// Groups channel c = g*caps_dim + d of a [C×H×W] map into capsule
// g*H*W + y*W + x, component d, and squashes every capsule.
CapsuleStack primary_caps(const Tensor& feature_map, std::size_t caps_dim);

// Prediction vectors u_hat[i,j] = W[i,j] · u[i]; weights are
// [count_in×count_out×dim_out×dim_in], result [count_in×count_out×dim_out].
Tensor capsule_predictions(const CapsuleStack& input, const Tensor& weights);

struct RoutingResult {
  CapsuleStack output;
  RoutingState state;
};

// Routing by agreement over [count_in×count_out×dim_out] predictions. The
// logit updates are not differentiated; gradients reach the predictions
// through the final couplings.
RoutingResult routing(const Tensor& predictions, std::size_t iterations,
                      RoutingTrace* trace = nullptr);

RoutingResult capsule_layer(const CapsuleStack& input, const Tensor& weights,
                            std::size_t iterations, RoutingTrace* trace = nullptr);

// Class-weighted margin loss over per-class capsule norms (in [0, 1)).
Tensor margin_loss(const Tensor& norms, std::size_t target, const MarginLossConfig& config);

// Inverse class frequency weights normalized to mean 1. Every class must
// occur in `labels`.
std::vector<double> inverse_frequency_weights(std::span<const int> labels, std::size_t classes);

}  // namespace capsct
