#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capsct/tensor.hpp"

namespace capsct {

// Differentiable operations. Each records its adjoint on the active tape
// when at least one input requires grad. Shapes never broadcast except for
// the explicit bias/affine cases below.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);          // [N×F] + [F]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // [C×H×W] + [C]
Tensor reshape(const Tensor& x, Shape shape);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax_axis(const Tensor& x, std::size_t axis);
// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// Cross-correlation of a [C_in×H×W] input with [C_out×C_in×kh×kw] kernels.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride = 1,
              std::size_t padding = 0);
// Per-window maximum; the gradient goes to the first (row-major) argmax.
Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride);
// Channel concatenation of two [C×H×W] maps with equal spatial extents.
Tensor concat_channels(const Tensor& a, const Tensor& b);

enum class Mode { kTrain, kInfer };

// View of per-feature running statistics (owned by the caller, typically
// non-trainable tensors of a ParameterSet).
struct RunningStats {
  std::span<double> mean;
  std::span<double> var;
};

inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kBatchNormEpsilon = 1e-5;

// Batch normalization of an [N×F] tensor. In train mode the batch statistics
// are used and `stats` is updated as stats = momentum*stats + (1-momentum)*batch.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                 RunningStats stats, double epsilon = kBatchNormEpsilon,
                 double momentum = kBatchNormMomentum);

// Stacks same-shaped tensors into [N×numel].
Tensor stack_rows(const std::vector<Tensor>& rows);
// Row `index` of an [N×F] tensor, as [F].
Tensor select_row(const Tensor& x, std::size_t index);
// N maps [C×H×W] -> [(N·H·W)×C], one row per spatial position.
Tensor channel_rows(const std::vector<Tensor>& maps);
// Inverse of channel_rows for map `index`.
Tensor channel_rows_block(const Tensor& rows, std::size_t index, std::size_t height,
                          std::size_t width);
// Column-wise maximum of a [K×C] tensor; first row wins on ties.
Tensor max_over_rows(const Tensor& x);
// Euclidean norm of every row of an [N×D] tensor, as [N].
Tensor row_norms(const Tensor& x);
// x / sum(x) for a non-negative [K] tensor; uniform (and no gradient) when
// the sum is zero.
Tensor normalize_sum(const Tensor& x);

}  // namespace capsct
