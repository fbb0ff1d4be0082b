#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsct/tensor.hpp"

namespace capsct {

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  // 0 checks every entry; otherwise a seeded sample of at most this many
  // entries per parameter tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_error = 0.0;
  bool passed = false;
  std::string worst;  // "<param index>[<entry>]" of the largest error
};

// Compares reverse-mode gradients of the scalar returned by `loss_fn` with
// central finite differences, entry by entry, using
// |analytic - numeric| / max(1, |numeric|).
// `loss_fn` must rebuild the graph from `params` on every call.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace capsct
