#include "capsct/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "capsct/error.hpp"

namespace capsct {

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0 && options.step <= 1e-3))
    throw ContractError("grad_check: step must lie in (0, 1e-3]");
  for (const auto& p : params)
    for (double v : p.data())
      if (!std::isfinite(v)) throw NumericError("grad_check: non-finite input");

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Recording rec(tape);
    Tensor loss = loss_fn();
    backward(tape, loss);
  }

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const auto analytic = p.grad_or_zeros();
    std::vector<std::size_t> entries(p.numel());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_tensor > 0 && entries.size() > options.max_entries_per_tensor) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_tensor);
      std::sort(entries.begin(), entries.end());
    }
    NoGrad no_grad;
    auto values = p.mutable_data();
    for (std::size_t e : entries) {
      const double original = values[e];
      values[e] = original + options.step;
      const double up = loss_fn().item();
      values[e] = original - options.step;
      const double down = loss_fn().item();
      values[e] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = std::abs(analytic[e] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_error || result.worst.empty()) {
        result.max_error = std::max(result.max_error, err);
        if (err >= result.max_error)
          result.worst = std::to_string(pi) + "[" + std::to_string(e) + "]";
      }
    }
  }
  result.passed = result.max_error <= options.tolerance;
  return result;
}

}  // namespace capsct
