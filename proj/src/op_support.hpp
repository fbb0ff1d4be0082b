#pragma once

#include <cmath>
#include <initializer_list>
#include <string>
#include <string_view>

#include "capsct/error.hpp"
#include "capsct/tensor.hpp"

namespace capsct::detail {

inline void check_finite(std::string_view op, const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw NumericError("non-finite value produced by " + std::string(op));
}

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Validates the output and, when recording, attaches the adjoint built by
// `make_adjoint` to the active tape.
template <class MakeAdjoint>
Tensor finish(std::string_view op, Tensor out, std::initializer_list<const Tensor*> inputs,
              MakeAdjoint&& make_adjoint) {
  check_finite(op, out);
  if (!recording(inputs)) return out;
  std::vector<std::uint64_t> ids;
  for (const Tensor* t : inputs) ids.push_back(t->id());
  out.mark_non_leaf();
  active_tape()->record(op, std::move(ids), out, make_adjoint());
  return out;
}

// Variant for operations with a runtime-sized input list.
template <class MakeAdjoint>
Tensor finish_many(std::string_view op, Tensor out, const std::vector<Tensor>& inputs,
                   MakeAdjoint&& make_adjoint) {
  check_finite(op, out);
  if (active_tape() == nullptr) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  std::vector<std::uint64_t> ids;
  for (const auto& t : inputs) ids.push_back(t.id());
  out.mark_non_leaf();
  active_tape()->record(op, std::move(ids), out, make_adjoint());
  return out;
}

inline std::string shapes_str(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

}  // namespace capsct::detail
