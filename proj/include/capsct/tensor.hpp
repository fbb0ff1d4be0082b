#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace capsct {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorData {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
};
}  // namespace detail

// Dense row-major array of 64-bit reals. Copies share storage (handle
// semantics) so that a recorded computation can refer back to its inputs;
// use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }
  std::uint64_t id() const { return impl_->id; }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zeros when no gradient has been accumulated yet.
  std::vector<double> grad_or_zeros() const;
  std::span<const double> grad() const { return impl_->grad; }
  // Gradient storage of the shared tensor state; allocates on first use.
  std::span<double> grad_buffer() const;
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;   // deep copy, keeps requires_grad, no grad
  Tensor detach() const;  // deep copy without grad tracking
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  // Marks the tensor as the output of a recorded operation.
  void mark_non_leaf() {
    impl_->requires_grad = true;
    impl_->is_leaf = false;
  }

 private:
  std::shared_ptr<detail::TensorData> impl_;
};

class Tensor;
class Tape;
void backward(Tape& tape, const Tensor& loss);

// ComputationRecord: the tape of executed differentiable operations.
class Tape {
 public:
  using Adjoint = std::function<void(std::span<const double> out_grad)>;

  struct Entry {
    std::string op;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id = 0;
    Tensor output;
    Adjoint adjoint;
  };

  void record(std::string_view op, std::vector<std::uint64_t> input_ids, Tensor output,
              Adjoint adjoint);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void reset() { entries_.clear(); }

 private:
  friend void backward(Tape& tape, const Tensor& loss);
  std::vector<Entry> entries_;
};

// Tape that operations on this thread record to, or nullptr.
Tape* active_tape();

// RAII scope making `tape` the active tape for the current thread.
class Recording {
 public:
  explicit Recording(Tape& tape);
  ~Recording();
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the current thread.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* previous_;
};

// Reverse sweep from a scalar loss. Gradients accumulate into every tensor
// that requires grad (including intermediates); the tape is reset afterwards.
void backward(Tape& tape, const Tensor& loss);

}  // namespace capsct
