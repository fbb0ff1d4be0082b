#include "capsct/tensor.hpp"

#include <atomic>
#include <sstream>

#include "capsct/error.hpp"

namespace capsct {

namespace {
std::atomic<std::uint64_t> next_id{1};
thread_local Tape* current_tape = nullptr;

std::shared_ptr<detail::TensorData> make_data(Shape shape, std::vector<double> values) {
  auto d = std::make_shared<detail::TensorData>();
  d->id = next_id.fetch_add(1, std::memory_order_relaxed);
  d->shape = std::move(shape);
  d->data = std::move(values);
  return d;
}
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor() : impl_(make_data({1}, {0.0})) {}

Tensor::Tensor(Shape shape, double fill) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  const auto n = shape_numel(shape);
  impl_ = make_data(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  impl_ = make_data(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
  return impl_->grad;
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

void Tape::record(std::string_view op, std::vector<std::uint64_t> input_ids, Tensor output,
                  Adjoint adjoint) {
  Entry e;
  e.op = std::string(op);
  e.input_ids = std::move(input_ids);
  e.output_id = output.id();
  e.output = std::move(output);
  e.adjoint = std::move(adjoint);
  entries_.push_back(std::move(e));
}

Tape* active_tape() { return current_tape; }

Recording::Recording(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
Recording::~Recording() { current_tape = previous_; }

NoGrad::NoGrad() : previous_(current_tape) { current_tape = nullptr; }
NoGrad::~NoGrad() { current_tape = previous_; }

void backward(Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any recorded operation");
  NoGrad guard;
  Tensor l = loss;
  l.grad_buffer()[0] += 1.0;
  auto& entries = tape.entries_;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->adjoint(it->output.grad());
  }
  tape.reset();
}

}  // namespace capsct
