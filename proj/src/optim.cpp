#include "capsct/optim.hpp"

#include <algorithm>
#include <cmath>

#include "capsct/error.hpp"

namespace capsct {

void ParameterSet::add(std::string name, Tensor tensor, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  tensor.set_requires_grad(trainable);
  entries_.emplace_back(std::move(name), std::move(tensor));
  trainable_.push_back(trainable);
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ConfigError("unknown parameter " + name);
}

Tensor& ParameterSet::get(const std::string& name) {
  for (auto& [n, t] : entries_)
    if (n == name) return t;
  throw ConfigError("unknown parameter " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

std::vector<Tensor> ParameterSet::trainable() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (trainable_[i]) out.push_back(entries_[i].second);
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

ParameterSet ParameterSet::snapshot() const {
  ParameterSet copy;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    copy.add(entries_[i].first, entries_[i].second.detach(), trainable_[i]);
  return copy;
}

void ParameterSet::assign(const ParameterSet& other) {
  if (other.entries_.size() != entries_.size())
    throw ConfigError("parameter sets differ in size");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [name, src] = other.entries_[i];
    auto& dst = entries_[i].second;
    if (name != entries_[i].first || src.shape() != dst.shape())
      throw ConfigError("parameter mismatch at " + entries_[i].first);
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon);
    }
    p.zero_grad();
  }
}

}  // namespace capsct
