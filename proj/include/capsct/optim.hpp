#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "capsct/tensor.hpp"

namespace capsct {

// Ordered name -> tensor table shared by the networks, the optimizer and the
// checkpoint writer.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor, bool trainable = true);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  void zero_grad();

  // Deep copy (fresh storage for every tensor).
  ParameterSet snapshot() const;
  // Copies values from `other`, which must have identical names and shapes.
  void assign(const ParameterSet& other);
  std::size_t scalar_count() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::vector<bool> trainable_;
};

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);
  // Applies one update from the accumulated gradients, then clears them.
  void step();

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace capsct
