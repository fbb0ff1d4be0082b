#include "capsct/capsule.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "capsct/error.hpp"
#include "capsct/ops.hpp"
#include "op_support.hpp"

namespace capsct {

using detail::finish;

void MarginLossConfig::validate(std::size_t classes) const {
  if (!(m_plus > 0.0 && m_plus < 1.0)) throw ConfigError("margin loss: m_plus must lie in (0,1)");
  if (!(m_minus > 0.0 && m_minus < m_plus))
    throw ConfigError("margin loss: m_minus must lie in (0, m_plus)");
  if (!(lambda_neg > 0.0 && lambda_neg <= 1.0))
    throw ConfigError("margin loss: lambda must lie in (0,1]");
  if (!class_weights.empty()) {
    if (class_weights.size() != classes)
      throw ConfigError("margin loss: expected " + std::to_string(classes) + " class weights");
    for (double w : class_weights)
      if (!(w > 0.0)) throw ConfigError("margin loss: class weights must be positive");
  }
}

std::vector<double> squash(std::span<const double> s) {
  double sq = 0.0;
  for (double x : s) sq += x * x;
  std::vector<double> v(s.size(), 0.0);
  if (sq == 0.0) return v;
  const double n = std::sqrt(sq);
  const double f = n / (1.0 + sq);
  for (std::size_t i = 0; i < s.size(); ++i) v[i] = f * s[i];
  return v;
}

Tensor squash_rows(const Tensor& s) {
  if (s.rank() != 2) throw DimensionError("squash_rows: expected [count×dim], got " + shape_str(s.shape()));
  const std::size_t n = s.dim(0), d = s.dim(1);
  Tensor out(s.shape());
  auto o = out.mutable_data();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += s[i * d + k] * s[i * d + k];
    norms[i] = std::sqrt(sq);
    const double f = norms[i] / (1.0 + sq);
    for (std::size_t k = 0; k < d; ++k) o[i * d + k] = f * s[i * d + k];
  }
  return finish("squash", out, {&s}, [&]() {
    return [s, n, d, norms = std::move(norms)](std::span<const double> g) mutable {
      auto gs = s.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double nrm = norms[i];
        if (nrm == 0.0) continue;
        const double sq = nrm * nrm;
        const double f = nrm / (1.0 + sq);
        const double fprime_over_n = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq) * nrm);
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += g[i * d + k] * s[i * d + k];
        for (std::size_t k = 0; k < d; ++k)
          gs[i * d + k] += f * g[i * d + k] + fprime_over_n * s[i * d + k] * dot;
      }
    };
  });
}

namespace {

Tensor group_channels(const Tensor& fm, std::size_t caps_dim) {
  const std::size_t c = fm.dim(0), hw = fm.dim(1) * fm.dim(2);
  const std::size_t groups = c / caps_dim;
  Tensor out({groups * hw, caps_dim});
  auto o = out.mutable_data();
  // capsule (g, p), component k  <-  channel g*caps_dim + k at position p
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < caps_dim; ++k)
      for (std::size_t p = 0; p < hw; ++p)
        o[(g * hw + p) * caps_dim + k] = fm[(g * caps_dim + k) * hw + p];
  return finish("group_channels", out, {&fm}, [=]() {
    return [fm, groups, caps_dim, hw](std::span<const double> gr) mutable {
      auto gf = fm.grad_buffer();
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t k = 0; k < caps_dim; ++k)
          for (std::size_t p = 0; p < hw; ++p)
            gf[(g * caps_dim + k) * hw + p] += gr[(g * hw + p) * caps_dim + k];
    };
  });
}

// s[j,a] = sum_i c[i,j] * u_hat[i,j,a]; c is a constant of the graph.
Tensor couple(const Tensor& predictions, std::vector<double> c) {
  const std::size_t in = predictions.dim(0), out_n = predictions.dim(1), d = predictions.dim(2);
  Tensor s({out_n, d});
  double* so = s.mutable_data().data();
  const double* pd = predictions.data().data();
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out_n; ++j) {
      const double cij = c[i * out_n + j];
      for (std::size_t a = 0; a < d; ++a) so[j * d + a] += cij * pd[(i * out_n + j) * d + a];
    }
  return finish("couple", s, {&predictions}, [&]() {
    return [predictions, c = std::move(c), in, out_n, d](std::span<const double> g) mutable {
      double* gp = predictions.grad_buffer().data();
      for (std::size_t i = 0; i < in; ++i)
        for (std::size_t j = 0; j < out_n; ++j) {
          const double cij = c[i * out_n + j];
          for (std::size_t a = 0; a < d; ++a) gp[(i * out_n + j) * d + a] += cij * g[j * d + a];
        }
    };
  });
}

void softmax_rows_inplace(std::vector<double>& b, std::size_t rows, std::size_t cols,
                          std::vector<double>& c) {
  c.assign(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = b[i * cols];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, b[i * cols + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      c[i * cols + j] = std::exp(b[i * cols + j] - mx);
      z += c[i * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) c[i * cols + j] /= z;
  }
}

}  // namespace

CapsuleStack primary_caps(const Tensor& feature_map, std::size_t caps_dim) {
  if (feature_map.rank() != 3)
    throw DimensionError("primary_caps: expected [C×H×W], got " + shape_str(feature_map.shape()));
  if (caps_dim == 0 || feature_map.dim(0) % caps_dim != 0)
    throw ConfigError("primary_caps: " + std::to_string(feature_map.dim(0)) +
                      " channels are not divisible by capsule dimension " +
                      std::to_string(caps_dim));
  return {squash_rows(group_channels(feature_map, caps_dim))};
}

Tensor capsule_predictions(const CapsuleStack& input, const Tensor& weights) {
  const Tensor& u = input.values;
  if (u.rank() != 2 || weights.rank() != 4 || weights.dim(0) != u.dim(0) ||
      weights.dim(3) != u.dim(1))
    throw DimensionError("capsule_layer: weights " + shape_str(weights.shape()) +
                         " do not fit capsules " + shape_str(u.shape()));
  const std::size_t in = weights.dim(0), out_n = weights.dim(1), dout = weights.dim(2),
                    din = weights.dim(3);
  Tensor pred({in, out_n, dout});
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto rows = static_cast<Eigen::Index>(out_n * dout), cols = static_cast<Eigen::Index>(din);
  double* p = pred.mutable_data().data();
  const double* w = weights.data().data();
  const double* ud = u.data().data();
  for (std::size_t i = 0; i < in; ++i)
    Eigen::Map<Eigen::VectorXd>(p + i * out_n * dout, rows).noalias() =
        Eigen::Map<const RowMatrix>(w + i * out_n * dout * din, rows, cols) *
        Eigen::Map<const Eigen::VectorXd>(ud + i * din, cols);
  return finish("capsule_predictions", pred, {&u, &weights}, [=]() {
    return [u, weights, in, out_n, dout, din](std::span<const double> g) mutable {
      const double* ud = u.data().data();
      if (weights.requires_grad()) {
        double* gw = weights.grad_buffer().data();
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t r = 0; r < out_n * dout; ++r) {
            const double gv = g[i * out_n * dout + r];
            double* gwr = gw + (i * out_n * dout + r) * din;
            for (std::size_t b = 0; b < din; ++b) gwr[b] += gv * ud[i * din + b];
          }
      }
      if (u.requires_grad()) {
        double* gu = u.grad_buffer().data();
        const double* w = weights.data().data();
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t r = 0; r < out_n * dout; ++r) {
            const double gv = g[i * out_n * dout + r];
            const double* wr = w + (i * out_n * dout + r) * din;
            for (std::size_t b = 0; b < din; ++b) gu[i * din + b] += gv * wr[b];
          }
      }
    };
  });
}

RoutingResult routing(const Tensor& predictions, std::size_t iterations, RoutingTrace* trace) {
  if (iterations < 1) throw ConfigError("routing: iterations must be at least 1");
  if (predictions.rank() != 3)
    throw DimensionError("routing: expected [in×out×dim] predictions, got " +
                         shape_str(predictions.shape()));
  const std::size_t in = predictions.dim(0), out_n = predictions.dim(1), d = predictions.dim(2);
  const auto u_hat = predictions.data();

  RoutingState state;
  state.iterations = iterations;
  std::vector<double> b(in * out_n, 0.0), c;

  if (trace != nullptr && trace->mode == RoutingTrace::Mode::kReplay) {
    if (trace->cursor >= trace->couplings.size())
      throw ContractError("routing: trace exhausted during replay");
    const Tensor& frozen = trace->couplings[trace->cursor++];
    if (frozen.shape() != Shape{in, out_n})
      throw DimensionError("routing: replayed couplings have shape " + shape_str(frozen.shape()));
    c.assign(frozen.data().begin(), frozen.data().end());
    state.history.push_back(frozen.detach());
  } else {
    std::vector<double> s(out_n * d), v;
    for (std::size_t it = 1;; ++it) {
      softmax_rows_inplace(b, in, out_n, c);
      state.history.push_back(Tensor({in, out_n}, c));
      if (it == iterations) break;
      std::fill(s.begin(), s.end(), 0.0);
      for (std::size_t i = 0; i < in; ++i)
        for (std::size_t j = 0; j < out_n; ++j)
          for (std::size_t a = 0; a < d; ++a)
            s[j * d + a] += c[i * out_n + j] * u_hat[(i * out_n + j) * d + a];
      for (std::size_t j = 0; j < out_n; ++j) {
        v = squash(std::span<const double>(s).subspan(j * d, d));
        for (std::size_t i = 0; i < in; ++i) {
          double agreement = 0.0;
          for (std::size_t a = 0; a < d; ++a) agreement += u_hat[(i * out_n + j) * d + a] * v[a];
          b[i * out_n + j] += agreement;
        }
      }
    }
    if (trace != nullptr) trace->couplings.push_back(Tensor({in, out_n}, c));
  }

  state.logits = Tensor({in, out_n}, b);
  state.couplings = Tensor({in, out_n}, c);
  Tensor outputs = squash_rows(couple(predictions, std::move(c)));
  return {CapsuleStack{outputs}, std::move(state)};
}

RoutingResult capsule_layer(const CapsuleStack& input, const Tensor& weights,
                            std::size_t iterations, RoutingTrace* trace) {
  if (iterations < 1) throw ConfigError("capsule_layer: iterations must be at least 1");
  return routing(capsule_predictions(input, weights), iterations, trace);
}

Tensor margin_loss(const Tensor& norms, std::size_t target, const MarginLossConfig& config) {
  if (norms.rank() != 1) throw DimensionError("margin_loss: expected per-class norms");
  const std::size_t k = norms.dim(0);
  if (target >= k) throw ContractError("margin_loss: target class out of range");
  config.validate(k);
  for (double n : norms.data())
    if (!(n >= 0.0 && n < 1.0))
      throw ContractError("margin_loss: capsule norm " + std::to_string(n) + " outside [0,1)");
  double loss = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j == target) {
      const double h = std::max(0.0, config.m_plus - norms[j]);
      loss += config.weight(j) * h * h;
    } else {
      const double h = std::max(0.0, norms[j] - config.m_minus);
      loss += config.lambda_neg * config.weight(j) * h * h;
    }
  }
  return finish("margin_loss", Tensor::scalar(loss), {&norms}, [&]() {
    return [norms, target, config, k](std::span<const double> g) mutable {
      auto gn = norms.grad_buffer();
      for (std::size_t j = 0; j < k; ++j) {
        if (j == target) {
          const double h = std::max(0.0, config.m_plus - norms[j]);
          gn[j] += -2.0 * config.weight(j) * h * g[0];
        } else {
          const double h = std::max(0.0, norms[j] - config.m_minus);
          gn[j] += 2.0 * config.lambda_neg * config.weight(j) * h * g[0];
        }
      }
    };
  });
}

std::vector<double> inverse_frequency_weights(std::span<const int> labels, std::size_t classes) {
  std::vector<double> counts(classes, 0.0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw DataError("class label " + std::to_string(l) + " out of range");
    counts[static_cast<std::size_t>(l)] += 1.0;
  }
  std::vector<double> w(classes);
  double total = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    if (counts[k] == 0.0) throw DataError("class " + std::to_string(k) + " has no samples");
    w[k] = 1.0 / counts[k];
    total += w[k];
  }
  for (auto& x : w) x *= static_cast<double>(classes) / total;
  return w;
}

}  // namespace capsct
