#include "capsct/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include <Eigen/Dense>

#include "op_support.hpp"

namespace capsct {

using detail::finish;
using detail::finish_many;
using detail::shapes_str;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shapes_str(a, b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMatrix> as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
Eigen::Map<const RowMatrix> as_matrix(std::span<const double> v, std::size_t rows,
                                      std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
Eigen::Map<const RowMatrix> as_matrix(const std::vector<double>& v, std::size_t rows,
                                      std::size_t cols) {
  return as_matrix(std::span<const double>(v), rows, cols);
}

// Output-column range [lo, hi) for which ox*stride + offset lies in [0, extent).
void valid_range(std::size_t out_extent, std::size_t stride, long offset, std::size_t extent,
                 std::size_t& lo, std::size_t& hi) {
  long l = 0;
  if (offset < 0) l = (-offset + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long h = (static_cast<long>(extent) - 1 - offset);
  if (h < 0) {
    lo = hi = 0;
    return;
  }
  h = h / static_cast<long>(stride) + 1;
  lo = static_cast<std::size_t>(std::min<long>(l, static_cast<long>(out_extent)));
  hi = static_cast<std::size_t>(std::min<long>(h, static_cast<long>(out_extent)));
  if (hi < lo) hi = lo;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shapes_str(a, b));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  as_matrix(out.mutable_data(), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return finish("matmul", out, {&a, &b}, [=]() {
    return [a, b, m, k, n](std::span<const double> g) mutable {
      const auto gm = as_matrix(g, m, n);
      if (a.requires_grad())
        as_matrix(a.grad_buffer(), m, k).noalias() += gm * as_matrix(b.data(), k, n).transpose();
      if (b.requires_grad())
        as_matrix(b.grad_buffer(), k, n).noalias() += as_matrix(a.data(), m, k).transpose() * gm;
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  return finish("add", out, {&a, &b}, [=]() {
    return [a, b](std::span<const double> g) mutable {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  return finish("sub", out, {&a, &b}, [=]() {
    return [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  return finish("mul", out, {&a, &b}, [=]() {
    return [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    };
  });
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  return finish("scale", out, {&x}, [=]() {
    return [x, factor](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    };
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("add_bias: shape mismatch " + shapes_str(x, bias));
  const std::size_t n = x.dim(0), f = x.dim(1);
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) o[i * f + j] = x[i * f + j] + bias[j];
  return finish("add_bias", out, {&x, &bias}, [=]() {
    return [x, bias, n, f](std::span<const double> g) mutable {
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < f; ++j) gb[j] += g[i * f + j];
      }
    };
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", x, 3);
  if (bias.rank() != 1 || bias.dim(0) != x.dim(0))
    throw DimensionError("add_channel_bias: shape mismatch " + shapes_str(x, bias));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) o[ch * hw + i] = x[ch * hw + i] + bias[ch];
  return finish("add_channel_bias", out, {&x, &bias}, [=]() {
    return [x, bias, c, hw](std::span<const double> g) mutable {
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += g[ch * hw + i];
          gb[ch] += acc;
        }
      }
    };
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  return finish("reshape", out, {&x}, [=]() {
    return [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  });
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  return finish("relu", out, {&x}, [=]() {
    return [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) gx[i] += g[i];
    };
  });
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return finish("sigmoid", out, {&x}, [=]() {
    return [x, out](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (1.0 - out[i]);
    };
  });
}

Tensor square(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * x[i];
  return finish("square", out, {&x}, [=]() {
    return [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * x[i] * g[i];
    };
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return finish("sum", Tensor::scalar(acc), {&x}, [=]() {
    return [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (auto& v : gx) v += g[0];
    };
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax_axis: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        o[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) o[base + k * inner] /= z;
    }
  return finish("softmax_axis", out, {&x}, [=]() {
    return [x, out, outer, inner, len](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t b = 0; b < inner; ++b) {
          const std::size_t base = a * len * inner + b;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * out[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += out[i] * (g[i] - dot);
          }
        }
    };
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()));
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw ContractError("softmax_cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(logits[i * c + j] - mx) / z;
    loss += -(logits[i * c + targets[i]] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  return finish("softmax_cross_entropy", Tensor::scalar(loss), {&logits}, [&]() {
    return [logits, probs = std::move(probs), targets, n, c](std::span<const double> g) mutable {
      auto gl = logits.grad_buffer();
      const double s = g[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0;
          gl[i * c + j] += s * (probs[i * c + j] - onehot);
        }
    };
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t padding) {
  require_rank("conv2d", input, 3);
  require_rank("conv2d", kernels, 4);
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin)
    throw DimensionError("conv2d: kernel channels do not match input " +
                         shapes_str(input, kernels));
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw DimensionError("conv2d: kernel larger than padded input " + shapes_str(input, kernels));
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
  const long pad = static_cast<long>(padding);

  const std::size_t taps = cin * kh * kw, positions = oh * ow;

  // im2col: column block [taps x positions], zero where the tap falls into padding.
  auto cols = std::make_shared<std::vector<double>>(taps * positions, 0.0);
  {
    const double* in = input.data().data();
    double* c = cols->data();
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          std::size_t x_lo, x_hi, y_lo, y_hi;
          valid_range(ow, stride, static_cast<long>(kx) - pad, w, x_lo, x_hi);
          valid_range(oh, stride, static_cast<long>(ky) - pad, h, y_lo, y_hi);
          double* row = c + ((ci * kh + ky) * kw + kx) * positions;
          for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
            const std::size_t iy = oy * stride + ky - padding;
            const long base = static_cast<long>(ci * h * w + iy * w + kx) - pad;
            for (std::size_t ox = x_lo; ox < x_hi; ++ox)
              row[oy * ow + ox] = in[base + static_cast<long>(ox * stride)];
          }
        }
  }
  Tensor out({cout, oh, ow});
  as_matrix(out.mutable_data(), cout, positions).noalias() =
      as_matrix(kernels.data(), cout, taps) * as_matrix(*cols, taps, positions);

  return finish("conv2d", out, {&input, &kernels}, [=]() {
    return [input, kernels, cols, cin, h, w, kh, kw, oh, ow, stride, pad, taps,
            positions](std::span<const double> g) mutable {
      const auto gm = as_matrix(g, kernels.dim(0), positions);
      if (kernels.requires_grad())
        as_matrix(kernels.grad_buffer(), kernels.dim(0), taps).noalias() +=
            gm * as_matrix(*cols, taps, positions).transpose();
      if (input.requires_grad()) {
        RowMatrix dcol = as_matrix(kernels.data(), kernels.dim(0), taps).transpose() * gm;
        double* gi = input.grad_buffer().data();
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              std::size_t x_lo, x_hi, y_lo, y_hi;
              valid_range(ow, stride, static_cast<long>(kx) - pad, w, x_lo, x_hi);
              valid_range(oh, stride, static_cast<long>(ky) - pad, h, y_lo, y_hi);
              const double* row = dcol.data() + ((ci * kh + ky) * kw + kx) * positions;
              for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
                const std::size_t iy = oy * stride + ky - static_cast<std::size_t>(pad);
                const long base = static_cast<long>(ci * h * w + iy * w + kx) - pad;
                for (std::size_t ox = x_lo; ox < x_hi; ++ox)
                  gi[base + static_cast<long>(ox * stride)] += row[oy * ow + ox];
              }
            }
      }
    };
  });
}

Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  require_rank("maxpool2d", input, 3);
  if (window == 0 || stride == 0) throw ConfigError("maxpool2d: window and stride must be positive");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (window > h || window > w)
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                         shape_str(input.shape()));
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  Tensor out({c, oh, ow});
  auto o = out.mutable_data();
  std::vector<std::size_t> argmax(o.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = ch * h * w + oy * stride * w + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
            if (input[idx] > input[best]) best = idx;
          }
        const std::size_t oi = (ch * oh + oy) * ow + ox;
        o[oi] = input[best];
        argmax[oi] = best;
      }
  return finish("maxpool2d", out, {&input}, [&]() {
    return [input, argmax = std::move(argmax)](std::span<const double> g) mutable {
      auto gi = input.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gi[argmax[i]] += g[i];
    };
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank("concat_channels", a, 3);
  require_rank("concat_channels", b, 3);
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_channels: spatial extents differ " + shapes_str(a, b));
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  auto o = out.mutable_data();
  std::copy(a.data().begin(), a.data().end(), o.begin());
  std::copy(b.data().begin(), b.data().end(), o.begin() + static_cast<long>(a.numel()));
  return finish("concat_channels", out, {&a, &b}, [=]() {
    return [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        const std::size_t off = a.numel();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
      }
    };
  });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                 RunningStats stats, double epsilon, double momentum) {
  require_rank("batchnorm", x, 2);
  const std::size_t n = x.dim(0), f = x.dim(1);
  if (gamma.shape() != Shape{f} || beta.shape() != Shape{f})
    throw DimensionError("batchnorm: affine parameters do not match " + shape_str(x.shape()));
  if (stats.mean.size() != f || stats.var.size() != f)
    throw DimensionError("batchnorm: running statistics have wrong length");
  if (mode == Mode::kTrain && n < 2)
    throw DataError("batchnorm: train mode needs a batch of at least 2, got " + std::to_string(n));

  std::vector<double> mu(f, 0.0), inv_std(f, 0.0);
  if (mode == Mode::kTrain) {
    std::vector<double> var(f, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) mu[j] += x[i * f + j];
    for (auto& m : mu) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const double d = x[i * f + j] - mu[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < f; ++j) {
      var[j] /= static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(var[j] + epsilon);
      stats.mean[j] = momentum * stats.mean[j] + (1.0 - momentum) * mu[j];
      stats.var[j] = momentum * stats.var[j] + (1.0 - momentum) * var[j];
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = stats.mean[j];
      inv_std[j] = 1.0 / std::sqrt(stats.var[j] + epsilon);
    }
  }
  std::vector<double> xhat(n * f);
  Tensor out({n, f});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double v = (x[i * f + j] - mu[j]) * inv_std[j];
      xhat[i * f + j] = v;
      o[i * f + j] = gamma[j] * v + beta[j];
    }
  return finish("batchnorm", out, {&x, &gamma, &beta}, [&]() {
    return [x, gamma, beta, mode, n, f, inv_std = std::move(inv_std),
            xhat = std::move(xhat)](std::span<const double> g) mutable {
      if (gamma.requires_grad()) {
        auto gg = gamma.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < f; ++j) gg[j] += g[i * f + j] * xhat[i * f + j];
      }
      if (beta.requires_grad()) {
        auto gb = beta.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < f; ++j) gb[j] += g[i * f + j];
      }
      if (!x.requires_grad()) return;
      auto gx = x.grad_buffer();
      if (mode == Mode::kInfer) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < f; ++j) gx[i * f + j] += g[i * f + j] * gamma[j] * inv_std[j];
        return;
      }
      std::vector<double> mean_g(f, 0.0), mean_gx(f, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) {
          mean_g[j] += g[i * f + j];
          mean_gx[j] += g[i * f + j] * xhat[i * f + j];
        }
      for (std::size_t j = 0; j < f; ++j) {
        mean_g[j] /= static_cast<double>(n);
        mean_gx[j] /= static_cast<double>(n);
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j)
          gx[i * f + j] += gamma[j] * inv_std[j] *
                           (g[i * f + j] - mean_g[j] - xhat[i * f + j] * mean_gx[j]);
    };
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t f = rows.front().numel();
  std::vector<double> values;
  values.reserve(rows.size() * f);
  for (const auto& r : rows) {
    if (r.shape() != rows.front().shape())
      throw DimensionError("stack_rows: shape mismatch " + shapes_str(rows.front(), r));
    values.insert(values.end(), r.data().begin(), r.data().end());
  }
  Tensor out({rows.size(), f}, std::move(values));
  return finish_many("stack_rows", out, rows, [&]() {
    return [rows, f](std::span<const double> g) mutable {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].requires_grad()) continue;
        auto gr = rows[i].grad_buffer();
        for (std::size_t j = 0; j < f; ++j) gr[j] += g[i * f + j];
      }
    };
  });
}

Tensor select_row(const Tensor& x, std::size_t index) {
  require_rank("select_row", x, 2);
  if (index >= x.dim(0))
    throw DimensionError("select_row: row " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
  const std::size_t f = x.dim(1);
  auto d = x.data();
  Tensor out({f}, std::vector<double>(d.begin() + static_cast<long>(index * f),
                                      d.begin() + static_cast<long>((index + 1) * f)));
  return finish("select_row", out, {&x}, [=]() {
    return [x, index, f](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t j = 0; j < f; ++j) gx[index * f + j] += g[j];
    };
  });
}

Tensor channel_rows(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw DimensionError("channel_rows: no maps");
  const Shape& s = maps.front().shape();
  if (s.size() != 3) throw DimensionError("channel_rows: expected [C×H×W], got " + shape_str(s));
  const std::size_t c = s[0], hw = s[1] * s[2];
  Tensor out({maps.size() * hw, c});
  auto o = out.mutable_data();
  for (std::size_t n = 0; n < maps.size(); ++n) {
    if (maps[n].shape() != s)
      throw DimensionError("channel_rows: shape mismatch " + shapes_str(maps.front(), maps[n]));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) o[(n * hw + p) * c + ch] = maps[n][ch * hw + p];
  }
  return finish_many("channel_rows", out, maps, [&]() {
    return [maps, c, hw](std::span<const double> g) mutable {
      for (std::size_t n = 0; n < maps.size(); ++n) {
        if (!maps[n].requires_grad()) continue;
        auto gm = maps[n].grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) gm[ch * hw + p] += g[(n * hw + p) * c + ch];
      }
    };
  });
}

Tensor channel_rows_block(const Tensor& rows, std::size_t index, std::size_t height,
                          std::size_t width) {
  require_rank("channel_rows_block", rows, 2);
  const std::size_t c = rows.dim(1), hw = height * width;
  if ((index + 1) * hw > rows.dim(0))
    throw DimensionError("channel_rows_block: block out of range for " + shape_str(rows.shape()));
  Tensor out({c, height, width});
  auto o = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) o[ch * hw + p] = rows[(index * hw + p) * c + ch];
  return finish("channel_rows_block", out, {&rows}, [=]() {
    return [rows, index, c, hw](std::span<const double> g) mutable {
      auto gr = rows.grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) gr[(index * hw + p) * c + ch] += g[ch * hw + p];
    };
  });
}

Tensor max_over_rows(const Tensor& x) {
  require_rank("max_over_rows", x, 2);
  const std::size_t k = x.dim(0), c = x.dim(1);
  Tensor out({c});
  auto o = out.mutable_data();
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 1; i < k; ++i)
      if (x[i * c + j] > x[arg[j] * c + j]) arg[j] = i;
    o[j] = x[arg[j] * c + j];
  }
  return finish("max_over_rows", out, {&x}, [&]() {
    return [x, c, arg = std::move(arg)](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t j = 0; j < c; ++j) gx[arg[j] * c + j] += g[j];
    };
  });
}

Tensor row_norms(const Tensor& x) {
  require_rank("row_norms", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out({n});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    o[i] = std::sqrt(s);
  }
  return finish("row_norms", out, {&x}, [=]() {
    return [x, out, n, d](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        if (out[i] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i] * x[i * d + j] / out[i];
      }
    };
  });
}

Tensor normalize_sum(const Tensor& x) {
  require_rank("normalize_sum", x, 1);
  const std::size_t n = x.dim(0);
  double total = 0.0;
  for (double v : x.data()) {
    if (v < 0.0) throw ContractError("normalize_sum: negative entry");
    total += v;
  }
  Tensor out({n}, total > 0.0 ? 0.0 : 1.0 / static_cast<double>(n));
  if (total > 0.0)
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = x[i] / total;
  return finish("normalize_sum", out, {&x}, [=]() {
    return [x, out, total, n](std::span<const double> g) mutable {
      if (total == 0.0) return;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * out[i];
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gx[i] += (g[i] - dot) / total;
    };
  });
}

}  // namespace capsct
