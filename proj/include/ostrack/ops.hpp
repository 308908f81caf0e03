#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ostrack/tensor.hpp"

namespace ostrack {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

/// Adds `src` into the gradient of `node` if it participates in differentiation.
template <class T>
void add_grad(const NodePtr<T>& node, std::span<const T> src) {
  if (!node->requires_grad) return;
  auto& g = node->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m×k] · b[k×n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dims differ " + to_string(a.shape()) + " · " + to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::MapMat<T>(out.data(), m, n).noalias() =
      detail::ConstMapMat<T>(a.data().data(), m, k) * detail::ConstMapMat<T>(b.data().data(), k, n);
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_result<T>({m, n}, std::move(out), "matmul", tape != nullptr);
  if (tape) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record("matmul", {an, bn}, on, [an, bn, on, m, k, n] {
      detail::ConstMapMat<T> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        detail::MapMat<T>(an->ensure_grad().data(), m, k).noalias() +=
            g * detail::ConstMapMat<T>(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        detail::MapMat<T>(bn->ensure_grad().data(), k, n).noalias() +=
            detail::ConstMapMat<T>(an->data.data(), m, k).transpose() * g;
      }
    });
  }
  return result;
}

/// a[m×k] · b[n×k]ᵀ
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dims differ " + to_string(a.shape()) + " · " + to_string(b.shape()) + "ᵀ");
  }
  std::vector<T> out(m * n);
  detail::MapMat<T>(out.data(), m, n).noalias() =
      detail::ConstMapMat<T>(a.data().data(), m, k) * detail::ConstMapMat<T>(b.data().data(), n, k).transpose();
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_result<T>({m, n}, std::move(out), "matmul_nt", tape != nullptr);
  if (tape) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record("matmul_nt", {an, bn}, on, [an, bn, on, m, k, n] {
      detail::ConstMapMat<T> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        detail::MapMat<T>(an->ensure_grad().data(), m, k).noalias() +=
            g * detail::ConstMapMat<T>(bn->data.data(), n, k);
      }
      if (bn->requires_grad) {
        detail::MapMat<T>(bn->ensure_grad().data(), n, k).noalias() +=
            g.transpose() * detail::ConstMapMat<T>(an->data.data(), m, k);
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto* tape = detail::recording_tape<T>({&a});
  auto result = detail::make_result<T>({c, r}, std::move(out), "transpose", tape != nullptr);
  if (tape) {
    auto an = a.node(), on = result.node();
    tape->record("transpose", {an}, on, [an, on, r, c] {
      if (!an->requires_grad) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += on->grad[j * r + i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_result<T>(a.shape(), std::move(out), "add", tape != nullptr);
  if (tape) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record("add", {an, bn}, on, [an, bn, on] {
      detail::add_grad<T>(an, on->grad);
      detail::add_grad<T>(bn, on->grad);
    });
  }
  return result;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_result<T>(a.shape(), std::move(out), "sub", tape != nullptr);
  if (tape) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record("sub", {an, bn}, on, [an, bn, on] {
      detail::add_grad<T>(an, on->grad);
      if (!bn->requires_grad) return;
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
    });
  }
  return result;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_result<T>(a.shape(), std::move(out), "mul", tape != nullptr);
  if (tape) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record("mul", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto* tape = detail::recording_tape<T>({&a});
  auto result = detail::make_result<T>(a.shape(), std::move(out), "scale", tape != nullptr);
  if (tape) {
    auto an = a.node(), on = result.node();
    tape->record("scale", {an}, on, [an, on, s] {
      if (!an->requires_grad) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * s;
    });
  }
  return result;
}

/// x[N×C] + b[C] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_rank(x, 2, "add_bias");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (b.size() != cols) throw DimensionError("add_bias: bias length " + std::to_string(b.size()) + " vs " + std::to_string(cols));
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + b[c];
  auto* tape = detail::recording_tape<T>({&x, &b});
  auto result = detail::make_result<T>(x.shape(), std::move(out), "add_bias", tape != nullptr);
  if (tape) {
    auto xn = x.node(), bn = b.node(), on = result.node();
    tape->record("add_bias", {xn, bn}, on, [xn, bn, on, rows, cols] {
      detail::add_grad<T>(xn, on->grad);
      if (!bn->requires_grad) return;
      auto& g = bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += on->grad[r * cols + c];
    });
  }
  return result;
}

/// x·w + b for x[N×in], w[in×out], b[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

namespace detail {

/// Elementwise unary op with a derivative expressed through input and output values.
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& a, std::string_view name, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
  auto* tape = recording_tape<T>({&a});
  auto result = make_result<T>(a.shape(), std::move(out), name, tape != nullptr);
  if (tape) {
    auto an = a.node(), on = result.node();
    tape->record(name, {an}, on, [an, on, deriv] {
      if (!an->requires_grad) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * deriv(an->data[i], on->data[i]);
    });
  }
  return result;
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a, "gelu",
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

/// Natural log; non-positive inputs produce a NumericError.
template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(
      a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (const T v : a.data()) total += v;
  auto* tape = detail::recording_tape<T>({&a});
  auto result = detail::make_result<T>({1}, {total}, "sum", tape != nullptr);
  if (tape) {
    auto an = a.node(), on = result.node();
    tape->record("sum", {an}, on, [an, on] {
      if (!an->requires_grad) return;
      auto& g = an->ensure_grad();
      for (auto& v : g) v += on->grad[0];
    });
  }
  return result;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ContractError("softmax axis " + std::to_string(axis) + " out of range");
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class T>
void softmax_backward(const NodePtr<T>& an, const NodePtr<T>& on, AxisSplit s) {
  if (!an->requires_grad) return;
  auto& g = an->ensure_grad();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T dot = T(0);
      for (std::size_t j = 0; j < s.len; ++j) {
        const auto idx = base + j * s.inner;
        dot += on->grad[idx] * on->data[idx];
      }
      for (std::size_t j = 0; j < s.len; ++j) {
        const auto idx = base + j * s.inner;
        g[idx] += on->data[idx] * (on->grad[idx] - dot);
      }
    }
  }
}

}  // namespace detail

/// Numerically stable softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<T> out(a.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, a[base + j * s.inner]);
      T total = T(0);
      for (std::size_t j = 0; j < s.len; ++j) {
        const T e = std::exp(a[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  }
  auto* tape = detail::recording_tape<T>({&a});
  auto result = detail::make_result<T>(a.shape(), std::move(out), "softmax", tape != nullptr);
  if (tape) {
    auto an = a.node(), on = result.node();
    tape->record("softmax", {an}, on, [an, on, s] { detail::softmax_backward<T>(an, on, s); });
  }
  return result;
}

/// Row softmax of a square score matrix where entries crossing the `split` boundary
/// (row < split xor col < split) are excluded, i.e. receive weight exactly 0.
template <class T>
Tensor<T> block_masked_softmax(const Tensor<T>& a, std::size_t split) {
  detail::require_rank(a, 2, "block_masked_softmax");
  const auto n = a.dim(0);
  if (a.dim(1) != n) throw DimensionError("block_masked_softmax needs a square matrix");
  std::vector<T> out(a.size(), T(0));
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t lo = r < split ? 0 : split;
    const std::size_t hi = r < split ? split : n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = lo; c < hi; ++c) mx = std::max(mx, a[r * n + c]);
    T total = T(0);
    for (std::size_t c = lo; c < hi; ++c) {
      const T e = std::exp(a[r * n + c] - mx);
      out[r * n + c] = e;
      total += e;
    }
    for (std::size_t c = lo; c < hi; ++c) out[r * n + c] /= total;
  }
  auto* tape = detail::recording_tape<T>({&a});
  auto result = detail::make_result<T>(a.shape(), std::move(out), "block_masked_softmax", tape != nullptr);
  if (tape) {
    auto an = a.node(), on = result.node();
    // Masked outputs are constant zero, so the plain softmax rule restricted to them contributes nothing.
    tape->record("block_masked_softmax", {an}, on,
                 [an, on, n] { detail::softmax_backward<T>(an, on, detail::AxisSplit{n, n, 1}); });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-row normalization over the last dim followed by the gamma/beta affine.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() == 0) throw DimensionError("layer_norm on rank-0 tensor");
  const auto d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: gamma/beta must match last dim");
  const auto rows = x.size() / d;
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma[j] + beta[j];
    }
  }
  auto* tape = detail::recording_tape<T>({&x, &gamma, &beta});
  auto result = detail::make_result<T>(x.shape(), std::move(out), "layer_norm", tape != nullptr);
  if (tape) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
    tape->record("layer_norm", {xn, gn, bn}, on,
                 [xn, gn, bn, on, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
                   const auto& go = on->grad;
                   if (gn->requires_grad || bn->requires_grad) {
                     auto* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                     auto* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) {
                         if (gg) gg[j] += go[r * d + j] * xhat[r * d + j];
                         if (gb) gb[j] += go[r * d + j];
                       }
                   }
                   if (!xn->requires_grad) return;
                   auto& gx = xn->ensure_grad();
                   const T inv_d = T(1) / static_cast<T>(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     T s1 = T(0), s2 = T(0);
                     for (std::size_t j = 0; j < d; ++j) {
                       const T dh = go[r * d + j] * gn->data[j];
                       s1 += dh;
                       s2 += dh * xhat[r * d + j];
                     }
                     for (std::size_t j = 0; j < d; ++j) {
                       const T dh = go[r * d + j] * gn->data[j];
                       gx[r * d + j] += inv_std[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                     }
                   }
                 });
  }
  return result;
}

/// Running statistics for batch_norm. Unset until the first train-mode call or reset().
template <class T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
  T momentum = T(0.1);
  bool initialized = false;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels) : mean(channels, T(0)), var(channels, T(1)) {}

  void reset() {
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(1));
    initialized = true;
  }
};

enum class NormMode { Train, Eval };

/// Per-channel normalization of x[C×H×W] or x[B×C×H×W].
/// Train mode normalizes with batch statistics (biased variance) and folds them into the
/// running statistics with the unbiased variance; eval mode uses the running statistics.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormStats<T>& stats, const Tensor<T>& gamma, const Tensor<T>& beta,
                     NormMode mode, T eps = T(1e-5)) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("batch_norm expects C×H×W or B×C×H×W, got " + to_string(x.shape()));
  const std::size_t batch = x.rank() == 4 ? x.dim(0) : 1;
  const std::size_t channels = x.dim(x.rank() - 3);
  const std::size_t plane = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  if (stats.mean.size() != channels || stats.var.size() != channels || gamma.size() != channels ||
      beta.size() != channels) {
    throw DimensionError("batch_norm: per-channel parameters do not match " + std::to_string(channels) + " channels");
  }
  const std::size_t count = batch * plane;
  std::vector<T> mu(channels), inv_std(channels);
  if (mode == NormMode::Train) {
    if (!stats.initialized) stats.reset();
    for (std::size_t c = 0; c < channels; ++c) {
      T m = T(0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < plane; ++p) m += x[(b * channels + c) * plane + p];
      m /= static_cast<T>(count);
      T v = T(0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const T dlt = x[(b * channels + c) * plane + p] - m;
          v += dlt * dlt;
        }
      const T biased = v / static_cast<T>(count);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : biased;
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(biased + eps);
      stats.mean[c] = (T(1) - stats.momentum) * stats.mean[c] + stats.momentum * m;
      stats.var[c] = (T(1) - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    }
  } else {
    if (!stats.initialized) throw StateError("batch_norm eval mode with uninitialized running statistics");
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = stats.mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
  }
  std::vector<T> out(x.size()), xhat(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const auto i = (b * channels + c) * plane + p;
        xhat[i] = (x[i] - mu[c]) * inv_std[c];
        out[i] = xhat[i] * gamma[c] + beta[c];
      }
  auto* tape = detail::recording_tape<T>({&x, &gamma, &beta});
  auto result = detail::make_result<T>(x.shape(), std::move(out), "batch_norm", tape != nullptr);
  if (tape) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
    const bool train = mode == NormMode::Train;
    tape->record("batch_norm", {xn, gn, bn}, on,
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                   const auto& go = on->grad;
                   std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t c = 0; c < channels; ++c)
                       for (std::size_t p = 0; p < plane; ++p) {
                         const auto i = (b * channels + c) * plane + p;
                         sum_g[c] += go[i];
                         sum_gx[c] += go[i] * xhat[i];
                       }
                   if (gn->requires_grad) {
                     auto& g = gn->ensure_grad();
                     for (std::size_t c = 0; c < channels; ++c) g[c] += sum_gx[c];
                   }
                   if (bn->requires_grad) {
                     auto& g = bn->ensure_grad();
                     for (std::size_t c = 0; c < channels; ++c) g[c] += sum_g[c];
                   }
                   if (!xn->requires_grad) return;
                   auto& gx = xn->ensure_grad();
                   const T inv_n = T(1) / static_cast<T>(count);
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t c = 0; c < channels; ++c)
                       for (std::size_t p = 0; p < plane; ++p) {
                         const auto i = (b * channels + c) * plane + p;
                         const T scale_c = gn->data[c] * inv_std[c];
                         gx[i] += train ? scale_c * (go[i] - inv_n * sum_g[c] - xhat[i] * inv_n * sum_gx[c])
                                        : scale_c * go[i];
                       }
                 });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution

/// Stride-1 convolution with odd square kernel k and zero padding k/2, so spatial dims
/// are preserved. x is C×H×W or B×C×H×W; w is C'×C×k×k; b has C' entries.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("conv2d expects C×H×W or B×C×H×W, got " + to_string(x.shape()));
  detail::require_rank(w, 4, "conv2d weight");
  const bool batched = x.rank() == 4;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t cin = x.dim(x.rank() - 3), h = x.dim(x.rank() - 2), wd = x.dim(x.rank() - 1);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) {
    throw DimensionError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                         std::to_string(cin));
  }
  if (w.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be odd and square");
  if (b.size() != cout) throw DimensionError("conv2d: bias length must equal output channels");
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t plane = h * wd, ck = cin * k * k;

  // im2col per batch item: cols[ck × plane]
  std::vector<T> cols(batch * ck * plane, T(0));
  for (std::size_t bi = 0; bi < batch; ++bi) {
    T* col = cols.data() + bi * ck * plane;
    const T* src = x.data().data() + bi * cin * plane;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t row = (c * k + ky) * k + kx;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - pad;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t xx = 0; xx < wd; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + static_cast<std::ptrdiff_t>(kx) - pad;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
              col[row * plane + y * wd + xx] = src[c * plane + sy * wd + sx];
            }
          }
        }
  }
  std::vector<T> out(batch * cout * plane);
  detail::ConstMapMat<T> wm(w.data().data(), cout, ck);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::MapMat<T> om(out.data() + bi * cout * plane, cout, plane);
    om.noalias() = wm * detail::ConstMapMat<T>(cols.data() + bi * ck * plane, ck, plane);
    for (std::size_t o = 0; o < cout; ++o) om.row(o).array() += b[o];
  }
  Shape shape = batched ? Shape{batch, cout, h, wd} : Shape{cout, h, wd};
  auto* tape = detail::recording_tape<T>({&x, &w, &b});
  auto result = detail::make_result<T>(std::move(shape), std::move(out), "conv2d", tape != nullptr);
  if (tape) {
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = result.node();
    tape->record("conv2d", {xn, wn, bn}, on, [=, cols = std::move(cols)] {
      for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::ConstMapMat<T> g(on->grad.data() + bi * cout * plane, cout, plane);
        if (wn->requires_grad) {
          detail::MapMat<T>(wn->ensure_grad().data(), cout, ck).noalias() +=
              g * detail::ConstMapMat<T>(cols.data() + bi * ck * plane, ck, plane).transpose();
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::size_t o = 0; o < cout; ++o) gb[o] += g.row(o).sum();
        }
        if (xn->requires_grad) {
          detail::RowMat<T> dcols = detail::ConstMapMat<T>(wn->data.data(), cout, ck).transpose() * g;
          auto& gx = xn->ensure_grad();
          T* dst = gx.data() + bi * cin * plane;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t row = (c * k + ky) * k + kx;
                for (std::size_t y = 0; y < h; ++y) {
                  const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - pad;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t xx = 0; xx < wd; ++xx) {
                    const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + static_cast<std::ptrdiff_t>(kx) - pad;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                    dst[c * plane + sy * wd + sx] += dcols(row, y * wd + xx);
                  }
                }
              }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structural ops

/// Columns [begin, end) of a 2D tensor.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_cols");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (begin > end || end > cols) throw DimensionError("slice_cols: range out of bounds");
  const auto w = end - begin;
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + begin, w, out.data() + r * w);
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_result<T>({rows, w}, std::move(out), "slice_cols", tape != nullptr);
  if (tape) {
    auto xn = x.node(), on = result.node();
    tape->record("slice_cols", {xn}, on, [xn, on, rows, cols, begin, w] {
      if (!xn->requires_grad) return;
      auto& g = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += on->grad[r * w + c];
    });
  }
  return result;
}

/// Rows [begin, end) of a 2D tensor.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (begin > end || end > rows) throw DimensionError("slice_rows: range out of bounds");
  std::vector<T> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_result<T>({end - begin, cols}, std::move(out), "slice_rows", tape != nullptr);
  if (tape) {
    auto xn = x.node(), on = result.node();
    tape->record("slice_rows", {xn}, on, [xn, on, begin, cols] {
      if (!xn->requires_grad) return;
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[begin * cols + i] += on->grad[i];
    });
  }
  return result;
}

/// Horizontal concatenation of 2D tensors with equal row counts.
template <class T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const auto rows = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    total += p.dim(1);
  }
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.data().data() + r * w, w, out.data() + r * total + offset);
    offset += w;
  }
  auto* tape = detail::recording_tape<T>(parts);
  auto result = detail::make_result<T>({rows, total}, std::move(out), "concat_cols", tape != nullptr);
  if (tape) {
    std::vector<detail::NodePtr<T>> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = result.node();
    tape->record("concat_cols", ins, on, [ins, on, rows, total] {
      std::size_t off = 0;
      for (const auto& in : ins) {
        const auto w = in->shape[1];
        if (in->requires_grad) {
          auto& g = in->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += on->grad[r * total + off + c];
        }
        off += w;
      }
    });
  }
  return result;
}

/// Vertical concatenation of 2D tensors with equal column counts.
template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) throw DimensionError("concat_rows: column counts differ");
  std::vector<T> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_result<T>({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), "concat_rows", tape != nullptr);
  if (tape) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record("concat_rows", {an, bn}, on, [an, bn, on] {
      const auto na = an->data.size();
      detail::add_grad<T>(an, std::span<const T>(on->grad.data(), na));
      detail::add_grad<T>(bn, std::span<const T>(on->grad.data() + na, bn->data.size()));
    });
  }
  return result;
}

/// Rows of x picked by `index`, in the given order.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  detail::require_rank(x, 2, "gather_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(index.size() * cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.data().data() + index[i] * cols, cols, out.data() + i * cols);
  }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_result<T>({index.size(), cols}, std::move(out), "gather_rows", tape != nullptr);
  if (tape) {
    auto xn = x.node(), on = result.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape->record("gather_rows", {xn}, on, [xn, on, idx = std::move(idx), cols] {
      if (!xn->requires_grad) return;
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < cols; ++c) g[idx[i] * cols + c] += on->grad[i * cols + c];
    });
  }
  return result;
}

/// Output of `total` rows where row index[j] is x's row j and every other row is zero.
/// Indices must be distinct.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> index, std::size_t total) {
  detail::require_rank(x, 2, "scatter_rows");
  const auto cols = x.dim(1);
  if (index.size() != x.dim(0)) throw DimensionError("scatter_rows: one index per row required");
  std::vector<T> out(total * cols, T(0));
  std::vector<bool> seen(total, false);
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= total) throw InvariantError("scatter_rows: index out of range");
    if (seen[index[j]]) throw InvariantError("scatter_rows: duplicate index " + std::to_string(index[j]));
    seen[index[j]] = true;
    std::copy_n(x.data().data() + j * cols, cols, out.data() + index[j] * cols);
  }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_result<T>({total, cols}, std::move(out), "scatter_rows", tape != nullptr);
  if (tape) {
    auto xn = x.node(), on = result.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape->record("scatter_rows", {xn}, on, [xn, on, idx = std::move(idx), cols] {
      if (!xn->requires_grad) return;
      auto& g = xn->ensure_grad();
      for (std::size_t j = 0; j < idx.size(); ++j)
        for (std::size_t c = 0; c < cols; ++c) g[j * cols + c] += on->grad[idx[j] * cols + c];
    });
  }
  return result;
}

/// Stacks same-shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ContractError("stack of nothing");
  const auto& shape0 = parts[0].shape();
  std::vector<T> out;
  out.reserve(parts.size() * parts[0].size());
  for (const auto& p : parts) {
    if (p.shape() != shape0) throw DimensionError("stack: shapes differ");
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), shape0.begin(), shape0.end());
  auto* tape = detail::recording_tape<T>(parts);
  auto result = detail::make_result<T>(std::move(shape), std::move(out), "stack", tape != nullptr);
  if (tape) {
    std::vector<detail::NodePtr<T>> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = result.node();
    tape->record("stack", ins, on, [ins, on] {
      std::size_t off = 0;
      for (const auto& in : ins) {
        const auto n = in->data.size();
        detail::add_grad<T>(in, std::span<const T>(on->grad.data() + off, n));
        off += n;
      }
    });
  }
  return result;
}

/// 1D tensor of the elements at the given flat positions.
template <class T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> flat_index) {
  std::vector<T> out(flat_index.size());
  for (std::size_t i = 0; i < flat_index.size(); ++i) {
    if (flat_index[i] >= x.size()) throw DimensionError("pick: index out of range");
    out[i] = x[flat_index[i]];
  }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_result<T>({flat_index.size()}, std::move(out), "pick", tape != nullptr);
  if (tape) {
    auto xn = x.node(), on = result.node();
    std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
    tape->record("pick", {xn}, on, [xn, on, idx = std::move(idx)] {
      if (!xn->requires_grad) return;
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += on->grad[i];
    });
  }
  return result;
}

/// Weighted sum of scalar tensors: Σ wᵢ·xᵢ.
template <class T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> terms, std::span<const T> weights) {
  if (terms.size() != weights.size()) throw ContractError("weighted_sum: one weight per term");
  T total = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * terms[i].item();
  auto* tape = detail::recording_tape<T>(terms);
  auto result = detail::make_result<T>({1}, {total}, "weighted_sum", tape != nullptr);
  if (tape) {
    std::vector<detail::NodePtr<T>> ins;
    for (const auto& t : terms) ins.push_back(t.node());
    std::vector<T> w(weights.begin(), weights.end());
    auto on = result.node();
    tape->record("weighted_sum", ins, on, [ins, on, w = std::move(w)] {
      for (std::size_t i = 0; i < ins.size(); ++i)
        if (ins[i]->requires_grad) ins[i]->ensure_grad()[0] += w[i] * on->grad[0];
    });
  }
  return result;
}

}  // namespace ostrack
