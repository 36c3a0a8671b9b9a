// Copyright 2026 The r2r Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable operations. Each op computes its forward values eagerly and
// registers an adjoint that adds into the parents' grad buffers.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "r2r/errors.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

namespace debug {
/// Test fixture: when set, the GELU adjoint is deliberately wrong so that the
/// gradient checker can be shown to fail.
inline thread_local bool break_gelu_adjoint = false;
}  // namespace debug

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

inline void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      const double* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T. B is transposed once so the inner loop
// is an axpy; each c[i][j] still accumulates over t in ascending order.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < k; ++t) bt[t * n + j] = b[j * k + t];
  }
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      const double* row = bt.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * row[j];
    }
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += acc[j];
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t t = 0; t < k; ++t) {
    const double* at = a + t * m;
    const double* bt = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = at[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, const char* op) {
  const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) -
                         static_cast<long long>(k);
  if (stride == 0) throw DimensionError(std::string(op) + ": stride must be >= 1");
  if (span < 0) {
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(k) +
                         " exceeds padded input extent " + std::to_string(in + 2 * pad) +
                         ", output extent would be non-positive");
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return detail::make_result(a.shape(), std::move(out), "add", {&a, &b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& in = detail::parent(self, p);
      if (!in.requires_grad) continue;
      in.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result(a.shape(), std::move(out), "mul", {&a, &b}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    auto& y = detail::parent(self, 1);
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      y.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i] += self.grad[i] * x.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), "scale", {&a}, [s](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += s * self.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return detail::make_result(a.shape(), std::move(out), "add_scalar", {&a}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
  });
}

inline Tensor reciprocal(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = 1.0 / v;
  return detail::make_result(a.shape(), std::move(out), "reciprocal", {&a}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      x.grad[i] -= self.grad[i] * self.data[i] * self.data[i];
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = ad[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return detail::make_result(a.shape(), std::move(out), "sigmoid", {&a}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.data[i];
      x.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * ad[i] * (1.0 + std::erf(ad[i] * kInvSqrt2));
  }
  return detail::make_result(a.shape(), std::move(out), "gelu", {&a}, [](detail::Node& self) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto& x = detail::parent(self, 0);
    x.ensure_grad();
    const double fault = debug::break_gelu_adjoint ? 1.5 : 1.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = x.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      x.grad[i] += fault * self.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Broadcasts along the leading axis

/// y[c, ...] = x[c, ...] + b[c]
inline Tensor add_channel(const Tensor& x, const Tensor& b) {
  if (x.rank() < 1 || b.rank() != 1 || b.dim(0) != x.dim(0)) {
    throw DimensionError("add_channel: bias " + to_string(b.shape()) +
                         " does not match leading axis of " + to_string(x.shape()));
  }
  const std::size_t c = x.dim(0);
  const std::size_t inner = c ? x.numel() / c : 0;
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < inner; ++i) out[ch * inner + i] += bd[ch];
  }
  return detail::make_result(
      x.shape(), std::move(out), "add_channel", {&x, &b}, [c, inner](detail::Node& self) {
        auto& in = detail::parent(self, 0);
        auto& bias = detail::parent(self, 1);
        if (in.requires_grad) {
          in.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
        }
        if (bias.requires_grad) {
          bias.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t i = 0; i < inner; ++i) s += self.grad[ch * inner + i];
            bias.grad[ch] += s;
          }
        }
      });
}

/// y[c, ...] = x[c, ...] * s[c]
inline Tensor mul_channel(const Tensor& x, const Tensor& s) {
  if (x.rank() < 1 || s.rank() != 1 || s.dim(0) != x.dim(0)) {
    throw DimensionError("mul_channel: scale " + to_string(s.shape()) +
                         " does not match leading axis of " + to_string(x.shape()));
  }
  const std::size_t c = x.dim(0);
  const std::size_t inner = c ? x.numel() / c : 0;
  std::vector<double> out(x.data().begin(), x.data().end());
  auto sd = s.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < inner; ++i) out[ch * inner + i] *= sd[ch];
  }
  return detail::make_result(
      x.shape(), std::move(out), "mul_channel", {&x, &s}, [c, inner](detail::Node& self) {
        auto& in = detail::parent(self, 0);
        auto& sc = detail::parent(self, 1);
        if (in.requires_grad) {
          in.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < inner; ++i) {
              in.grad[ch * inner + i] += self.grad[ch * inner + i] * sc.data[ch];
            }
          }
        }
        if (sc.requires_grad) {
          sc.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) {
              acc += self.grad[ch * inner + i] * in.data[ch * inner + i];
            }
            sc.grad[ch] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " +
                         to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), "reshape", {&a},
                             [](detail::Node& self) {
                               auto& x = detail::parent(self, 0);
                               x.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 x.grad[i] += self.grad[i];
                               }
                             });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose", "input");
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  auto ad = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  }
  return detail::make_result({n, m}, std::move(out), "transpose", {&a},
                             [m, n](detail::Node& self) {
                               auto& x = detail::parent(self, 0);
                               x.ensure_grad();
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                   x.grad[i * n + j] += self.grad[j * m + i];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// c[i][j] = sum_t a[i][t] * b[t][j]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), "matmul", {&a, &b},
                             [m, k, n](detail::Node& self) {
                               auto& x = detail::parent(self, 0);
                               auto& y = detail::parent(self, 1);
                               if (x.requires_grad) {  // dA = dC * B^T
                                 x.ensure_grad();
                                 detail::gemm_nt(self.grad.data(), y.data.data(), x.grad.data(),
                                                 m, n, k);
                               }
                               if (y.requires_grad) {  // dB = A^T * dC
                                 y.ensure_grad();
                                 detail::gemm_tn(x.data.data(), self.grad.data(), y.grad.data(),
                                                 k, m, n);
                               }
                             });
}

/// c[i][j] = sum_t a[i][t] * b[j][t], i.e. a * b^T without materializing b^T.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(0);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), "matmul_nt", {&a, &b},
                             [m, k, n](detail::Node& self) {
                               auto& x = detail::parent(self, 0);
                               auto& y = detail::parent(self, 1);
                               if (x.requires_grad) {  // dA = dC * B
                                 x.ensure_grad();
                                 detail::gemm_nn(self.grad.data(), y.data.data(), x.grad.data(),
                                                 m, n, k);
                               }
                               if (y.requires_grad) {  // dB = dC^T * A
                                 y.ensure_grad();
                                 detail::gemm_tn(self.grad.data(), x.data.data(), y.grad.data(),
                                                 n, m, k);
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

/// Softmax along `axis`, using max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         to_string(x.shape()));
  }
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  const auto& shape = x.shape();
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * len * inner;
    for (std::size_t in = 0; in < inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xd[base + l * inner + in]);
      double sum = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xd[base + l * inner + in] - mx);
        out[base + l * inner + in] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner + in] *= inv;
    }
  }
  return detail::make_result(
      shape, std::move(out), "softmax", {&x}, [outer, inner, len](detail::Node& self) {
        auto& in_node = detail::parent(self, 0);
        in_node.ensure_grad();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = o * len * inner;
          for (std::size_t in = 0; in < inner; ++in) {
            double dot = 0.0;
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t idx = base + l * inner + in;
              dot += g[idx] * y[idx];
            }
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t idx = base + l * inner + in;
              in_node.grad[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

/// Sums over the listed axes, removing them from the shape.
inline Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank) {
      throw DimensionError("reduce_sum: axis " + std::to_string(a) + " invalid for shape " +
                           to_string(x.shape()));
    }
    if (reduced[a]) throw DimensionError("reduce_sum: axis " + std::to_string(a) + " repeated");
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < rank; ++i) {
    if (!reduced[i]) out_shape.push_back(x.shape()[i]);
  }
  // Output stride of each input axis (0 for reduced axes).
  std::vector<std::size_t> out_stride(rank, 0);
  {
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
      if (!reduced[i]) {
        out_stride[i] = s;
        s *= x.shape()[i];
      }
    }
  }
  auto map_index = [&x, rank, out_stride](std::vector<std::size_t>& map) {
    map.resize(x.numel());
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
      std::size_t o = 0;
      for (std::size_t i = 0; i < rank; ++i) o += idx[i] * out_stride[i];
      map[flat] = o;
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < x.shape()[i]) break;
        idx[i] = 0;
      }
    }
  };
  std::vector<std::size_t> map;
  map_index(map);
  std::vector<double> out(numel(out_shape), 0.0);
  auto xd = x.data();
  for (std::size_t flat = 0; flat < map.size(); ++flat) out[map[flat]] += xd[flat];
  return detail::make_result(std::move(out_shape), std::move(out), "reduce_sum", {&x},
                             [map = std::move(map)](detail::Node& self) {
                               auto& in = detail::parent(self, 0);
                               in.ensure_grad();
                               for (std::size_t flat = 0; flat < map.size(); ++flat) {
                                 in.grad[flat] += self.grad[map[flat]];
                               }
                             });
}

inline Tensor sum(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return reduce_sum(x, axes);
}

/// Normalizes over axis 0 independently at every trailing position, then
/// applies per-channel gamma/beta. x is [c x ...].
inline Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  double eps = 1e-5) {
  if (x.rank() < 1 || gamma.shape() != Shape{x.dim(0)} || beta.shape() != Shape{x.dim(0)}) {
    throw DimensionError("layer_norm_channels: gamma " + to_string(gamma.shape()) + " / beta " +
                         to_string(beta.shape()) + " do not match channels of " +
                         to_string(x.shape()));
  }
  const std::size_t c = x.dim(0);
  const std::size_t n = c ? x.numel() / c : 0;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(n);
  std::vector<double> out(x.numel());
  for (std::size_t p = 0; p < n; ++p) {
    double mean = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mean += xd[ch * n + p];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = xd[ch * n + p] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    rstd[p] = 1.0 / std::sqrt(var + eps);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t idx = ch * n + p;
      xhat[idx] = (xd[idx] - mean) * rstd[p];
      out[idx] = gd[ch] * xhat[idx] + bd[ch];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
      [c, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        auto& in = detail::parent(self, 0);
        auto& g = detail::parent(self, 1);
        auto& b = detail::parent(self, 2);
        const auto& dy = self.grad;
        if (g.requires_grad || b.requires_grad) {
          g.ensure_grad();
          b.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            double sg = 0.0;
            double sb = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
              sg += dy[ch * n + p] * xhat[ch * n + p];
              sb += dy[ch * n + p];
            }
            if (g.requires_grad) g.grad[ch] += sg;
            if (b.requires_grad) b.grad[ch] += sb;
          }
        }
        if (in.requires_grad) {
          in.ensure_grad();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t p = 0; p < n; ++p) {
            double s1 = 0.0;
            double s2 = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double gh = dy[ch * n + p] * g.data[ch];
              s1 += gh;
              s2 += gh * xhat[ch * n + p];
            }
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = ch * n + p;
              const double gh = dy[idx] * g.data[ch];
              in.grad[idx] += rstd[p] * (gh - inv_c * (s1 + xhat[idx] * s2));
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions (zero padding)

namespace detail {

// Unfolds x [c x h x w] into cols [(c*k*k) x (oh*ow)] with zero padding.
inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
                   double* cols) {
  const long long lh = static_cast<long long>(h);
  const long long lw = static_cast<long long>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        double* row = cols + ((ch * k + kh) * k + kw) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long long iy = static_cast<long long>(y * stride + kh) - static_cast<long long>(pad);
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const long long ix =
                static_cast<long long>(xo * stride + kw) - static_cast<long long>(pad);
            row[y * ow + xo] = (iy < 0 || iy >= lh || ix < 0 || ix >= lw)
                                   ? 0.0
                                   : x[(ch * h + static_cast<std::size_t>(iy)) * w +
                                       static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters cols back into gx.
inline void col2im(const double* cols, std::size_t c, std::size_t h, std::size_t w,
                   std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh,
                   std::size_t ow, double* gx) {
  const long long lh = static_cast<long long>(h);
  const long long lw = static_cast<long long>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const double* row = cols + ((ch * k + kh) * k + kw) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long long iy = static_cast<long long>(y * stride + kh) - static_cast<long long>(pad);
          if (iy < 0 || iy >= lh) continue;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const long long ix =
                static_cast<long long>(xo * stride + kw) - static_cast<long long>(pad);
            if (ix < 0 || ix >= lw) continue;
            gx[(ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                row[y * ow + xo];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Dense 2-D convolution: x [ci x h x w], weight [co x ci x k x k].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride,
                     std::size_t padding) {
  detail::require_rank(x, 3, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  const std::size_t ci = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  const std::size_t co = weight.dim(0);
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != ci || weight.dim(3) != k) {
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) +
                         " incompatible with input " + to_string(x.shape()));
  }
  const std::size_t oh = detail::conv_out_extent(h, k, stride, padding, "conv2d");
  const std::size_t ow = detail::conv_out_extent(w, k, stride, padding, "conv2d");
  const std::size_t patch = ci * k * k;
  const std::size_t pixels = oh * ow;
  std::vector<double> cols(patch * pixels);
  detail::im2col(x.data().data(), ci, h, w, k, stride, padding, oh, ow, cols.data());
  std::vector<double> out(co * pixels, 0.0);
  detail::gemm_nn(weight.data().data(), cols.data(), out.data(), co, patch, pixels);
  return detail::make_result(
      {co, oh, ow}, std::move(out), "conv2d", {&x, &weight},
      [=, cols = std::move(cols)](detail::Node& self) {
        auto& in = detail::parent(self, 0);
        auto& wt = detail::parent(self, 1);
        if (wt.requires_grad) {  // dW = dOut * cols^T
          wt.ensure_grad();
          detail::gemm_nt(self.grad.data(), cols.data(), wt.grad.data(), co, pixels, patch);
        }
        if (in.requires_grad) {  // dcols = W^T * dOut, folded back
          in.ensure_grad();
          std::vector<double> dcols(patch * pixels, 0.0);
          detail::gemm_tn(wt.data.data(), self.grad.data(), dcols.data(), patch, co, pixels);
          detail::col2im(dcols.data(), ci, h, w, k, stride, padding, oh, ow, in.grad.data());
        }
      });
}

/// Per-channel 2-D convolution: x [c x h x w], weight [c x k x k].
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, std::size_t stride,
                               std::size_t padding) {
  detail::require_rank(x, 3, "depthwise_conv2d", "input");
  detail::require_rank(weight, 3, "depthwise_conv2d", "weight");
  const std::size_t c = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  const std::size_t k = weight.dim(1);
  if (weight.dim(0) != c || weight.dim(2) != k) {
    throw DimensionError("depthwise_conv2d: weight " + to_string(weight.shape()) +
                         " incompatible with input " + to_string(x.shape()));
  }
  const std::size_t oh = detail::conv_out_extent(h, k, stride, padding, "depthwise_conv2d");
  const std::size_t ow = detail::conv_out_extent(w, k, stride, padding, "depthwise_conv2d");
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<double> out(c * oh * ow, 0.0);
  const long long pad = static_cast<long long>(padding);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = xd.data() + ch * h * w;
    double* dst = out.data() + ch * oh * ow;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const double wv = wd[(ch * k + kh) * k + kw];
        for (std::size_t y = 0; y < oh; ++y) {
          const long long iy = static_cast<long long>(y * stride + kh) - pad;
          if (iy < 0 || iy >= static_cast<long long>(h)) continue;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const long long ix = static_cast<long long>(xo * stride + kw) - pad;
            if (ix < 0 || ix >= static_cast<long long>(w)) continue;
            dst[y * ow + xo] += wv * src[iy * static_cast<long long>(w) + ix];
          }
        }
      }
    }
  }
  return detail::make_result(
      {c, oh, ow}, std::move(out), "depthwise_conv2d", {&x, &weight}, [=](detail::Node& self) {
        auto& in = detail::parent(self, 0);
        auto& wt = detail::parent(self, 1);
        if (in.requires_grad) in.ensure_grad();
        if (wt.requires_grad) wt.ensure_grad();
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* gout = self.grad.data() + ch * oh * ow;
          const std::size_t src_off = ch * h * w;
          for (std::size_t kh = 0; kh < k; ++kh) {
            for (std::size_t kw = 0; kw < k; ++kw) {
              const std::size_t widx = (ch * k + kh) * k + kw;
              const double wv = wt.data[widx];
              double gw = 0.0;
              for (std::size_t y = 0; y < oh; ++y) {
                const long long iy = static_cast<long long>(y * stride + kh) - pad;
                if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                for (std::size_t xo = 0; xo < ow; ++xo) {
                  const long long ix = static_cast<long long>(xo * stride + kw) - pad;
                  if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                  const std::size_t sidx = src_off + iy * w + ix;
                  const double g = gout[y * ow + xo];
                  gw += g * in.data[sidx];
                  if (in.requires_grad) in.grad[sidx] += g * wv;
                }
              }
              if (wt.requires_grad) wt.grad[widx] += gw;
            }
          }
        }
      });
}

/// 1x1 convolution: weight [co x c] applied at every pixel of x [c x h x w].
inline Tensor pointwise_conv2d(const Tensor& x, const Tensor& weight) {
  detail::require_rank(x, 3, "pointwise_conv2d", "input");
  detail::require_rank(weight, 2, "pointwise_conv2d", "weight");
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  Tensor flat = reshape(x, {x.dim(0), h * w});
  return reshape(matmul(weight, flat), {weight.dim(0), h, w});
}

/// Depthwise k x k convolution followed by 1x1 channel mixing.
/// depthwise [c x k x k], pointwise [c_out x c].
inline Tensor depthwise_separable_conv2d(const Tensor& x, const Tensor& depthwise,
                                         const Tensor& pointwise, std::size_t stride,
                                         std::size_t padding) {
  detail::require_rank(depthwise, 3, "depthwise_separable_conv2d", "depthwise kernel");
  if (depthwise.dim(1) % 2 == 0) {
    throw DimensionError("depthwise_separable_conv2d: kernel extent " +
                         std::to_string(depthwise.dim(1)) + " must be odd");
  }
  if (pointwise.rank() != 2 || pointwise.dim(1) != depthwise.dim(0)) {
    throw DimensionError("depthwise_separable_conv2d: pointwise " + to_string(pointwise.shape()) +
                         " incompatible with depthwise " + to_string(depthwise.shape()));
  }
  return pointwise_conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise);
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over classes of the binary cross-entropy between sigmoid(logits) and
/// binary targets, in the overflow-free form
///   max(l, 0) - l*t + log(1 + exp(-|l|)).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  detail::require_same_shape(logits, targets, "bce_with_logits");
  auto ld = logits.data();
  auto td = targets.data();
  for (double t : td) {
    if (t != 0.0 && t != 1.0) throw ContractError("bce_with_logits: targets must be 0 or 1");
  }
  const std::size_t n = ld.size();
  if (n == 0) throw DimensionError("bce_with_logits: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double l = ld[i];
    total += std::max(l, 0.0) - l * td[i] + std::log1p(std::exp(-std::abs(l)));
  }
  return detail::make_result(
      {}, {total / static_cast<double>(n)}, "bce_with_logits", {&logits, &targets},
      [n](detail::Node& self) {
        auto& lg = detail::parent(self, 0);
        const auto& tg = detail::parent(self, 1);
        if (!lg.requires_grad) return;
        lg.ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double l = lg.data[i];
          const double s = l >= 0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
          lg.grad[i] += g * (s - tg.data[i]);
        }
      });
}

}  // namespace r2r
