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

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "r2r/errors.hpp"
#include "r2r/model.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

struct AdamWHyper {
  double lr = 0.00025;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamWHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static OptimState for_parameters(std::span<const NamedParameter> params, AdamWHyper hyper = {}) {
    OptimState s;
    s.hyper = hyper;
    for (const auto& p : params) {
      s.first_moment.emplace_back(p.tensor.numel(), 0.0);
      s.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
    return s;
  }
};

/// One AdamW update at learning rate `lr`:
///   p <- p - lr * wd * p                          (decoupled decay)
///   m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)     (bias-corrected)
/// Parameters without a grad buffer are treated as having zero gradient.
inline void adamw_step(std::span<const NamedParameter> params, OptimState& state, double lr) {
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state has " +
                        std::to_string(state.first_moment.size()) + " slots for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  const auto& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor tensor = params[i].tensor;  // handle; writes reach the model
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != tensor.numel() || v.size() != tensor.numel()) {
      throw DimensionError("adamw_step: moment buffers do not match " + params[i].name);
    }
    const bool has_grad = tensor.has_grad();
    auto g = tensor.grad();
    auto w = tensor.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has_grad ? g[j] : 0.0;
      w[j] -= lr * h.weight_decay * w[j];
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total_steps)) / 2
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min) {
  if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be positive");
  if (step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace r2r
