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

// End-to-end finite-difference check of the model's analytic gradients.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "r2r/model.hpp"
#include "r2r/ops.hpp"
#include "r2r/rng.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;       // central-difference step
  double tolerance = 1e-4;  // on the max relative error
  double param_scale = 0.3; // parameters are redrawn from N(0, scale)
  bool inject_fault = false;  // corrupts the GELU adjoint
};

struct GroupError {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GroupError> groups;
  double max_rel_error = 0.0;
  bool passed = false;
  double seconds = 0.0;
};

/// 1x8x8 input, one stride-1 stage with two blocks, L = 4, d = 8.
inline ModelConfig gradcheck_micro_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.stages = {StageConfig{4, 2, 4, 8, 1, 2.0}};
  c.n_classes = 2;
  c.input_channels = 1;
  c.input_size = 8;
  c.seed = seed;
  return c;
}

/// |a - n| / max(|a|, |n|, 1e-6)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Compares backward() against central differences of the BCE loss for every
/// scalar of every parameter. Parameters are redrawn at a generic point so
/// that no gradient vanishes by symmetry (mask weights start at zero).
inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Model model = Model::build(gradcheck_micro_config(opt.seed));
  Rng rng(opt.seed + 0x9E3779B97F4A7C15ULL);
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = rng.normal(0.0, opt.param_scale);
  }
  const Tensor x = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);
  const Tensor y = Tensor::from_data({2}, {1.0, 0.0});

  auto loss_value = [&] {
    NoGradGuard no_grad;
    return bce_with_logits(model.forward(x).logits, y).item();
  };

  const bool previous = debug::break_gelu_adjoint;
  debug::break_gelu_adjoint = opt.inject_fault;
  model.zero_grad();
  backward(bce_with_logits(model.forward(x).logits, y));
  debug::break_gelu_adjoint = previous;

  GradcheckReport report;
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto w = t.mutable_data();
    GroupError g{p.name, w.size(), 0.0};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double orig = w[j];
      w[j] = orig + opt.step;
      const double up = loss_value();
      w[j] = orig - opt.step;
      const double down = loss_value();
      w[j] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      g.max_rel_error = std::max(g.max_rel_error, relative_error(analytic[j], numeric));
    }
    report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
    report.groups.push_back(std::move(g));
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace r2r
