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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "r2r/errors.hpp"

namespace r2r {

/// Area under the ROC curve as the Mann-Whitney statistic
///   (#concordant pairs + 0.5 * #tied pairs) / (#pos * #neg).
/// Throws UndefinedMetricError unless both label classes are present.
inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of midranks of the positives (ranks are 1-based; ties share the mean).
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        pos_rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedMetricError("roc_auc: labels contain a single class");
  }
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

/// roc_auc, or nullopt when it is undefined for these labels.
inline std::optional<double> try_roc_auc(std::span<const double> scores,
                                         std::span<const std::uint8_t> labels) {
  try {
    return roc_auc(scores, labels);
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

/// Mean over the classes whose AUC is defined.
inline double mean_auc(std::span<const std::optional<double>> per_class) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& a : per_class) {
    if (a) {
      total += *a;
      ++count;
    }
  }
  if (count == 0) throw UndefinedMetricError("mean_auc: no class has a defined AUC");
  return total / static_cast<double>(count);
}

/// Per-class AUC for a score matrix laid out [sample][class].
inline std::vector<std::optional<double>> per_class_auc(
    const std::vector<std::vector<double>>& scores,
    const std::vector<std::vector<std::uint8_t>>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("per_class_auc: row count mismatch");
  if (scores.empty()) return {};
  const std::size_t classes = scores.front().size();
  std::vector<std::optional<double>> out(classes);
  std::vector<double> col_s(scores.size());
  std::vector<std::uint8_t> col_l(scores.size());
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != classes || labels[i].size() != classes) {
        throw DimensionError("per_class_auc: ragged rows");
      }
      col_s[i] = scores[i][c];
      col_l[i] = labels[i][c];
    }
    out[c] = try_roc_auc(col_s, col_l);
  }
  return out;
}

}  // namespace r2r
