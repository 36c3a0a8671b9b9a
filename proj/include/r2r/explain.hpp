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

// Mask explanations: ranking masks by activity, turning them into heatmaps,
// overlays, and scoring them against ground-truth regions.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "r2r/data.hpp"
#include "r2r/errors.hpp"
#include "r2r/metrics.hpp"
#include "r2r/model.hpp"
#include "r2r/parallel.hpp"
#include "r2r/tensor.hpp"
#include "r2r/train.hpp"

namespace r2r {

/// kMass: a_i = sum over pixels of wm_i. kArgmax: a_i = max pixel of wm_i.
enum class ActivityMode { kMass, kArgmax };

inline const char* to_string(ActivityMode m) { return m == ActivityMode::kMass ? "mass" : "argmax"; }

struct ExplanationSet {
  std::size_t stage = 0;
  std::size_t block = 0;
  Tensor masks;           // [L x h x w]
  Tensor attn;            // [L x L]
  Tensor weighted_masks;  // [L x h x w]
  std::vector<double> activity;
  ActivityMode mode = ActivityMode::kMass;
};

inline ExplanationSet make_explanation(const BlockTrace& t, ActivityMode mode = ActivityMode::kMass) {
  ExplanationSet e{t.stage, t.block, t.trace.masks, t.trace.attn, t.trace.weighted_masks, {}, mode};
  const std::size_t l = e.weighted_masks.dim(0);
  const std::size_t hw = e.weighted_masks.dim(1) * e.weighted_masks.dim(2);
  auto wm = e.weighted_masks.data();
  e.activity.resize(l);
  for (std::size_t i = 0; i < l; ++i) {
    const auto first = wm.begin() + static_cast<std::ptrdiff_t>(i * hw);
    const auto last = first + static_cast<std::ptrdiff_t>(hw);
    e.activity[i] = mode == ActivityMode::kMass ? std::accumulate(first, last, 0.0)
                                                : *std::max_element(first, last);
  }
  return e;
}

/// Trace of the last block of `stage`.
inline const BlockTrace& stage_trace(const std::vector<BlockTrace>& traces, std::size_t stage) {
  const BlockTrace* found = nullptr;
  for (const auto& t : traces) {
    if (t.stage == stage) found = &t;
  }
  if (!found) throw ContractError("no attention trace for stage " + std::to_string(stage));
  return *found;
}

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
};

/// Half-pixel-centred bilinear resize with edge clamping.
inline Heatmap upsample_bilinear(std::span<const double> src, std::size_t h, std::size_t w,
                                 std::size_t out_h, std::size_t out_w) {
  if (src.size() != h * w || h == 0 || w == 0) throw DimensionError("upsample_bilinear: bad source extent");
  Heatmap out{out_h, out_w, std::vector<double>(out_h * out_w)};
  auto coord = [](std::size_t dst, std::size_t in, std::size_t outn) {
    const double c = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                         static_cast<double>(outn) - 0.5;
    return std::clamp(c, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = coord(y, h, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = coord(x, w, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = src[y0 * w + x0] * (1 - tx) + src[y0 * w + x1] * tx;
      const double bot = src[y1 * w + x0] * (1 - tx) + src[y1 * w + x1] * tx;
      out.values[y * out_w + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

struct ActiveMask {
  std::size_t index = 0;
  double activity = 0.0;
  Heatmap heatmap;    // min-max normalized to [0, 1]
  bool flat = false;  // heatmap had no contrast; values are all zero
};

/// Top-k masks by activity (ties: lower index first), each upsampled to
/// out_h x out_w and min-max normalized.
inline std::vector<ActiveMask> select_active_masks(const ExplanationSet& e, std::size_t k,
                                                   std::size_t out_h, std::size_t out_w) {
  const std::size_t l = e.activity.size();
  if (k > l) {
    throw ContractError("select_active_masks: k = " + std::to_string(k) + " exceeds L = " +
                        std::to_string(l));
  }
  std::vector<std::size_t> order(l);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return e.activity[a] > e.activity[b];
  });
  const std::size_t h = e.weighted_masks.dim(1);
  const std::size_t w = e.weighted_masks.dim(2);
  auto wm = e.weighted_masks.data();
  std::vector<ActiveMask> out;
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t i = order[r];
    ActiveMask am;
    am.index = i;
    am.activity = e.activity[i];
    am.heatmap = upsample_bilinear(wm.subspan(i * h * w, h * w), h, w, out_h, out_w);
    auto& v = am.heatmap.values;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mn = *lo;
    const double range = *hi - mn;
    if (!(range > 1e-12)) {
      am.flat = true;
      std::fill(v.begin(), v.end(), 0.0);
    } else {
      for (double& x : v) x = (x - mn) / range;
    }
    out.push_back(std::move(am));
  }
  return out;
}

/// Writes `path` as a P6 overlay: heatmap mapped blue (0) to red (1), blended
/// at alpha 0.5 over the grayscale image. The raw heatmap goes next to it with
/// a .pgm extension.
inline void render_overlay(const Tensor& image, const Heatmap& heatmap,
                           const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(1) != heatmap.height || image.dim(2) != heatmap.width) {
    throw DimensionError("render_overlay: image " + to_string(image.shape()) +
                         " does not match heatmap " + std::to_string(heatmap.height) + "x" +
                         std::to_string(heatmap.width));
  }
  const std::size_t c = image.dim(0);
  const std::size_t hw = heatmap.height * heatmap.width;
  std::vector<std::uint8_t> rgb(3 * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    double gray = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) gray += image[ch * hw + p];
    gray /= static_cast<double>(c);
    const double v = std::clamp(heatmap.values[p], 0.0, 1.0);
    rgb[3 * p + 0] = to_byte(0.5 * gray + 0.5 * v);
    rgb[3 * p + 1] = to_byte(0.5 * gray);
    rgb[3 * p + 2] = to_byte(0.5 * gray + 0.5 * (1.0 - v));
  }
  write_ppm(path, heatmap.height, heatmap.width, rgb);
  auto raw = path;
  raw.replace_extension(".pgm");
  write_pgm(raw, heatmap.height, heatmap.width, heatmap.values);
}

struct Localization {
  double iou = 0.0;
  bool pointing_hit = false;
};

/// IoU of {heatmap >= 0.5 * max} with the region, and whether the heatmap's
/// first maximal pixel lies inside it.
inline Localization localization_score(const Heatmap& heatmap, const BinaryMask& region) {
  if (heatmap.height != region.height || heatmap.width != region.width) {
    throw DimensionError("localization_score: heatmap and region extents differ");
  }
  if (region.count() == 0) throw ContractError("localization_score: empty ground-truth region");
  const auto& v = heatmap.values;
  const auto argmax = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  const double thresh = 0.5 * v[argmax];
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t p = 0; p < v.size(); ++p) {
    const bool a = v[p] >= thresh;
    const bool b = region.bits[p] != 0;
    inter += a && b;
    uni += a || b;
  }
  return {uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0,
          region.bits[argmax] != 0};
}

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_auc;
  std::optional<double> mean_auc;
  // Localization over samples with ground truth; absent when there are none.
  std::size_t n_localized = 0;
  std::optional<double> iou_rate;       // fraction with IoU >= 0.5
  std::optional<double> pointing_rate;  // fraction of pointing-game hits
  std::optional<double> mean_iou;
};

struct LocalizationOptions {
  std::optional<std::size_t> stage;  // default: last stage
  ActivityMode mode = ActivityMode::kMass;
};

/// Top-1 most active mask of `stage` scored against the union of the
/// sample's ground-truth regions.
inline Localization localize_sample(const Model& model, const Sample& s,
                                    const LocalizationOptions& opt) {
  NoGradGuard no_grad;
  const auto out = model.forward(s.image, true);
  const std::size_t stage = opt.stage.value_or(model.config().stages.size() - 1);
  const auto expl = make_explanation(stage_trace(out.traces, stage), opt.mode);
  const auto top = select_active_masks(expl, 1, s.image.dim(1), s.image.dim(2));
  const auto gt = s.gt_union();
  if (!gt) throw ContractError("localize_sample: sample has no ground-truth region");
  return localization_score(top.front().heatmap, *gt);
}

inline MetricsReport evaluate_model(const Model& model, const std::vector<Sample>& samples,
                                    const std::vector<std::string>& class_names,
                                    std::size_t threads = 1,
                                    const LocalizationOptions& loc = {}) {
  if (class_names.size() != model.config().n_classes) {
    throw DimensionError("dataset has " + std::to_string(class_names.size()) +
                         " classes, checkpoint predicts " +
                         std::to_string(model.config().n_classes));
  }
  MetricsReport report;
  report.class_names = class_names;
  EvalResult ev = evaluate_predictions(model, samples, threads);
  report.per_class_auc = ev.per_class_auc;
  report.mean_auc = ev.mean_auc;

  std::vector<const Sample*> with_gt;
  for (const auto& s : samples) {
    if (s.has_gt()) with_gt.push_back(&s);
  }
  if (!with_gt.empty()) {
    std::vector<Localization> scores(with_gt.size());
    parallel_for(with_gt.size(), threads, [&](std::size_t, std::size_t i) {
      scores[i] = localize_sample(model, *with_gt[i], loc);
    });
    double iou_sum = 0.0;
    std::size_t iou_hits = 0;
    std::size_t point_hits = 0;
    for (const auto& l : scores) {
      iou_sum += l.iou;
      iou_hits += l.iou >= 0.5;
      point_hits += l.pointing_hit;
    }
    const double n = static_cast<double>(scores.size());
    report.n_localized = scores.size();
    report.mean_iou = iou_sum / n;
    report.iou_rate = static_cast<double>(iou_hits) / n;
    report.pointing_rate = static_cast<double>(point_hits) / n;
  }
  return report;
}

}  // namespace r2r
