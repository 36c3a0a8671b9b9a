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

// Region-to-region prototype attention.
//
// Given an input feature map x [c x h x w] the block
//   1. predicts L soft masks m = softmax_L(W_m x + b_m)        [L x h x w]
//   2. projects features f = depthwise-separable-conv(x)        [d x h x w]
//   3. pools one query per mask q_i = sum_p m_i(p) f(p)          [L x d]
//   4. scores queries against learned prototype keys K [L x d]:
//      attn = row_softmax(q K^T / sqrt(d))                      [L x L]
//   5. re-weights the masks wm = attn * m                        [L x h x w]
//   6. paints learned prototype values V [z x L] back onto the
//      pixels: o(p) = sum_i wm_i(p) v_i                          [z x h x w]
//
// Keys and values are parameters only; nothing in the forward pass writes
// them, so they are the same for every input.

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "r2r/errors.hpp"
#include "r2r/ops.hpp"
#include "r2r/rng.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

/// Intermediate tensors of one attention forward pass, detached from the
/// graph. Used for explanations.
struct R2RForwardTrace {
  Tensor masks;           // m   [L x h x w]
  Tensor features;        // f   [d x h x w]
  Tensor queries;         // q   [L x d]
  Tensor scores;          // raw q K^T, before scaling and softmax [L x L]
  Tensor attn;            // [L x L], rows sum to one
  Tensor weighted_masks;  // wm  [L x h x w]
  Tensor output;          // o   [z x h x w]
};

/// Soft masks over the pixels of x: a 1x1 convolution to L logit channels
/// followed by a softmax across the L axis at each pixel.
inline Tensor compute_masks(const Tensor& x, const Tensor& mask_weight, const Tensor& mask_bias) {
  detail::require_rank(x, 3, "compute_masks", "input");
  if (mask_weight.rank() != 2 || mask_weight.dim(1) != x.dim(0)) {
    throw DimensionError("compute_masks: mask weight " + to_string(mask_weight.shape()) +
                         " incompatible with input " + to_string(x.shape()));
  }
  Tensor logits = add_channel(pointwise_conv2d(x, mask_weight), mask_bias);
  return softmax(logits, 0);
}

/// Convolutional projection of x to d channels (stride 1, same size).
inline Tensor compute_features(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise) {
  const std::size_t pad = depthwise.rank() == 3 ? depthwise.dim(1) / 2 : 0;
  return depthwise_separable_conv2d(x, depthwise, pointwise, 1, pad);
}

/// q[i][c] = sum_{h,w} m[i][h][w] * f[c][h][w]; with `normalize` each row is
/// divided by the mask's total mass (+1e-6), giving a weighted average.
inline Tensor masked_pool_queries(const Tensor& masks, const Tensor& features, bool normalize) {
  detail::require_rank(masks, 3, "masked_pool_queries", "masks");
  detail::require_rank(features, 3, "masked_pool_queries", "features");
  if (masks.dim(1) != features.dim(1) || masks.dim(2) != features.dim(2)) {
    throw DimensionError("masked_pool_queries: spatial mismatch between masks " +
                         to_string(masks.shape()) + " and features " +
                         to_string(features.shape()));
  }
  const std::size_t hw = masks.dim(1) * masks.dim(2);
  Tensor m = reshape(masks, {masks.dim(0), hw});
  Tensor f = reshape(features, {features.dim(0), hw});
  Tensor q = matmul_nt(m, f);
  if (!normalize) return q;
  Tensor mass = add_scalar(reduce_sum(m, {1}), 1e-6);
  return mul_channel(q, reciprocal(mass));
}

/// Raw query/prototype scores q K^T.
inline Tensor attention_scores(const Tensor& queries, const Tensor& keys) {
  if (queries.rank() != 2 || keys.rank() != 2 || queries.dim(1) != keys.dim(1)) {
    throw DimensionError("region_attention: query " + to_string(queries.shape()) +
                         " and key " + to_string(keys.shape()) + " widths differ");
  }
  return matmul_nt(queries, keys);
}

/// Row-softmax of the scaled scores.
inline Tensor region_attention(const Tensor& queries, const Tensor& keys) {
  Tensor scores = attention_scores(queries, keys);
  return softmax(scale(scores, 1.0 / std::sqrt(static_cast<double>(keys.dim(1)))), 1);
}

/// wm[i] = sum_j attn[i][j] * m[j]
inline Tensor weight_masks(const Tensor& attn, const Tensor& masks) {
  detail::require_rank(masks, 3, "weight_masks", "masks");
  if (attn.rank() != 2 || attn.dim(1) != masks.dim(0)) {
    throw DimensionError("weight_masks: attention " + to_string(attn.shape()) +
                         " does not match mask count of " + to_string(masks.shape()));
  }
  const std::size_t h = masks.dim(1);
  const std::size_t w = masks.dim(2);
  Tensor wm = matmul(attn, reshape(masks, {masks.dim(0), h * w}));
  return reshape(wm, {attn.dim(0), h, w});
}

/// o[:, p] = sum_i wm[i][p] * v_i, with values [z x L].
inline Tensor reconstruct_output(const Tensor& values, const Tensor& weighted_masks) {
  detail::require_rank(weighted_masks, 3, "reconstruct_output", "weighted masks");
  if (values.rank() != 2 || values.dim(1) != weighted_masks.dim(0)) {
    throw DimensionError("reconstruct_output: values " + to_string(values.shape()) +
                         " do not match mask count of " + to_string(weighted_masks.shape()));
  }
  const std::size_t h = weighted_masks.dim(1);
  const std::size_t w = weighted_masks.dim(2);
  Tensor o = matmul(values, reshape(weighted_masks, {weighted_masks.dim(0), h * w}));
  return reshape(o, {values.dim(0), h, w});
}

struct R2RResult {
  Tensor output;
  std::optional<R2RForwardTrace> trace;
};

/// Parameters of one region-to-region attention block.
struct R2RAttentionLayer {
  Tensor mask_weight;  // [L x c_in]
  Tensor mask_bias;    // [L]
  Tensor depthwise;    // [c_in x k x k]
  Tensor pointwise;    // [d x c_in]
  Tensor keys;         // [L x d]
  Tensor values;       // [z x L]
  bool normalize_queries = false;

  std::size_t masks() const { return keys.dim(0); }
  std::size_t query_width() const { return keys.dim(1); }
  std::size_t value_width() const { return values.dim(0); }
  std::size_t in_channels() const { return mask_weight.dim(1); }

  /// Zero mask branch (uniform masks), fan-in scaled Gaussian feature
  /// branch, N(0, 0.02^2) prototypes.
  static R2RAttentionLayer init(std::size_t in_channels, std::size_t num_masks,
                                std::size_t query_width, std::size_t value_width, Rng& rng,
                                std::size_t kernel = 3) {
    if (num_masks < 2 || query_width < 1 || value_width < 1 || in_channels < 1) {
      throw ConfigError("R2R attention needs L >= 2, d >= 1, z >= 1 and c_in >= 1 (got L=" +
                        std::to_string(num_masks) + ", d=" + std::to_string(query_width) +
                        ", z=" + std::to_string(value_width) + ")");
    }
    R2RAttentionLayer layer;
    layer.mask_weight = Tensor::zeros({num_masks, in_channels}, true);
    layer.mask_bias = Tensor::zeros({num_masks}, true);
    layer.depthwise = rng.normal_tensor({in_channels, kernel, kernel},
                                        1.0 / static_cast<double>(kernel), true);
    layer.pointwise = rng.normal_tensor({query_width, in_channels},
                                        1.0 / std::sqrt(static_cast<double>(in_channels)), true);
    layer.keys = rng.normal_tensor({num_masks, query_width}, 0.02, true);
    layer.values = rng.normal_tensor({value_width, num_masks}, 0.02, true);
    layer.validate();
    return layer;
  }

  void validate() const {
    const std::size_t l = keys.dim(0);
    if (l < 2) throw ConfigError("R2R attention needs at least two masks");
    if (mask_weight.shape() != Shape{l, mask_weight.dim(1)} || mask_bias.shape() != Shape{l} ||
        values.rank() != 2 || values.dim(1) != l || pointwise.rank() != 2 ||
        pointwise.dim(0) != keys.dim(1) || pointwise.dim(1) != mask_weight.dim(1) ||
        depthwise.rank() != 3 || depthwise.dim(0) != mask_weight.dim(1)) {
      throw DimensionError("R2R attention parameters have inconsistent shapes");
    }
  }

  R2RResult forward(const Tensor& x, bool capture_trace = false) const {
    Tensor m = compute_masks(x, mask_weight, mask_bias);
    Tensor f = compute_features(x, depthwise, pointwise);
    Tensor q = masked_pool_queries(m, f, normalize_queries);
    Tensor scores = attention_scores(q, keys);
    Tensor attn = softmax(scale(scores, 1.0 / std::sqrt(static_cast<double>(keys.dim(1)))), 1);
    Tensor wm = weight_masks(attn, m);
    Tensor o = reconstruct_output(values, wm);
    R2RResult result{o, std::nullopt};
    if (capture_trace) {
      result.trace = R2RForwardTrace{m.detach(),      f.detach(),  q.detach(), scores.detach(),
                                     attn.detach(),   wm.detach(), o.detach()};
    }
    return result;
  }
};

inline Tensor compute_masks(const Tensor& x, const R2RAttentionLayer& layer) {
  return compute_masks(x, layer.mask_weight, layer.mask_bias);
}

inline Tensor compute_features(const Tensor& x, const R2RAttentionLayer& layer) {
  return compute_features(x, layer.depthwise, layer.pointwise);
}

}  // namespace r2r
