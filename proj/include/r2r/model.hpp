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

// Multi-stage convolutional transformer classifier whose attention layers
// are all region-to-region prototype attention blocks.
//
//   for each stage:  strided conv token embedding -> layer norm
//                    blocks x { x += R2R(LN(x)); x += MLP(LN(x)) }
//   head:            LN -> global average pool -> linear -> logits

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "r2r/attention.hpp"
#include "r2r/errors.hpp"
#include "r2r/ops.hpp"
#include "r2r/rng.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

enum class Pooling { kSum, kNormalized };

inline const char* to_string(Pooling p) { return p == Pooling::kSum ? "sum" : "normalized"; }

struct StageConfig {
  std::size_t embed_channels = 16;
  std::size_t blocks = 1;
  std::size_t masks = 16;        // L
  std::size_t query_width = 0;   // d; 0 means "same as embed_channels"
  std::size_t patch_stride = 2;
  double mlp_ratio = 2.0;

  std::size_t effective_query_width() const {
    return query_width ? query_width : embed_channels;
  }
  /// Token-embedding kernel and padding for this stride: 3/1 at stride 1,
  /// otherwise (2s-1)/(s/2), i.e. 3/1 at stride 2 and 7/2 at stride 4.
  std::size_t patch_kernel() const { return patch_stride == 1 ? 3 : 2 * patch_stride - 1; }
  std::size_t patch_padding() const { return patch_stride == 1 ? 1 : patch_stride / 2; }
  std::size_t mlp_hidden() const {
    const auto h = static_cast<std::size_t>(std::lround(mlp_ratio * embed_channels));
    return h ? h : 1;
  }
};

struct ModelConfig {
  std::vector<StageConfig> stages;
  std::size_t n_classes = 2;
  std::size_t input_channels = 1;
  std::size_t input_size = 64;
  Pooling pooling = Pooling::kSum;
  std::uint64_t seed = 0;

  /// Three stages (16/32/64 channels, 1/1/2 blocks, L = 8, strides 4/2/1)
  /// on 64x64 single-channel input: token grids 16, 8 and 8.
  static ModelConfig desk_default() {
    ModelConfig c;
    c.stages = {StageConfig{16, 1, 8, 16, 4, 2.0}, StageConfig{32, 1, 8, 32, 2, 2.0},
                StageConfig{64, 2, 8, 64, 1, 2.0}};
    c.n_classes = 2;
    c.input_channels = 1;
    c.input_size = 64;
    return c;
  }

  /// Side length of the token grid after each stage's embedding. Throws
  /// ConfigError naming the first stage whose arithmetic fails.
  std::vector<std::size_t> stage_resolutions() const {
    std::vector<std::size_t> out;
    long long size = static_cast<long long>(input_size);
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (s.patch_stride < 1) {
        throw ConfigError("stage " + std::to_string(i) + ": patch_stride must be >= 1");
      }
      const long long span = size + 2 * static_cast<long long>(s.patch_padding()) -
                             static_cast<long long>(s.patch_kernel());
      if (span < 0) {
        throw ConfigError("stage " + std::to_string(i) + ": input extent " + std::to_string(size) +
                          " with stride " + std::to_string(s.patch_stride) +
                          " leaves no output tokens");
      }
      size = span / static_cast<long long>(s.patch_stride) + 1;
      out.push_back(static_cast<std::size_t>(size));
    }
    return out;
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("model needs at least one stage");
    if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (input_size < 1) throw ConfigError("input_size must be >= 1");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string where = "stage " + std::to_string(i) + ": ";
      if (s.blocks < 1) throw ConfigError(where + "blocks must be >= 1");
      if (s.masks < 2) throw ConfigError(where + "L (masks) must be >= 2");
      if (s.embed_channels < 1) throw ConfigError(where + "embed_channels must be >= 1");
      if (!(s.mlp_ratio > 0.0)) throw ConfigError(where + "mlp_ratio must be positive");
    }
    stage_resolutions();
  }
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

struct TransformerBlock {
  Tensor norm1_gamma, norm1_beta;
  R2RAttentionLayer attention;
  Tensor norm2_gamma, norm2_beta;
  Tensor fc1_weight, fc1_bias;  // [hidden x C], [hidden]
  Tensor fc2_weight, fc2_bias;  // [C x hidden], [C]
};

struct Stage {
  Tensor embed_weight;  // [C x C_prev x k x k]
  Tensor embed_bias;
  Tensor embed_norm_gamma, embed_norm_beta;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::vector<TransformerBlock> blocks;
};

/// Attention trace of one block, tagged with its position in the network.
struct BlockTrace {
  std::size_t stage = 0;
  std::size_t block = 0;
  R2RForwardTrace trace;
};

struct ModelOutput {
  Tensor logits;  // [n_classes]
  std::vector<BlockTrace> traces;
};

class Model {
 public:
  /// Deterministic initialization from config.seed.
  static Model build(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config_ = config;
    Rng rng(config.seed);
    std::size_t in_ch = config.input_channels;
    for (std::size_t si = 0; si < config.stages.size(); ++si) {
      const auto& sc = config.stages[si];
      const std::size_t c = sc.embed_channels;
      const std::size_t k = sc.patch_kernel();
      Stage st;
      st.stride = sc.patch_stride;
      st.padding = sc.patch_padding();
      const double fan_in = static_cast<double>(in_ch * k * k);
      st.embed_weight = rng.normal_tensor({c, in_ch, k, k}, 1.0 / std::sqrt(fan_in), true);
      st.embed_bias = Tensor::zeros({c}, true);
      st.embed_norm_gamma = Tensor::full({c}, 1.0, true);
      st.embed_norm_beta = Tensor::zeros({c}, true);
      const std::string sp = "stage" + std::to_string(si);
      model.register_parameter(sp + ".embed.weight", st.embed_weight);
      model.register_parameter(sp + ".embed.bias", st.embed_bias);
      model.register_parameter(sp + ".embed_norm.gamma", st.embed_norm_gamma);
      model.register_parameter(sp + ".embed_norm.beta", st.embed_norm_beta);
      for (std::size_t bi = 0; bi < sc.blocks; ++bi) {
        const std::string bp = sp + ".block" + std::to_string(bi);
        const std::size_t hidden = sc.mlp_hidden();
        TransformerBlock b;
        b.norm1_gamma = Tensor::full({c}, 1.0, true);
        b.norm1_beta = Tensor::zeros({c}, true);
        b.attention =
            R2RAttentionLayer::init(c, sc.masks, sc.effective_query_width(), c, rng);
        b.attention.normalize_queries = config.pooling == Pooling::kNormalized;
        b.norm2_gamma = Tensor::full({c}, 1.0, true);
        b.norm2_beta = Tensor::zeros({c}, true);
        b.fc1_weight = rng.normal_tensor({hidden, c}, 1.0 / std::sqrt(double(c)), true);
        b.fc1_bias = Tensor::zeros({hidden}, true);
        b.fc2_weight = rng.normal_tensor({c, hidden}, 1.0 / std::sqrt(double(hidden)), true);
        b.fc2_bias = Tensor::zeros({c}, true);
        model.register_parameter(bp + ".norm1.gamma", b.norm1_gamma);
        model.register_parameter(bp + ".norm1.beta", b.norm1_beta);
        model.register_parameter(bp + ".attn.mask.weight", b.attention.mask_weight);
        model.register_parameter(bp + ".attn.mask.bias", b.attention.mask_bias);
        model.register_parameter(bp + ".attn.feature.depthwise", b.attention.depthwise);
        model.register_parameter(bp + ".attn.feature.pointwise", b.attention.pointwise);
        model.register_parameter(bp + ".attn.keys", b.attention.keys);
        model.register_parameter(bp + ".attn.values", b.attention.values);
        model.register_parameter(bp + ".norm2.gamma", b.norm2_gamma);
        model.register_parameter(bp + ".norm2.beta", b.norm2_beta);
        model.register_parameter(bp + ".mlp.fc1.weight", b.fc1_weight);
        model.register_parameter(bp + ".mlp.fc1.bias", b.fc1_bias);
        model.register_parameter(bp + ".mlp.fc2.weight", b.fc2_weight);
        model.register_parameter(bp + ".mlp.fc2.bias", b.fc2_bias);
        st.blocks.push_back(std::move(b));
      }
      model.stages_.push_back(std::move(st));
      in_ch = c;
    }
    model.head_norm_gamma_ = Tensor::full({in_ch}, 1.0, true);
    model.head_norm_beta_ = Tensor::zeros({in_ch}, true);
    model.head_weight_ =
        rng.normal_tensor({config.n_classes, in_ch}, 1.0 / std::sqrt(double(in_ch)), true);
    model.head_bias_ = Tensor::zeros({config.n_classes}, true);
    model.register_parameter("head_norm.gamma", model.head_norm_gamma_);
    model.register_parameter("head_norm.beta", model.head_norm_beta_);
    model.register_parameter("head.weight", model.head_weight_);
    model.register_parameter("head.bias", model.head_bias_);
    return model;
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<Stage>& stages() const { return stages_; }
  std::vector<Stage>& stages() { return stages_; }

  /// Parameter handles in a fixed order (they alias the model's tensors).
  const std::vector<NamedParameter>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  Tensor parameter(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.tensor;
    }
    throw ContractError("model has no parameter named '" + name + "'");
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Fresh model with the same config and a copy of the parameter values.
  Model clone() const {
    Model copy = build(config_);
    copy.copy_values_from(*this);
    return copy;
  }

  void copy_values_from(const Model& other) {
    if (other.params_.size() != params_.size()) {
      throw ContractError("copy_values_from: parameter inventories differ");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = other.params_[i].tensor.data();
      auto dst = params_[i].tensor.mutable_data();
      if (src.size() != dst.size()) {
        throw DimensionError("copy_values_from: " + params_[i].name + " shape differs");
      }
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

  ModelOutput forward(const Tensor& x, bool capture_traces = false) const {
    const Shape expected{config_.input_channels, config_.input_size, config_.input_size};
    if (x.shape() != expected) {
      throw DimensionError("model input must be " + to_string(expected) + ", got " +
                           to_string(x.shape()));
    }
    ModelOutput out;
    Tensor h = x;
    for (std::size_t si = 0; si < stages_.size(); ++si) {
      const Stage& st = stages_[si];
      h = add_channel(conv2d(h, st.embed_weight, st.stride, st.padding), st.embed_bias);
      h = layer_norm_channels(h, st.embed_norm_gamma, st.embed_norm_beta);
      for (std::size_t bi = 0; bi < st.blocks.size(); ++bi) {
        const TransformerBlock& b = st.blocks[bi];
        Tensor n1 = layer_norm_channels(h, b.norm1_gamma, b.norm1_beta);
        R2RResult attn = b.attention.forward(n1, capture_traces);
        if (attn.trace) out.traces.push_back(BlockTrace{si, bi, std::move(*attn.trace)});
        h = add(h, attn.output);
        Tensor n2 = layer_norm_channels(h, b.norm2_gamma, b.norm2_beta);
        Tensor hidden = gelu(add_channel(pointwise_conv2d(n2, b.fc1_weight), b.fc1_bias));
        h = add(h, add_channel(pointwise_conv2d(hidden, b.fc2_weight), b.fc2_bias));
      }
    }
    Tensor n = layer_norm_channels(h, head_norm_gamma_, head_norm_beta_);
    const double area = static_cast<double>(h.dim(1) * h.dim(2));
    Tensor pooled = scale(reduce_sum(n, {1, 2}), 1.0 / area);
    Tensor logits = matmul(head_weight_, reshape(pooled, {pooled.dim(0), 1}));
    out.logits = add(reshape(logits, {config_.n_classes}), head_bias_);
    return out;
  }

 private:
  void register_parameter(std::string name, const Tensor& t) { params_.push_back({std::move(name), t}); }

  ModelConfig config_;
  std::vector<Stage> stages_;
  Tensor head_norm_gamma_, head_norm_beta_;
  Tensor head_weight_, head_bias_;
  std::vector<NamedParameter> params_;
};

}  // namespace r2r
