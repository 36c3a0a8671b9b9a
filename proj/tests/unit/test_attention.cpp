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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "r2r/attention.hpp"
#include "test_util.hpp"

namespace r2r {
namespace {

using testing::max_abs_diff;

// Nested-loop references, accumulated in long double.

std::vector<double> ref_queries(const Tensor& m, const Tensor& f, bool normalize) {
  const std::size_t l = m.dim(0), d = f.dim(0), hw = m.dim(1) * m.dim(2);
  std::vector<double> q(l * d);
  for (std::size_t i = 0; i < l; ++i) {
    long double mass = 0.0L;
    for (std::size_t p = 0; p < hw; ++p) mass += m[i * hw + p];
    for (std::size_t c = 0; c < d; ++c) {
      long double acc = 0.0L;
      for (std::size_t p = 0; p < hw; ++p) acc += static_cast<long double>(m[i * hw + p]) * f[c * hw + p];
      q[i * d + c] = static_cast<double>(normalize ? acc / (mass + 1e-6L) : acc);
    }
  }
  return q;
}

std::vector<double> ref_attention(std::span<const double> q, const Tensor& k, std::size_t l) {
  const std::size_t d = k.dim(1), lk = k.dim(0);
  std::vector<double> a(l * lk);
  for (std::size_t i = 0; i < l; ++i) {
    std::vector<long double> s(lk);
    long double mx = -INFINITY;
    for (std::size_t j = 0; j < lk; ++j) {
      long double acc = 0.0L;
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<long double>(q[i * d + c]) * k[j * d + c];
      s[j] = acc / std::sqrt(static_cast<long double>(d));
      mx = std::max(mx, s[j]);
    }
    long double z = 0.0L;
    for (auto& v : s) z += (v = std::exp(v - mx));
    for (std::size_t j = 0; j < lk; ++j) a[i * lk + j] = static_cast<double>(s[j] / z);
  }
  return a;
}

std::vector<double> ref_weight_masks(std::span<const double> attn, const Tensor& m) {
  const std::size_t l = m.dim(0), hw = m.dim(1) * m.dim(2);
  std::vector<double> wm(l * hw);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      long double acc = 0.0L;
      for (std::size_t j = 0; j < l; ++j) acc += static_cast<long double>(attn[i * l + j]) * m[j * hw + p];
      wm[i * hw + p] = static_cast<double>(acc);
    }
  return wm;
}

std::vector<double> ref_output(const Tensor& v, std::span<const double> wm, std::size_t hw) {
  const std::size_t z = v.dim(0), l = v.dim(1);
  std::vector<double> o(z * hw);
  for (std::size_t c = 0; c < z; ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      long double acc = 0.0L;
      for (std::size_t i = 0; i < l; ++i) acc += static_cast<long double>(v[c * l + i]) * wm[i * hw + p];
      o[c * hw + p] = static_cast<double>(acc);
    }
  return o;
}

Tensor random_masks(Rng& rng, std::size_t l, std::size_t h, std::size_t w) {
  return softmax(rng.normal_tensor({l, h, w}, 2.0), 0);
}

R2RAttentionLayer random_layer(Rng& rng, std::size_t c, std::size_t l, std::size_t d, std::size_t z) {
  R2RAttentionLayer layer = R2RAttentionLayer::init(c, l, d, z, rng);
  for (Tensor* t : {&layer.mask_weight, &layer.mask_bias, &layer.keys, &layer.values}) {
    for (double& v : t->mutable_data()) v = rng.normal(0.0, 0.5);
  }
  return layer;
}

// --- compute_masks -----------------------------------------------------------

TEST(MasksTest, ZeroBranchIsUniform) {
  Rng rng(1);
  const R2RAttentionLayer layer = R2RAttentionLayer::init(3, 5, 4, 3, rng);
  const Tensor m = compute_masks(rng.normal_tensor({3, 4, 4}, 1.0), layer);
  for (double v : m.data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(MasksTest, SaturatedLogitTakesThePixel) {
  const Tensor x = Tensor::from_data({1, 1, 2}, {1.0, 0.0});
  const Tensor w = Tensor::from_data({3, 1}, {0.0, 1000.0, 0.0});
  const Tensor m = compute_masks(x, w, Tensor::zeros({3}));
  EXPECT_NEAR(m[1 * 2 + 0], 1.0, 1e-12);
  EXPECT_NEAR(m[0 * 2 + 0], 0.0, 1e-12);
  EXPECT_NEAR(m[2 * 2 + 0], 0.0, 1e-12);
}

TEST(MasksTest, SimplexOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const R2RAttentionLayer layer = random_layer(rng, 3, 4, 5, 3);
    const Tensor m = compute_masks(rng.normal_tensor({3, 5, 6}, 3.0), layer);
    for (std::size_t p = 0; p < 30; ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < 4; ++i) {
        const double v = m[i * 30 + p];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

// --- compute_features ----------------------------------------------------------

TEST(FeaturesTest, IdentityKernelsCopyInput) {
  Rng rng(2);
  const Tensor x = rng.normal_tensor({2, 4, 4}, 1.0);
  std::vector<double> dw(2 * 9, 0.0);
  dw[4] = dw[9 + 4] = 1.0;
  const Tensor f = compute_features(x, Tensor::from_data({2, 3, 3}, dw), Tensor::from_data({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(max_abs_diff(f.data(), x.data()), 0.0);
}

TEST(FeaturesTest, ZeroWeightsGiveZero) {
  Rng rng(3);
  const Tensor f = compute_features(rng.normal_tensor({2, 4, 4}, 1.0), Tensor::zeros({2, 3, 3}), Tensor::zeros({3, 2}));
  EXPECT_EQ(f.shape(), (Shape{3, 4, 4}));
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(FeaturesTest, MatchesNaiveConvolution) {
  Rng rng(4);
  const R2RAttentionLayer layer = random_layer(rng, 3, 4, 5, 3);
  const Tensor x = rng.normal_tensor({3, 6, 6}, 1.0);
  std::size_t oh = 0, ow = 0;
  const auto ref = testing::naive_dwsep(x.data(), 3, 6, 6, layer.depthwise.data(), 3, layer.pointwise.data(), 5, 1, 1, oh, ow);
  EXPECT_LE(max_abs_diff(compute_features(x, layer).data(), ref), 1e-12);
}

// --- masked_pool_queries -----------------------------------------------------

TEST(QueriesTest, DeltaMaskPicksPixelFeature) {
  Rng rng(5);
  const Tensor f = rng.normal_tensor({3, 2, 2}, 1.0);
  std::vector<double> m(2 * 4, 0.0);
  m[0 * 4 + 2] = 1.0;  // mask 0 is a delta at pixel 2
  for (std::size_t p = 0; p < 4; ++p) if (p != 2) m[4 + p] = 1.0;
  const Tensor q = masked_pool_queries(Tensor::from_data({2, 2, 2}, m), f, false);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(q[c], f[c * 4 + 2]);
}

TEST(QueriesTest, UniformSingleMaskIsScaledMean) {
  Rng rng(6);
  const Tensor f = rng.normal_tensor({2, 3, 3}, 1.0);
  const Tensor q = masked_pool_queries(Tensor::full({1, 3, 3}, 1.0), f, false);
  const Tensor qn = masked_pool_queries(Tensor::full({1, 3, 3}, 1.0), f, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t p = 0; p < 9; ++p) mean += f[c * 9 + p] / 9.0;
    EXPECT_NEAR(q[c], 9.0 * mean, 1e-12);
    EXPECT_NEAR(qn[c], 9.0 * mean / (9.0 + 1e-6), 1e-12);
  }
}

TEST(QueriesTest, SpatialMismatchIsDimensionError) {
  EXPECT_THROW(masked_pool_queries(Tensor::zeros({2, 3, 3}), Tensor::zeros({2, 3, 4}), false), DimensionError);
}

// --- region_attention --------------------------------------------------------

TEST(RegionAttentionTest, SelfSimilarityPeaksOnDiagonal) {
  const std::size_t l = 4, d = 4;
  std::vector<double> eye(l * d, 0.0);
  for (std::size_t i = 0; i < l; ++i) eye[i * d + i] = 2.0;  // sqrt(d) * I
  const Tensor k = Tensor::from_data({l, d}, eye);
  const Tensor a = region_attention(k, k);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < l; ++j)
      if (i != j) {
        EXPECT_GT(a[i * l + i], a[i * l + j]);
      }
}

TEST(RegionAttentionTest, ZeroQueriesGiveUniformRows) {
  Rng rng(7);
  const Tensor a = region_attention(Tensor::zeros({3, 5}), rng.normal_tensor({3, 5}, 1.0));
  for (double v : a.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(RegionAttentionTest, MatchesExtendedPrecisionOracle) {
  Rng rng(8);
  const Tensor q = rng.normal_tensor({5, 8}, 1.0);
  const Tensor k = rng.normal_tensor({5, 8}, 1.0);
  EXPECT_LE(max_abs_diff(region_attention(q, k).data(), ref_attention(q.data(), k, 5)), 1e-10);
}

TEST(RegionAttentionTest, WidthMismatchIsDimensionError) {
  EXPECT_THROW(region_attention(Tensor::zeros({3, 4}), Tensor::zeros({3, 5})), DimensionError);
}

// --- weight_masks / reconstruct_output ---------------------------------------

TEST(WeightMasksTest, IdentityAttentionKeepsMasks) {
  Rng rng(9);
  const Tensor m = random_masks(rng, 3, 2, 2);
  const Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(max_abs_diff(weight_masks(eye, m).data(), m.data()), 0.0);
}

TEST(WeightMasksTest, UniformRowAveragesMasks) {
  Rng rng(10);
  const std::size_t l = 4;
  const Tensor m = random_masks(rng, l, 3, 3);
  const Tensor wm = weight_masks(Tensor::full({l, l}, 1.0 / l), m);
  for (double v : wm.data()) EXPECT_NEAR(v, 1.0 / l, 1e-12);
}

TEST(WeightMasksTest, CountMismatchIsDimensionError) {
  EXPECT_THROW(weight_masks(Tensor::zeros({3, 3}), Tensor::zeros({4, 2, 2})), DimensionError);
  EXPECT_THROW(reconstruct_output(Tensor::zeros({2, 3}), Tensor::zeros({4, 2, 2})), DimensionError);
}

TEST(ReconstructTest, DeltaAssignmentCopiesValue) {
  Rng rng(11);
  const Tensor v = rng.normal_tensor({3, 2}, 1.0);
  const Tensor wm = Tensor::from_data({2, 1, 2}, {1, 0, 0, 1});
  const Tensor o = reconstruct_output(v, wm);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(o[c * 2 + 0], v[c * 2 + 0]);
    EXPECT_DOUBLE_EQ(o[c * 2 + 1], v[c * 2 + 1]);
  }
}

TEST(ReconstructTest, ZeroValuesGiveZero) {
  Rng rng(12);
  const Tensor o = reconstruct_output(Tensor::zeros({4, 3}), random_masks(rng, 3, 2, 2));
  for (double x : o.data()) EXPECT_EQ(x, 0.0);
}

// --- composed forward ----------------------------------------------------------

TEST(LayerForwardTest, VectorizedEqualsNestedLoopsAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t l = 2 + rng.index(7), h = 1 + rng.index(6), w = 1 + rng.index(6);
    const std::size_t d = 1 + rng.index(6), z = 1 + rng.index(6);
    const Tensor m = random_masks(rng, l, h, w);
    const Tensor f = rng.normal_tensor({d, h, w}, 1.0);
    const Tensor k = rng.normal_tensor({l, d}, 1.0);
    const Tensor v = rng.normal_tensor({z, l}, 1.0);
    for (bool normalize : {false, true}) {
      const Tensor q = masked_pool_queries(m, f, normalize);
      const auto q_ref = ref_queries(m, f, normalize);
      EXPECT_LE(max_abs_diff(q.data(), q_ref), 1e-10);
      const Tensor a = region_attention(q, k);
      const auto a_ref = ref_attention(q_ref, k, l);
      EXPECT_LE(max_abs_diff(a.data(), a_ref), 1e-10);
      const Tensor wm = weight_masks(a, m);
      EXPECT_LE(max_abs_diff(wm.data(), ref_weight_masks(a.data(), m)), 1e-10);
      EXPECT_LE(max_abs_diff(reconstruct_output(v, wm).data(), ref_output(v, wm.data(), h * w)), 1e-10);
    }
  }
}

TEST(LayerForwardTest, EqualsComposedOracle) {
  Rng rng(13);
  const R2RAttentionLayer layer = random_layer(rng, 3, 4, 5, 3);
  const Tensor x = rng.normal_tensor({3, 5, 5}, 1.0);
  const R2RResult r = layer.forward(x, true);
  ASSERT_TRUE(r.trace.has_value());
  const auto q = ref_queries(r.trace->masks, r.trace->features, false);
  const auto a = ref_attention(q, layer.keys, 4);
  const auto wm = ref_weight_masks(a, r.trace->masks);
  EXPECT_LE(max_abs_diff(r.output.data(), ref_output(layer.values, wm, 25)), 1e-10);
  EXPECT_EQ(r.trace->attn.shape(), (Shape{4, 4}));
  EXPECT_EQ(r.trace->scores.shape(), (Shape{4, 4}));
}

TEST(LayerForwardTest, UniformMasksAndAttentionGiveMeanValue) {
  Rng rng(14);
  R2RAttentionLayer layer = R2RAttentionLayer::init(2, 4, 3, 5, rng);
  for (double& v : layer.keys.mutable_data()) v = 0.0;  // forces uniform attention
  const R2RResult r = layer.forward(rng.normal_tensor({2, 3, 3}, 1.0));
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 4; ++i) mean += layer.values[c * 4 + i] / 4.0;
    for (std::size_t p = 0; p < 9; ++p) EXPECT_NEAR(r.output[c * 9 + p], mean, 1e-15);
  }
}

TEST(LayerForwardTest, TraceOnlyWhenRequested) {
  Rng rng(15);
  const R2RAttentionLayer layer = R2RAttentionLayer::init(2, 3, 3, 2, rng);
  EXPECT_FALSE(layer.forward(Tensor::zeros({2, 2, 2})).trace.has_value());
}

TEST(LayerForwardTest, PrototypesAreInputIndependent) {
  Rng rng(16);
  const R2RAttentionLayer layer = random_layer(rng, 3, 4, 5, 3);
  const std::vector<double> k0(layer.keys.data().begin(), layer.keys.data().end());
  const std::vector<double> v0(layer.values.data().begin(), layer.values.data().end());
  const Tensor x1 = rng.normal_tensor({3, 4, 4}, 1.0);
  const Tensor x2 = rng.normal_tensor({3, 4, 4}, 1.0);
  const Tensor o1 = layer.forward(x1).output;
  layer.forward(x2);
  const Tensor o1b = layer.forward(x1).output;
  EXPECT_EQ(std::vector<double>(layer.keys.data().begin(), layer.keys.data().end()), k0);
  EXPECT_EQ(std::vector<double>(layer.values.data().begin(), layer.values.data().end()), v0);
  EXPECT_EQ(max_abs_diff(o1.data(), o1b.data()), 0.0);
}

TEST(LayerForwardTest, DeltaMasksWithIdentityAttentionSelectValues) {
  Rng rng(17);
  const std::size_t l = 3, z = 4;
  const Tensor v = rng.normal_tensor({z, l}, 1.0);
  // Near one-hot masks from saturated logits.
  std::vector<double> logits(l * 6);
  std::vector<std::size_t> owner(6);
  for (std::size_t p = 0; p < 6; ++p) {
    owner[p] = rng.index(l);
    for (std::size_t i = 0; i < l; ++i) logits[i * 6 + p] = i == owner[p] ? 60.0 : 0.0;
  }
  const Tensor m = softmax(Tensor::from_data({l, 2, 3}, logits), 0);
  const Tensor eye = Tensor::from_data({l, l}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor o = reconstruct_output(v, weight_masks(eye, m));
  for (std::size_t c = 0; c < z; ++c)
    for (std::size_t p = 0; p < 6; ++p) EXPECT_NEAR(o[c * 6 + p], v[c * l + owner[p]], 1e-6);
}

TEST(LayerForwardTest, PrototypePermutationEquivariance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const std::size_t l = 5;
    const R2RAttentionLayer layer = random_layer(rng, 3, l, 4, 3);
    const auto perm = rng.permutation(l);
    R2RAttentionLayer p = layer;
    p.mask_weight = layer.mask_weight.detach();
    p.mask_bias = layer.mask_bias.detach();
    p.keys = layer.keys.detach();
    p.values = layer.values.detach();
    const std::size_t c = 3, d = 4, z = 3;
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t k = 0; k < c; ++k) p.mask_weight.mutable_data()[i * c + k] = layer.mask_weight[perm[i] * c + k];
      p.mask_bias.mutable_data()[i] = layer.mask_bias[perm[i]];
      for (std::size_t k = 0; k < d; ++k) p.keys.mutable_data()[i * d + k] = layer.keys[perm[i] * d + k];
      for (std::size_t k = 0; k < z; ++k) p.values.mutable_data()[k * l + i] = layer.values[k * l + perm[i]];
    }
    const Tensor x = rng.normal_tensor({3, 4, 4}, 1.0);
    EXPECT_LE(max_abs_diff(layer.forward(x).output.data(), p.forward(x).output.data()), 1e-6);
  }
}

TEST(LayerGradientTest, AllBranchesMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const R2RAttentionLayer layer = random_layer(rng, 3, 4, 5, 3);
    const bool normalize = seed % 2 == 1;
    auto f = [normalize](const std::vector<Tensor>& in) {
      R2RAttentionLayer l{in[1], in[2], in[3], in[4], in[5], in[6], normalize};
      return l.forward(in[0]).output;
    };
    const double err = testing::max_fd_error(
        f, {testing::random_tensor(rng, {3, 4, 4}), layer.mask_weight, layer.mask_bias, layer.depthwise,
            layer.pointwise, layer.keys, layer.values});
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(LayerInitTest, RejectsSingleMask) {
  Rng rng(18);
  EXPECT_THROW(R2RAttentionLayer::init(3, 1, 4, 3, rng), ConfigError);
}

TEST(LayerInitTest, PrototypeScale) {
  Rng rng(19);
  const R2RAttentionLayer layer = R2RAttentionLayer::init(8, 64, 64, 64, rng);
  double ss = 0.0;
  for (double v : layer.keys.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / layer.keys.numel()), 0.02, 0.002);
  for (double v : layer.mask_weight.data()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace r2r
