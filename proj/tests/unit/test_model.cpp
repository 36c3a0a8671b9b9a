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
#include <set>

#include "r2r/model.hpp"
#include "r2r/rng.hpp"

namespace r2r {
namespace {

ModelConfig minimal_config() {
  ModelConfig c;
  c.stages = {StageConfig{4, 1, 2, 4, 1, 2.0}};
  c.n_classes = 3;
  c.input_channels = 1;
  c.input_size = 8;
  return c;
}

TEST(ModelBuildTest, DeskDefaultEmitsClassLogits) {
  const Model m = Model::build(ModelConfig::desk_default());
  Rng rng(0);
  const auto out = m.forward(rng.uniform_tensor({1, 64, 64}, 0.0, 1.0));
  EXPECT_EQ(out.logits.shape(), (Shape{2}));
  for (double v : out.logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ModelBuildTest, DeskResolutions) {
  EXPECT_EQ(ModelConfig::desk_default().stage_resolutions(), (std::vector<std::size_t>{16, 8, 8}));
}

TEST(ModelBuildTest, MinimalModelBuilds) {
  const Model m = Model::build(minimal_config());
  EXPECT_EQ(m.forward(Tensor::zeros({1, 8, 8})).logits.shape(), (Shape{3}));
}

TEST(ModelBuildTest, VanishingGridIsConfigError) {
  ModelConfig c = minimal_config();
  c.input_size = 2;
  c.stages[0].patch_stride = 4;  // kernel 7, padding 2: 2 + 4 - 7 < 0
  try {
    Model::build(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 0"), std::string::npos);
  }
}

TEST(ModelBuildTest, RejectsDegenerateStages) {
  ModelConfig c = minimal_config();
  c.stages[0].masks = 1;
  EXPECT_THROW(Model::build(c), ConfigError);
  c = minimal_config();
  c.stages.clear();
  EXPECT_THROW(Model::build(c), ConfigError);
}

TEST(ModelBuildTest, ParameterCountIsPureFunctionOfConfig) {
  ModelConfig a = ModelConfig::desk_default();
  ModelConfig b = a;
  b.seed = 99;
  EXPECT_EQ(Model::build(a).parameter_count(), Model::build(b).parameter_count());
}

TEST(ModelBuildTest, InventoryNamesAreUniqueAndShaped) {
  const Model m = Model::build(ModelConfig::desk_default());
  std::set<std::string> names;
  std::size_t total = 0;
  for (const auto& p : m.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    total += p.tensor.numel();
  }
  EXPECT_EQ(total, m.parameter_count());
  EXPECT_EQ(m.parameter("stage2.block1.attn.keys").shape(), (Shape{8, 64}));
  EXPECT_EQ(m.parameter("stage0.embed.weight").shape(), (Shape{16, 1, 7, 7}));
  EXPECT_EQ(m.parameter("head.weight").shape(), (Shape{2, 64}));
  EXPECT_THROW(m.parameter("nope"), ContractError);
}

TEST(ModelBuildTest, SameSeedSameWeights) {
  const Model a = Model::build(ModelConfig::desk_default());
  const Model b = Model::build(ModelConfig::desk_default());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto x = a.parameters()[i].tensor.data();
    const auto y = b.parameters()[i].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
  }
}

TEST(ModelForwardTest, ZeroHeadGivesZeroLogits) {
  Model m = Model::build(minimal_config());
  for (const char* name : {"head.weight", "head.bias"}) {
    Tensor t = m.parameter(name);
    for (double& v : t.mutable_data()) v = 0.0;
  }
  Rng rng(1);
  const Tensor logits = m.forward(rng.uniform_tensor({1, 8, 8}, 0.0, 1.0)).logits;
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(ModelForwardTest, IdenticalInputsIdenticalLogits) {
  const Model m = Model::build(ModelConfig::desk_default());
  Rng rng(2);
  const Tensor x = rng.uniform_tensor({1, 64, 64}, 0.0, 1.0);
  const auto a = m.forward(x).logits;
  const auto b = m.forward(x.detach()).logits;
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ModelForwardTest, WrongInputShapeIsDimensionError) {
  const Model m = Model::build(minimal_config());
  EXPECT_THROW(m.forward(Tensor::zeros({1, 8, 9})), DimensionError);
  EXPECT_THROW(m.forward(Tensor::zeros({2, 8, 8})), DimensionError);
}

TEST(ModelForwardTest, TracesCoverEveryBlockWithShrinkingGrids) {
  const Model m = Model::build(ModelConfig::desk_default());
  Rng rng(3);
  const auto out = m.forward(rng.uniform_tensor({1, 64, 64}, 0.0, 1.0), true);
  ASSERT_EQ(out.traces.size(), 4u);
  const auto res = m.config().stage_resolutions();
  std::size_t prev = SIZE_MAX;
  for (const auto& t : out.traces) {
    const std::size_t side = t.trace.masks.dim(1);
    EXPECT_EQ(side, res[t.stage]);
    EXPECT_LE(side, prev);
    prev = side;
    EXPECT_EQ(t.trace.attn.shape(), (Shape{8, 8}));
  }
  EXPECT_EQ(out.traces[3].stage, 2u);
  EXPECT_EQ(out.traces[3].block, 1u);
  EXPECT_TRUE(m.forward(Tensor::zeros({1, 64, 64})).traces.empty());
}

TEST(ModelForwardTest, TraceMasksAreOnTheSimplexAtEveryStage) {
  Model m = Model::build(ModelConfig::desk_default());
  // Non-zero mask branches so the check is not about the uniform start.
  Rng rng(4);
  for (const auto& p : m.parameters()) {
    if (p.name.find("attn.mask") == std::string::npos) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = rng.normal(0.0, 1.0);
  }
  const auto out = m.forward(rng.uniform_tensor({1, 64, 64}, 0.0, 1.0), true);
  for (const auto& t : out.traces) {
    const std::size_t l = t.trace.masks.dim(0);
    const std::size_t hw = t.trace.masks.dim(1) * t.trace.masks.dim(2);
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < l; ++i) {
        const double v = t.trace.masks[i * hw + p];
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        s += v;
      }
      ASSERT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(ModelTest, CloneCopiesValuesNotHandles) {
  const Model m = Model::build(minimal_config());
  Model c = m.clone();
  Tensor w = c.parameter("head.bias");
  w.mutable_data()[0] = 5.0;
  EXPECT_EQ(m.parameter("head.bias")[0], 0.0);
}

}  // namespace
}  // namespace r2r
