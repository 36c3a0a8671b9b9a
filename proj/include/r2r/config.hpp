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

// JSON run configuration. Parsing is strict: unknown keys and wrongly typed
// values are rejected with the offending key path.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "r2r/errors.hpp"
#include "r2r/model.hpp"
#include "r2r/optim.hpp"

namespace r2r {

struct DataConfig {
  std::optional<std::string> manifest;  // CSV manifest; wins over `synthetic`
  std::size_t synthetic = 2000;         // samples generated when no manifest
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  AdamWHyper hyper;
  double lr_min = 0.0;
  double val_fraction = 0.1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  std::size_t threads = 0;  // 0: use the R2R_THREADS / hardware budget
  DataConfig data;
  ModelConfig model = ModelConfig::desk_default();
  TrainConfig train;

  /// Model config with the run seed applied.
  ModelConfig effective_model() const {
    ModelConfig m = model;
    m.seed = seed;
    return m;
  }

  void validate() const {
    model.validate();
    if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(train.hyper.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (train.hyper.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (train.hyper.beta1 < 0.0 || train.hyper.beta1 >= 1.0) throw ConfigError("train.beta1 must lie in [0, 1)");
    if (train.hyper.beta2 < 0.0 || train.hyper.beta2 >= 1.0) throw ConfigError("train.beta2 must lie in [0, 1)");
    if (!(train.hyper.eps > 0.0)) throw ConfigError("train.eps must be positive");
    if (train.lr_min < 0.0 || train.lr_min > train.hyper.lr) throw ConfigError("train.lr_min must lie in [0, lr]");
    if (train.val_fraction < 0.0 || train.val_fraction >= 1.0) throw ConfigError("train.val_fraction must lie in [0, 1)");
    if (!data.manifest && data.synthetic < 1) throw ConfigError("data.synthetic must be >= 1");
  }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                           const std::string& path) {
  if (!obj.is_object()) {
    const std::string where = path.empty() ? "<root>" : path.substr(0, path.size() - 1);
    throw ConfigError("key '" + where + "': expected an object");
  }
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + path + key + "'");
  }
}

template <typename T>
void read_key(const json& obj, const char* key, const std::string& path, T& dst) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  const std::string where = path + key;
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!it->is_number_unsigned()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError("");
    }
    dst = it->get<T>();
  } catch (const std::exception&) {
    throw ConfigError("key '" + where + "': expected " +
                      (std::is_same_v<T, std::string> ? std::string("a string")
                       : std::is_floating_point_v<T>  ? std::string("a number")
                                                      : std::string("a non-negative integer")) +
                      ", got " + it->dump());
  }
}

inline StageConfig parse_stage(const json& j, const std::string& path) {
  reject_unknown(j, {"embed_channels", "blocks", "masks", "query_width", "patch_stride", "mlp_ratio"},
                 path);
  StageConfig s;
  read_key(j, "embed_channels", path, s.embed_channels);
  read_key(j, "blocks", path, s.blocks);
  read_key(j, "masks", path, s.masks);
  read_key(j, "query_width", path, s.query_width);
  read_key(j, "patch_stride", path, s.patch_stride);
  read_key(j, "mlp_ratio", path, s.mlp_ratio);
  return s;
}

inline ModelConfig parse_model(const json& j, const std::string& path) {
  reject_unknown(j, {"n_classes", "input_channels", "input_size", "pooling", "stages"}, path);
  ModelConfig m = ModelConfig::desk_default();
  read_key(j, "n_classes", path, m.n_classes);
  read_key(j, "input_channels", path, m.input_channels);
  read_key(j, "input_size", path, m.input_size);
  if (j.contains("pooling")) {
    std::string p;
    read_key(j, "pooling", path, p);
    if (p == "sum") {
      m.pooling = Pooling::kSum;
    } else if (p == "normalized") {
      m.pooling = Pooling::kNormalized;
    } else {
      throw ConfigError("key '" + path + "pooling': expected \"sum\" or \"normalized\", got \"" + p + "\"");
    }
  }
  if (j.contains("stages")) {
    const json& st = j.at("stages");
    if (!st.is_array()) throw ConfigError("key '" + path + "stages': expected an array");
    m.stages.clear();
    for (std::size_t i = 0; i < st.size(); ++i) {
      m.stages.push_back(parse_stage(st[i], path + "stages[" + std::to_string(i) + "]."));
    }
  }
  return m;
}

}  // namespace detail

/// Parses JSON text into a RunConfig; absent keys keep their defaults.
inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  using nlohmann::json;
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": " + e.what());
  }
  RunConfig c;
  detail::reject_unknown(root, {"seed", "output_dir", "threads", "data", "model", "train"}, "");
  detail::read_key(root, "seed", "", c.seed);
  detail::read_key(root, "output_dir", "", c.output_dir);
  detail::read_key(root, "threads", "", c.threads);
  if (root.contains("data")) {
    const json& d = root.at("data");
    detail::reject_unknown(d, {"manifest", "synthetic"}, "data.");
    if (d.contains("manifest") && !d.at("manifest").is_null()) {
      std::string m;
      detail::read_key(d, "manifest", "data.", m);
      c.data.manifest = m;
    }
    detail::read_key(d, "synthetic", "data.", c.data.synthetic);
  }
  if (root.contains("model")) c.model = detail::parse_model(root.at("model"), "model.");
  if (root.contains("train")) {
    const json& t = root.at("train");
    detail::reject_unknown(t, {"epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "eps",
                               "lr_min", "val_fraction"},
                           "train.");
    detail::read_key(t, "epochs", "train.", c.train.epochs);
    detail::read_key(t, "batch_size", "train.", c.train.batch_size);
    detail::read_key(t, "lr", "train.", c.train.hyper.lr);
    detail::read_key(t, "weight_decay", "train.", c.train.hyper.weight_decay);
    detail::read_key(t, "beta1", "train.", c.train.hyper.beta1);
    detail::read_key(t, "beta2", "train.", c.train.hyper.beta2);
    detail::read_key(t, "eps", "train.", c.train.hyper.eps);
    detail::read_key(t, "lr_min", "train.", c.train.lr_min);
    detail::read_key(t, "val_fraction", "train.", c.train.val_fraction);
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

inline nlohmann::json to_json(const ModelConfig& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    stages.push_back({{"embed_channels", s.embed_channels},
                      {"blocks", s.blocks},
                      {"masks", s.masks},
                      {"query_width", s.effective_query_width()},
                      {"patch_stride", s.patch_stride},
                      {"mlp_ratio", s.mlp_ratio}});
  }
  return {{"n_classes", m.n_classes},
          {"input_channels", m.input_channels},
          {"input_size", m.input_size},
          {"pooling", to_string(m.pooling)},
          {"stages", stages}};
}

/// Fully materialized configuration, suitable for echoing and re-parsing.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data = {{"synthetic", c.data.synthetic}};
  data["manifest"] = c.data.manifest ? nlohmann::json(*c.data.manifest) : nlohmann::json(nullptr);
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"threads", c.threads},
          {"data", data},
          {"model", to_json(c.model)},
          {"train",
           {{"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"lr", c.train.hyper.lr},
            {"weight_decay", c.train.hyper.weight_decay},
            {"beta1", c.train.hyper.beta1},
            {"beta2", c.train.hyper.beta2},
            {"eps", c.train.hyper.eps},
            {"lr_min", c.train.lr_min},
            {"val_fraction", c.train.val_fraction}}}};
}

}  // namespace r2r
