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

// JSON views of training, evaluation and gradient-check reports.

#pragma once

#include <optional>
#include <string>

#include "json.hpp"
#include "r2r/explain.hpp"
#include "r2r/gradcheck.hpp"
#include "r2r/train.hpp"

namespace r2r {

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
}  // namespace detail

/// Flat object: one key per class name (AUC, or null when undefined), then
/// mean_auc and the localization rates.
inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < r.class_names.size(); ++c) {
    j[r.class_names[c]] = detail::opt_json(r.per_class_auc[c]);
  }
  j["mean_auc"] = detail::opt_json(r.mean_auc);
  j["iou_rate"] = detail::opt_json(r.iou_rate);
  j["pointing_rate"] = detail::opt_json(r.pointing_rate);
  j["mean_iou"] = detail::opt_json(r.mean_iou);
  j["n_localized"] = r.n_localized;
  return j;
}

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    nlohmann::json aucs = nlohmann::json::array();
    for (const auto& a : e.val_auc) aucs.push_back(detail::opt_json(a));
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", detail::opt_json(e.val_loss)},
                      {"val_auc", aucs},
                      {"val_mean_auc", detail::opt_json(e.val_mean_auc)},
                      {"lr", e.lr},
                      {"wall_seconds", e.wall_seconds}});
  }
  nlohmann::json best_epoch = r.best_epoch ? nlohmann::json(*r.best_epoch) : nlohmann::json(nullptr);
  return {{"epochs", epochs},
          {"best_epoch", best_epoch},
          {"best_mean_auc", detail::opt_json(r.best_mean_auc)},
          {"optimizer",
           {{"lr", r.hyper.lr},
            {"weight_decay", r.hyper.weight_decay},
            {"beta1", r.hyper.beta1},
            {"beta2", r.hyper.beta2},
            {"eps", r.hyper.eps},
            {"lr_min", r.lr_min}}},
          {"batch_size", r.batch_size},
          {"seed", r.seed},
          {"n_train", r.n_train},
          {"n_val", r.n_val}};
}

inline nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& g : r.groups) groups[g.name] = g.max_rel_error;
  return {{"groups", groups},
          {"max_rel_error", r.max_rel_error},
          {"passed", r.passed},
          {"seconds", r.seconds}};
}

}  // namespace r2r
