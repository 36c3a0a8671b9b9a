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

// Mini-batch training: per-class binary cross-entropy, AdamW, per-step
// cosine annealing, best-validation-AUC checkpointing.

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "r2r/checkpoint.hpp"
#include "r2r/data.hpp"
#include "r2r/errors.hpp"
#include "r2r/metrics.hpp"
#include "r2r/model.hpp"
#include "r2r/ops.hpp"
#include "r2r/optim.hpp"
#include "r2r/parallel.hpp"
#include "r2r/rng.hpp"

namespace r2r {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::vector<std::optional<double>> val_auc;
  std::optional<double> val_mean_auc;
  double lr = 0.0;  // learning rate of the epoch's last step
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;
  std::optional<double> best_mean_auc;
  AdamWHyper hyper;
  double lr_min = 0.0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
};

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  AdamWHyper hyper;
  double lr_min = 0.0;
  double val_fraction = 0.1;
  std::optional<std::filesystem::path> checkpoint_path;
  std::size_t threads = 1;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct DataSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Seeded permutation; the first floor(n * val_fraction) entries become the
/// validation split.
inline DataSplit split_dataset(const std::vector<Sample>& samples, double val_fraction,
                               std::uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw ContractError("val_fraction must lie in [0, 1)");
  }
  Rng rng(seed ^ 0x5851F42D4C957F2DULL);
  const auto perm = rng.permutation(samples.size());
  const auto n_val =
      static_cast<std::size_t>(std::floor(static_cast<double>(samples.size()) * val_fraction));
  DataSplit out;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    (i < n_val ? out.val : out.train).push_back(samples[perm[i]]);
  }
  return out;
}

inline std::vector<double> predict_probabilities(const Model& model, const Tensor& image) {
  NoGradGuard no_grad;
  Tensor probs = sigmoid(model.forward(image).logits);
  return {probs.data().begin(), probs.data().end()};
}

struct EvalResult {
  std::vector<std::vector<double>> probabilities;  // [sample][class]
  double mean_loss = 0.0;
  std::vector<std::optional<double>> per_class_auc;
  std::optional<double> mean_auc;
};

inline EvalResult evaluate_predictions(const Model& model, const std::vector<Sample>& samples,
                                       std::size_t threads = 1) {
  if (samples.empty()) throw ContractError("evaluation set is empty");
  EvalResult r;
  r.probabilities.resize(samples.size());
  std::vector<double> losses(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t, std::size_t i) {
    NoGradGuard no_grad;
    const Sample& s = samples[i];
    if (s.labels.size() != model.config().n_classes) {
      throw DimensionError("sample has " + std::to_string(s.labels.size()) +
                           " labels, model predicts " +
                           std::to_string(model.config().n_classes) + " classes");
    }
    Tensor logits = model.forward(s.image).logits;
    losses[i] = bce_with_logits(logits, s.targets()).item();
    Tensor probs = sigmoid(logits);
    r.probabilities[i].assign(probs.data().begin(), probs.data().end());
  });
  double total = 0.0;
  for (double l : losses) total += l;
  r.mean_loss = total / static_cast<double>(samples.size());
  std::vector<std::vector<std::uint8_t>> labels;
  for (const auto& s : samples) labels.push_back(s.labels);
  r.per_class_auc = per_class_auc(r.probabilities, labels);
  try {
    r.mean_auc = mean_auc(r.per_class_auc);
  } catch (const UndefinedMetricError&) {
    r.mean_auc = std::nullopt;
  }
  return r;
}

/// Averaged loss gradient of a batch written into model's grad buffers.
///
/// Every sample's gradient is computed in isolation (on a replica when
/// running threaded) and the per-sample buffers are summed in batch order,
/// so the result is bitwise independent of the worker count.
class BatchGradient {
 public:
  BatchGradient(const Model& model, std::size_t threads) : threads_(std::max<std::size_t>(1, threads)) {
    for (std::size_t t = 1; t < threads_; ++t) replicas_.push_back(model.clone());
  }

  /// Returns the mean loss over the batch.
  double compute(Model& model, const std::vector<const Sample*>& batch) {
    for (auto& r : replicas_) r.copy_values_from(model);
    const std::size_t b = batch.size();
    const auto& params = model.parameters();
    if (per_sample_.size() < b) per_sample_.resize(b);
    std::vector<double> losses(b);
    parallel_for(b, threads_, [&](std::size_t worker, std::size_t i) {
      Model& m = worker == 0 ? model : replicas_[worker - 1];
      m.zero_grad();
      Tensor loss = bce_with_logits(m.forward(batch[i]->image).logits, batch[i]->targets());
      backward(loss);
      losses[i] = loss.item();
      auto& buf = per_sample_[i];
      buf.clear();
      for (const auto& p : m.parameters()) {
        auto g = p.tensor.grad();
        buf.insert(buf.end(), g.begin(), g.end());
      }
    });
    const double inv = 1.0 / static_cast<double>(b);
    std::size_t offset = 0;
    for (const auto& p : params) {
      Tensor handle = p.tensor;
      auto g = handle.mutable_grad();
      for (std::size_t j = 0; j < g.size(); ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < b; ++i) acc += per_sample_[i][offset + j];
        g[j] = acc * inv;
      }
      offset += g.size();
    }
    double total = 0.0;
    for (double l : losses) total += l;
    return total * inv;
  }

 private:
  std::size_t threads_;
  std::vector<Model> replicas_;
  std::vector<std::vector<double>> per_sample_;
};

/// Trains `model` in place on a seeded 90/10 (by default) split of `dataset`.
/// When a checkpoint path is given, the model and optimizer state of the epoch
/// with the best validation mean AUC are written there (the final epoch if no
/// validation AUC is ever defined). A non-finite loss or gradient writes
/// "<checkpoint>.diverged" and throws NumericError.
inline TrainReport train(Model& model, const std::vector<Sample>& dataset,
                         const TrainOptions& opt) {
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  if (opt.epochs < 1) throw ContractError("train: epochs must be >= 1");
  DataSplit split = split_dataset(dataset, opt.val_fraction, opt.seed);
  if (split.train.empty()) throw ContractError("train: no samples left after the validation split");

  TrainReport report;
  report.hyper = opt.hyper;
  report.lr_min = opt.lr_min;
  report.batch_size = opt.batch_size;
  report.seed = opt.seed;
  report.n_train = split.train.size();
  report.n_val = split.val.size();

  OptimState state = OptimState::for_parameters(model.parameters(), opt.hyper);
  BatchIterator batches(split.train, opt.batch_size, opt.seed);
  BatchGradient grad(model, opt.threads);
  const std::size_t steps_per_epoch = (split.train.size() + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = steps_per_epoch * opt.epochs;
  std::size_t step = 0;

  auto diverged = [&](const std::string& why) {
    const std::filesystem::path diag =
        opt.checkpoint_path ? std::filesystem::path(opt.checkpoint_path->string() + ".diverged")
                            : std::filesystem::path("diverged.r2rp");
    save_checkpoint(model, &state, diag);
    throw NumericError("training diverged (" + why + "); diagnostic checkpoint " + diag.string());
  };

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : batches.next_epoch()) {
      const double loss = grad.compute(model, batch);
      if (!std::isfinite(loss)) diverged("non-finite loss at step " + std::to_string(step));
      rec.lr = cosine_lr(step, total_steps, opt.hyper.lr, opt.lr_min);
      try {
        adamw_step(model.parameters(), state, rec.lr);
      } catch (const NumericError& e) {
        diverged(e.what());
      }
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
    }
    rec.train_loss = loss_sum / static_cast<double>(seen);
    if (!split.val.empty()) {
      EvalResult ev = evaluate_predictions(model, split.val, opt.threads);
      rec.val_loss = ev.mean_loss;
      rec.val_auc = ev.per_class_auc;
      rec.val_mean_auc = ev.mean_auc;
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const bool improved =
        rec.val_mean_auc && (!report.best_mean_auc || *rec.val_mean_auc > *report.best_mean_auc);
    if (improved) {
      report.best_mean_auc = rec.val_mean_auc;
      report.best_epoch = epoch;
    }
    const bool last_without_auc = !report.best_mean_auc && epoch + 1 == opt.epochs;
    if (opt.checkpoint_path && (improved || last_without_auc)) {
      save_checkpoint(model, &state, *opt.checkpoint_path);
    }
    report.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  return report;
}

}  // namespace r2r
