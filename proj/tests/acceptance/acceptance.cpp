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


// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Run from the build directory; scratch files go under
// ./acceptance_work/.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "r2r/r2r.hpp"

namespace fs = std::filesystem;
using namespace r2r;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Redraws every mask-branch and prototype parameter so masks and attention
/// are far from their symmetric initial state.
void scramble_attention(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : m.parameters()) {
    const bool mask = p.name.find("attn.mask") != std::string::npos;
    const bool proto = p.name.find("attn.keys") != std::string::npos ||
                       p.name.find("attn.values") != std::string::npos;
    if (!mask && !proto) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = rng.normal(0.0, mask ? 1.0 : 0.5);
  }
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

Outcome criterion1() {
  const auto r = run_gradcheck();
  return {r.passed && r.seconds <= 60.0,
          "max rel error " + fmt("%.3e", r.max_rel_error) + " in " + fmt("%.2f", r.seconds) + " s"};
}

// ---------------------------------------------------------------------------
// 2. oracle equivalence

std::vector<double> loop_queries(const Tensor& m, const Tensor& f) {
  const std::size_t l = m.dim(0), d = f.dim(0), hw = m.dim(1) * m.dim(2);
  std::vector<double> q(l * d, 0.0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t p = 0; p < hw; ++p) q[i * d + c] += m[i * hw + p] * f[c * hw + p];
  return q;
}

std::vector<double> loop_attention(const Tensor& q, const Tensor& k) {
  const std::size_t l = q.dim(0), lk = k.dim(0), d = q.dim(1);
  std::vector<double> a(l * lk);
  for (std::size_t i = 0; i < l; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < lk; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
      a[i * lk + j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, a[i * lk + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < lk; ++j) z += (a[i * lk + j] = std::exp(a[i * lk + j] - mx));
    for (std::size_t j = 0; j < lk; ++j) a[i * lk + j] /= z;
  }
  return a;
}

std::vector<double> loop_weight(const Tensor& attn, const Tensor& m) {
  const std::size_t l = m.dim(0), hw = m.dim(1) * m.dim(2);
  std::vector<double> wm(l * hw, 0.0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < l; ++j)
      for (std::size_t p = 0; p < hw; ++p) wm[i * hw + p] += attn[i * l + j] * m[j * hw + p];
  return wm;
}

std::vector<double> loop_output(const Tensor& v, const Tensor& wm) {
  const std::size_t z = v.dim(0), l = v.dim(1), hw = wm.dim(1) * wm.dim(2);
  std::vector<double> o(z * hw, 0.0);
  for (std::size_t c = 0; c < z; ++c)
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t p = 0; p < hw; ++p) o[c * hw + p] += v[c * l + i] * wm[i * hw + p];
  return o;
}

Outcome criterion2() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t l = 2 + rng.index(7), h = 1 + rng.index(6), w = 1 + rng.index(6);
    const std::size_t d = 1 + rng.index(8), z = 1 + rng.index(8);
    const Tensor m = softmax(rng.normal_tensor({l, h, w}, 2.0), 0);
    const Tensor f = rng.normal_tensor({d, h, w}, 1.0);
    const Tensor k = rng.normal_tensor({l, d}, 1.0);
    const Tensor v = rng.normal_tensor({z, l}, 1.0);
    const Tensor q = masked_pool_queries(m, f, false);
    const Tensor a = region_attention(q, k);
    const Tensor wm = weight_masks(a, m);
    const Tensor o = reconstruct_output(v, wm);
    worst = std::max({worst, max_abs_diff(q.data(), loop_queries(m, f)),
                      max_abs_diff(a.data(), loop_attention(q, k)),
                      max_abs_diff(wm.data(), loop_weight(a, m)),
                      max_abs_diff(o.data(), loop_output(v, wm))});
  }
  return {worst <= 1e-10, "max abs difference " + fmt("%.3e", worst) + " over 20 seeds"};
}

// ---------------------------------------------------------------------------
// 3. mask simplex

Outcome criterion3() {
  Model model = Model::build(ModelConfig::desk_default());
  scramble_attention(model, 3);
  Rng rng(30);
  double worst_sum = 0.0;
  bool in_range = true;
  std::size_t blocks = 0;
  for (int n = 0; n < 100; ++n) {
    NoGradGuard no_grad;
    const auto out = model.forward(rng.uniform_tensor({1, 64, 64}, 0.0, 1.0), true);
    blocks = out.traces.size();
    for (const auto& t : out.traces) {
      const std::size_t l = t.trace.masks.dim(0);
      const std::size_t hw = t.trace.masks.dim(1) * t.trace.masks.dim(2);
      for (std::size_t p = 0; p < hw; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
          const double v = t.trace.masks[i * hw + p];
          in_range &= v >= 0.0 && v <= 1.0;
          s += v;
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }
  }
  return {in_range && worst_sum <= 1e-6 && blocks == 4,
          "max |sum - 1| " + fmt("%.3e", worst_sum) + " over 100 inputs x " + std::to_string(blocks) +
              " blocks (mask branches randomized)"};
}

// ---------------------------------------------------------------------------
// 4. permutation equivariance

Outcome criterion4() {
  Model model = Model::build(ModelConfig::desk_default());
  scramble_attention(model, 4);
  Model permuted = model.clone();
  Rng rng(40);
  for (std::size_t s = 0; s < model.stages().size(); ++s) {
    for (std::size_t b = 0; b < model.stages()[s].blocks.size(); ++b) {
      const auto& src = model.stages()[s].blocks[b].attention;
      auto& dst = permuted.stages()[s].blocks[b].attention;
      const std::size_t l = src.masks(), c = src.in_channels(), d = src.query_width(), z = src.value_width();
      const auto perm = rng.permutation(l);
      for (std::size_t i = 0; i < l; ++i) {
        for (std::size_t k = 0; k < c; ++k) dst.mask_weight.mutable_data()[i * c + k] = src.mask_weight[perm[i] * c + k];
        dst.mask_bias.mutable_data()[i] = src.mask_bias[perm[i]];
        for (std::size_t k = 0; k < d; ++k) dst.keys.mutable_data()[i * d + k] = src.keys[perm[i] * d + k];
        for (std::size_t k = 0; k < z; ++k) dst.values.mutable_data()[k * l + i] = src.values[k * l + perm[i]];
      }
    }
  }
  double worst = 0.0;
  for (int n = 0; n < 10; ++n) {
    NoGradGuard no_grad;
    const Tensor x = rng.uniform_tensor({1, 64, 64}, 0.0, 1.0);
    worst = std::max(worst, max_abs_diff(model.forward(x).logits.data(), permuted.forward(x).logits.data()));
  }
  return {worst <= 1e-6, "max logit change " + fmt("%.3e", worst) + " over 10 inputs"};
}

// ---------------------------------------------------------------------------
// 5 and 6. desk-scale learning and explanation fidelity

struct DeskRun {
  bool ran = false;
  fs::path checkpoint;
};

Outcome criterion5(const fs::path& work, DeskRun& run) {
  const auto data = generate_synthetic(2000, 64, 0);
  Model model = Model::build(ModelConfig::desk_default());
  TrainOptions opt;  // 30 epochs, batch 16, seed 0, lr 2.5e-4, wd 0.05
  opt.threads = thread_budget();
  opt.checkpoint_path = work / "desk.r2rp";
  opt.on_epoch = [](const EpochRecord& r) {
    std::fprintf(stderr, "  desk epoch %2zu loss %.4f val mean AUC %.4f (%.1fs)\n", r.epoch, r.train_loss,
                 r.val_mean_auc.value_or(NAN), r.wall_seconds);
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = train(model, data, opt);
  const double secs = seconds_since(t0);
  run = {true, *opt.checkpoint_path};
  const double best = report.best_mean_auc.value_or(0.0);
  return {best >= 0.90 && secs <= 600.0,
          "best validation mean AUC " + fmt("%.4f", best) + " (epoch " +
              std::to_string(report.best_epoch.value_or(0)) + "), " + fmt("%.0f", secs) + " s on " +
              std::to_string(opt.threads) + " thread(s)"};
}

Outcome criterion6(const DeskRun& run) {
  if (!run.ran) return {false, "desk training did not run"};
  const Model model = load_checkpoint(run.checkpoint).model;
  // Held out: a different generator seed from the training data.
  std::vector<Sample> positives;
  for (auto& s : generate_synthetic(400, 64, 1)) {
    if (s.has_gt() && positives.size() < 200) positives.push_back(std::move(s));
  }
  std::vector<Localization> scores(positives.size());
  parallel_for(positives.size(), thread_budget(), [&](std::size_t, std::size_t i) {
    scores[i] = localize_sample(model, positives[i], LocalizationOptions{});
  });
  double hits = 0.0, iou = 0.0;
  for (const auto& l : scores) {
    hits += l.pointing_hit;
    iou += l.iou;
  }
  const double n = static_cast<double>(scores.size());
  const double point = hits / n, mean_iou = iou / n;
  return {scores.size() == 200 && point >= 0.6 && mean_iou >= 0.3,
          "pointing " + fmt("%.3f", point) + ", mean IoU " + fmt("%.3f", mean_iou) + " on " +
              std::to_string(scores.size()) + " positives, final stage, top-1 by mass"};
}

// ---------------------------------------------------------------------------
// 7. metric correctness

Outcome criterion7() {
  Rng rng(70);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(25);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(5));
      y[i] = rng.bernoulli(0.5);
    }
    y[0] = 1;
    y[1] = 0;
    double hits = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] && !y[j]) {
          pairs += 1.0;
          hits += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    worst = std::max(worst, std::abs(roc_auc(s, y) - hits / pairs));
  }
  const std::vector<double> ex{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> ey{0, 0, 1, 1};
  const double worked = roc_auc(ex, ey);
  return {worst <= 1e-9 && std::abs(worked - 0.75) <= 1e-12,
          "max deviation " + fmt("%.3e", worst) + " on 1000 instances, worked example " + fmt("%.4f", worked)};
}

// ---------------------------------------------------------------------------
// 8. reproducibility

std::vector<char> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion8(const fs::path& work) {
  const auto data = generate_synthetic(200, 64, 8);
  auto run = [&](const fs::path& path) {
    Model model = Model::build(ModelConfig::desk_default());
    TrainOptions opt;
    opt.epochs = 2;
    opt.seed = 8;
    opt.threads = thread_budget();
    opt.checkpoint_path = path;
    train(model, data, opt);
  };
  run(work / "repro_a.r2rp");
  run(work / "repro_b.r2rp");
  const bool identical = bytes_of(work / "repro_a.r2rp") == bytes_of(work / "repro_b.r2rp");

  // Round trip: a saved model against its reloaded copy.
  const Model first = load_checkpoint(work / "repro_a.r2rp").model;
  Model trained = first.clone();
  Rng rng(80);
  for (const auto& p : trained.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += rng.normal(0.0, 1e-3);  // full double precision values
  }
  save_checkpoint(trained, nullptr, work / "roundtrip.r2rp");
  const Model reloaded = load_checkpoint(work / "roundtrip.r2rp").model;
  double worst = 0.0;
  for (int n = 0; n < 20; ++n) {
    NoGradGuard no_grad;
    const Tensor x = rng.uniform_tensor({1, 64, 64}, 0.0, 1.0);
    worst = std::max(worst, max_abs_diff(trained.forward(x).logits.data(), reloaded.forward(x).logits.data()));
  }
  return {identical && worst <= 1e-6, std::string(identical ? "checkpoints bitwise identical" : "checkpoints differ") +
                                          ", round-trip max logit change " + fmt("%.3e", worst)};
}

// ---------------------------------------------------------------------------
// 9. overfit sanity

Outcome criterion9() {
  // One sample per label pattern so both class AUCs are defined.
  std::vector<Sample> four;
  std::vector<bool> taken(4, false);
  for (auto& s : generate_synthetic(64, 64, 9)) {
    const std::size_t pattern = 2 * s.labels[0] + s.labels[1];
    if (!taken[pattern]) {
      taken[pattern] = true;
      four.push_back(std::move(s));
    }
  }
  Model model = Model::build(ModelConfig::desk_default());
  TrainOptions opt;
  opt.epochs = 200;
  opt.batch_size = 4;
  opt.val_fraction = 0.0;
  opt.threads = thread_budget();
  const auto report = train(model, four, opt);
  std::size_t reached = 0;
  for (const auto& e : report.epochs) {
    if (e.train_loss < 0.05) {
      reached = e.epoch + 1;
      break;
    }
  }
  const double final_loss = report.epochs.back().train_loss;
  const auto ev = evaluate_predictions(model, four);
  const double auc = ev.mean_auc.value_or(0.0);
  return {four.size() == 4 && final_loss < 0.05 && auc == 1.0,
          "final loss " + fmt("%.4f", final_loss) +
              (reached ? " (below 0.05 from epoch " + std::to_string(reached) + ")" : std::string(", never below 0.05")) +
              ", self-eval mean AUC " + fmt("%.4f", auc)};
}

}  // namespace

int main() {
  const fs::path work = fs::absolute("acceptance_work");
  fs::create_directories(work);
  DeskRun desk;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient fidelity", criterion1},
      {"oracle equivalence", criterion2},
      {"mask simplex", criterion3},
      {"prototype permutation equivariance", criterion4},
      {"desk-scale learning", [&] { return criterion5(work, desk); }},
      {"explanation fidelity", [&] { return criterion6(desk); }},
      {"metric correctness", criterion7},
      {"reproducibility", [&] { return criterion8(work); }},
      {"overfit sanity", criterion9},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %zu %-36s %s  %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
