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

// r2r: train, evaluate, explain and gradient-check region-to-region
// attention classifiers.
//
// Exit codes: 0 success, 1 runtime failure (divergence, failed gradient
// check, I/O), 2 usage, configuration or input-data errors. Every failure
// prints a single line starting with "error:" to stderr.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "r2r/r2r.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Raised for invalid command-line combinations; maps to exit code 2.
struct UsageError : r2r::Error {
  using r2r::Error::Error;
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

/// 2 for bad usage, configuration or input data; 1 for everything else.
int exit_code_for(const std::exception& e) {
  const bool bad_input = dynamic_cast<const UsageError*>(&e) || dynamic_cast<const r2r::ConfigError*>(&e) ||
                         dynamic_cast<const r2r::ParseError*>(&e) ||
                         dynamic_cast<const r2r::IngestionError*>(&e) ||
                         dynamic_cast<const r2r::FormatError*>(&e) ||
                         dynamic_cast<const r2r::DimensionError*>(&e) ||
                         dynamic_cast<const r2r::ContractError*>(&e);
  return bad_input ? 2 : 1;
}

void echo_config(const json& j) { std::cerr << "config: " << j.dump() << "\n"; }

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw r2r::IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::size_t resolve_threads(std::size_t requested) {
  const std::size_t budget = r2r::thread_budget();
  return requested == 0 ? budget : std::min(requested, budget);
}

r2r::ActivityMode parse_activity(const std::string& s) {
  if (s == "mass") return r2r::ActivityMode::kMass;
  if (s == "argmax") return r2r::ActivityMode::kArgmax;
  throw UsageError("--activity must be 'mass' or 'argmax', got '" + s + "'");
}

struct Dataset {
  std::vector<r2r::Sample> samples;
  std::vector<std::string> class_names;
  std::string source;
};

Dataset load_dataset(const std::optional<std::string>& manifest, std::size_t synthetic,
                     std::size_t size, std::uint64_t seed) {
  Dataset d;
  if (manifest) {
    const auto m = r2r::load_manifest(*manifest);
    d.samples = r2r::load_samples(m);
    d.class_names = m.class_names;
    d.source = *manifest;
  } else {
    d.samples = r2r::generate_synthetic(synthetic, size, seed);
    d.class_names = r2r::synthetic_class_names();
    d.source = "synthetic(n=" + std::to_string(synthetic) + ", seed=" + std::to_string(seed) + ")";
  }
  return d;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::optional<std::string> manifest;
  std::optional<std::size_t> synthetic;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
  std::optional<std::string> run_dir;
  std::optional<std::string> export_data;
};

int cmd_train(const TrainArgs& a) {
  r2r::RunConfig cfg = a.config.empty() ? r2r::RunConfig{} : r2r::load_run_config(a.config);
  if (a.manifest) cfg.data.manifest = a.manifest;
  if (a.synthetic) {
    cfg.data.manifest.reset();
    cfg.data.synthetic = *a.synthetic;
  }
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (a.threads) cfg.threads = *a.threads;
  if (a.out) cfg.output_dir = *a.out;
  cfg.validate();

  const fs::path run_dir =
      a.run_dir ? fs::path(*a.run_dir)
                : fs::path(cfg.output_dir) / (utc_timestamp() + "-" + std::to_string(cfg.seed));
  fs::create_directories(run_dir);
  json effective = r2r::to_json(cfg);
  effective["run_dir"] = run_dir.string();
  effective["threads_resolved"] = resolve_threads(cfg.threads);
  echo_config(effective);
  write_json(run_dir / "effective_config.json", effective);

  Dataset data = load_dataset(cfg.data.manifest, cfg.data.synthetic, cfg.model.input_size, cfg.seed);
  if (data.samples.empty()) throw UsageError("dataset " + data.source + " is empty");
  if (data.class_names.size() != cfg.model.n_classes) {
    throw UsageError("dataset has " + std::to_string(data.class_names.size()) +
                     " classes but model.n_classes is " + std::to_string(cfg.model.n_classes));
  }
  if (a.export_data) r2r::export_dataset(data.samples, data.class_names, *a.export_data);

  r2r::Model model = r2r::Model::build(cfg.effective_model());
  r2r::TrainOptions opt;
  opt.epochs = cfg.train.epochs;
  opt.batch_size = cfg.train.batch_size;
  opt.seed = cfg.seed;
  opt.hyper = cfg.train.hyper;
  opt.lr_min = cfg.train.lr_min;
  opt.val_fraction = cfg.train.val_fraction;
  opt.checkpoint_path = run_dir / "checkpoint.r2rp";
  opt.threads = resolve_threads(cfg.threads);
  opt.on_epoch = [](const r2r::EpochRecord& r) {
    std::fprintf(stderr, "epoch %zu train_loss %.5f val_loss %s val_mean_auc %s lr %.3e (%.1fs)\n",
                 r.epoch, r.train_loss,
                 r.val_loss ? std::to_string(*r.val_loss).c_str() : "n/a",
                 r.val_mean_auc ? std::to_string(*r.val_mean_auc).c_str() : "n/a", r.lr,
                 r.wall_seconds);
  };
  const r2r::TrainReport report = r2r::train(model, data.samples, opt);
  json j = r2r::to_json(report);
  j["checkpoint"] = opt.checkpoint_path->string();
  j["checkpoint_crc32"] = r2r::checkpoint_crc(*opt.checkpoint_path);
  write_json(run_dir / "train_report.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::string> manifest;
  std::optional<std::size_t> synthetic;
  std::uint64_t data_seed = 0;
  std::optional<std::size_t> stage;
  std::string activity = "mass";
  std::optional<std::string> out;
  std::size_t threads = 0;
};

int cmd_eval(const EvalArgs& a) {
  if (a.manifest.has_value() == a.synthetic.has_value()) {
    throw UsageError("eval needs exactly one of --manifest or --synthetic");
  }
  const r2r::ActivityMode mode = parse_activity(a.activity);
  auto ckpt = r2r::load_checkpoint(a.checkpoint);
  const auto& mc = ckpt.model.config();
  if (a.stage && *a.stage >= mc.stages.size()) {
    throw UsageError("--stage " + std::to_string(*a.stage) + " out of range; model has " +
                     std::to_string(mc.stages.size()) + " stages");
  }
  const fs::path out = a.out ? fs::path(*a.out) : fs::path(a.checkpoint).parent_path() / "metrics.json";
  const std::size_t threads = resolve_threads(a.threads);
  echo_config({{"command", "eval"},
               {"checkpoint", a.checkpoint},
               {"manifest", a.manifest ? json(*a.manifest) : json(nullptr)},
               {"synthetic", a.synthetic ? json(*a.synthetic) : json(nullptr)},
               {"data_seed", a.data_seed},
               {"stage", a.stage ? *a.stage : mc.stages.size() - 1},
               {"activity", r2r::to_string(mode)},
               {"out", out.string()},
               {"threads_resolved", threads},
               {"model", r2r::to_json(mc)}});

  Dataset data = load_dataset(a.manifest, a.synthetic.value_or(0), mc.input_size, a.data_seed);
  if (data.samples.empty()) throw UsageError("dataset " + data.source + " is empty");
  if (data.class_names.size() != mc.n_classes) {
    throw UsageError("dataset has " + std::to_string(data.class_names.size()) +
                     " classes but the checkpoint predicts " + std::to_string(mc.n_classes));
  }
  r2r::LocalizationOptions loc{a.stage, mode};
  const auto report = r2r::evaluate_model(ckpt.model, data.samples, data.class_names, threads, loc);
  const json j = r2r::to_json(report);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_json(out, j);
  std::cout << j.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainArgs {
  std::string checkpoint;
  std::string image;
  std::string stage = "last";
  std::size_t topk = 1;
  std::string activity = "mass";
  std::string out = "explain";
  std::optional<std::string> gt;
};

int cmd_explain(const ExplainArgs& a) {
  const r2r::ActivityMode mode = parse_activity(a.activity);
  auto ckpt = r2r::load_checkpoint(a.checkpoint);
  const auto& mc = ckpt.model.config();
  std::vector<std::size_t> stages;
  if (a.stage == "all") {
    for (std::size_t s = 0; s < mc.stages.size(); ++s) stages.push_back(s);
  } else if (a.stage == "last") {
    stages.push_back(mc.stages.size() - 1);
  } else {
    std::size_t s = 0;
    try {
      std::size_t used = 0;
      s = std::stoul(a.stage, &used);
      if (used != a.stage.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw UsageError("--stage must be an index, 'last' or 'all', got '" + a.stage + "'");
    }
    if (s >= mc.stages.size()) {
      throw UsageError("--stage " + a.stage + " out of range; model has " +
                       std::to_string(mc.stages.size()) + " stages");
    }
    stages.push_back(s);
  }
  for (std::size_t s : stages) {
    if (a.topk < 1 || a.topk > mc.stages[s].masks) {
      throw UsageError("--topk " + std::to_string(a.topk) + " must lie in [1, L = " +
                       std::to_string(mc.stages[s].masks) + "] for stage " + std::to_string(s));
    }
  }
  echo_config({{"command", "explain"},
               {"checkpoint", a.checkpoint},
               {"image", a.image},
               {"stage", a.stage},
               {"stages_resolved", stages},
               {"topk", a.topk},
               {"activity", r2r::to_string(mode)},
               {"out", a.out},
               {"gt", a.gt ? json(*a.gt) : json(nullptr)}});

  const r2r::Tensor image = r2r::read_image(a.image);
  std::optional<r2r::BinaryMask> gt;
  if (a.gt) {
    const r2r::Tensor g = r2r::read_image(*a.gt);
    gt = r2r::BinaryMask::empty(g.dim(1), g.dim(2));
    for (std::size_t p = 0; p < gt->bits.size(); ++p) gt->bits[p] = g[p] > 0.5 ? 1 : 0;
  }
  r2r::ModelOutput out;
  {
    r2r::NoGradGuard no_grad;
    out = ckpt.model.forward(image, true);
  }
  fs::create_directories(a.out);
  const r2r::Tensor probs = r2r::sigmoid(out.logits);
  std::printf("probabilities:");
  for (std::size_t c = 0; c < probs.numel(); ++c) std::printf(" %.4f", probs[c]);
  std::printf("\n%-6s %-6s %-5s %-5s %-12s %-5s %s\n", "stage", "block", "rank", "mask",
              "activity", "flat", "overlay");
  for (const auto& trace : out.traces) {
    if (std::find(stages.begin(), stages.end(), trace.stage) == stages.end()) continue;
    const auto expl = r2r::make_explanation(trace, mode);
    const auto top = r2r::select_active_masks(expl, a.topk, image.dim(1), image.dim(2));
    for (std::size_t r = 0; r < top.size(); ++r) {
      const fs::path path = fs::path(a.out) / ("stage" + std::to_string(trace.stage) + "_block" +
                                               std::to_string(trace.block) + "_rank" +
                                               std::to_string(r) + "_mask" +
                                               std::to_string(top[r].index) + ".ppm");
      r2r::render_overlay(image, top[r].heatmap, path);
      std::printf("%-6zu %-6zu %-5zu %-5zu %-12.6g %-5s %s", trace.stage, trace.block, r,
                  top[r].index, top[r].activity, top[r].flat ? "yes" : "no", path.c_str());
      if (gt) {
        const auto l = r2r::localization_score(top[r].heatmap, *gt);
        std::printf("  iou %.4f pointing_hit %s", l.iou, l.pointing_hit ? "true" : "false");
      }
      std::printf("\n");
      if (top[r].flat) std::fprintf(stderr, "warning: mask %zu has a flat heatmap\n", top[r].index);
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(std::uint64_t seed, bool inject_fault) {
  r2r::GradcheckOptions opt;
  opt.seed = seed;
  opt.inject_fault = inject_fault;
  echo_config({{"command", "gradcheck"},
               {"seed", seed},
               {"step", opt.step},
               {"tolerance", opt.tolerance},
               {"model", r2r::to_json(r2r::gradcheck_micro_config(seed))}});
  const auto report = r2r::run_gradcheck(opt);
  for (const auto& g : report.groups) {
    std::printf("%-40s %5zu  max_rel_error %.6e\n", g.name.c_str(), g.count, g.max_rel_error);
  }
  std::printf("overall max_rel_error %.6e (tolerance %.0e): %s\n", report.max_rel_error,
              opt.tolerance, report.passed ? "PASS" : "FAIL");
  if (!report.passed) {
    std::fprintf(stderr, "error: gradient check failed, max relative error %.6e\n",
                 report.max_rel_error);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-to-region prototype attention classifier"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoint and report");
  train->add_option("--config", ta.config, "JSON run configuration");
  train->add_option("--manifest", ta.manifest, "Dataset manifest CSV (overrides the config)");
  train->add_option("--synthetic", ta.synthetic, "Train on n generated synthetic samples");
  train->add_option("--epochs", ta.epochs, "Number of epochs");
  train->add_option("--seed", ta.seed, "Run seed (model init, split, shuffling, synthetic data)");
  train->add_option("--threads", ta.threads, "Worker threads (0: R2R_THREADS / hardware)");
  train->add_option("--out", ta.out, "Parent directory for runs/<timestamp>-<seed>/");
  train->add_option("--run-dir", ta.run_dir, "Exact run directory instead of a timestamped one");
  train->add_option("--export-data", ta.export_data, "Also write the dataset as manifest + PGMs");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate AUC and localization of a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", ea.manifest, "Dataset manifest CSV");
  eval->add_option("--synthetic", ea.synthetic, "Evaluate on n generated synthetic samples");
  eval->add_option("--data-seed", ea.data_seed, "Seed for --synthetic");
  eval->add_option("--stage", ea.stage, "Stage used for localization (default: last)");
  eval->add_option("--activity", ea.activity, "Mask activity: mass or argmax");
  eval->add_option("--out", ea.out, "Metrics JSON path (default: next to the checkpoint)");
  eval->add_option("--threads", ea.threads, "Worker threads (0: R2R_THREADS / hardware)");

  ExplainArgs xa;
  auto* explain = app.add_subcommand("explain", "Write heatmaps and overlays of the most active masks");
  explain->add_option("--checkpoint", xa.checkpoint, "Checkpoint file")->required();
  explain->add_option("--image", xa.image, "Input PGM/PPM image")->required();
  explain->add_option("--stage", xa.stage, "Stage index, 'last' or 'all'");
  explain->add_option("--topk", xa.topk, "Masks per block");
  explain->add_option("--activity", xa.activity, "Mask activity: mass or argmax");
  explain->add_option("--out", xa.out, "Output directory");
  explain->add_option("--gt", xa.gt, "Optional ground-truth region PGM; reports IoU and pointing");

  std::uint64_t gc_seed = 0;
  bool gc_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of all gradients");
  gradcheck->add_option("--seed", gc_seed, "Seed for parameters and input");
  gradcheck->add_flag("--inject-fault", gc_fault, "Corrupt one adjoint (self-test)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*explain) return cmd_explain(xa);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_fault);
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return exit_code_for(e);
  }
  return 0;
}
