// SPDX-License-Identifier: Apache-2.0
//
// Alternating training. Each iteration of `full` mode takes one optimizer
// step on the supervised loss of a sampled synthetic frame, then one on the
// self-supervised segment loss of a sampled real frame. The EMA copy of the
// parameters is updated after every optimizer step and evaluated on the
// held-out real test split after every epoch.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <json.hpp>

#include "segpool/adam.hpp"
#include "segpool/autodiff.hpp"
#include "segpool/checkpoint.hpp"
#include "segpool/dataset.hpp"
#include "segpool/error.hpp"
#include "segpool/eval.hpp"
#include "segpool/losses.hpp"
#include "segpool/model.hpp"
#include "segpool/rng.hpp"
#include "segpool/segmask.hpp"

namespace segpool {

enum class TrainMode { syn_only, full, real_labels };

[[nodiscard]] inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::syn_only: return "syn-only";
    case TrainMode::full: return "full";
    case TrainMode::real_labels: return "real-labels";
  }
  return "?";
}

[[nodiscard]] inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "syn-only") return TrainMode::syn_only;
  if (s == "full") return TrainMode::full;
  if (s == "real-labels") return TrainMode::real_labels;
  throw ContractViolation("unknown training mode '" + s + "' (expected syn-only, full or real-labels)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::full;
  std::size_t epochs = 30;
  std::size_t frames_per_epoch = 200;
  double alpha = kDefaultAlpha;
  double beta = kDefaultBeta;
  double ema_decay = 0.99;
  AdamConfig adam;
  std::uint64_t seed = 0;
  ModelConfig model;
  std::size_t eval_last_k = 10;

  std::filesystem::path syn_dir;    // labeled synthetic frames
  std::filesystem::path real_dir;   // real training frames
  std::filesystem::path masks_dir;  // .masks.json for real training frames
  std::filesystem::path test_dir;   // labeled real test frames (optional)
  std::filesystem::path out_dir;    // checkpoint + metrics (optional)

  /// Checks mode-dependent inputs: full needs synthetic, real and masks;
  /// syn-only needs synthetic; real-labels needs real.
  void validate() const {
    model.validate();
    if (epochs == 0 || frames_per_epoch == 0) throw ContractViolation("epochs and frames per epoch must be >= 1");
    if (!(beta > 0.0)) throw ContractViolation("beta must be > 0");
    if (!(alpha >= 0.0)) throw ContractViolation("alpha must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ContractViolation("EMA decay must lie in [0, 1]");
    auto need = [&](const std::filesystem::path& p, const char* what) {
      if (p.empty()) throw ContractViolation("mode " + to_string(mode) + " requires " + what);
    };
    switch (mode) {
      case TrainMode::full:
        need(syn_dir, "a synthetic dataset");
        need(real_dir, "a real dataset");
        need(masks_dir, "a mask directory");
        break;
      case TrainMode::syn_only: need(syn_dir, "a synthetic dataset"); break;
      case TrainMode::real_labels: need(real_dir, "a real dataset"); break;
    }
  }

  /// Everything that determines the trained parameters. Paths are left out
  /// so identical runs into different directories produce identical files.
  [[nodiscard]] nlohmann::json hyperparameters() const {
    return {{"mode", to_string(mode)},
            {"epochs", epochs},
            {"frames_per_epoch", frames_per_epoch},
            {"alpha", alpha},
            {"beta", beta},
            {"ema_decay", ema_decay},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"seed", seed},
            {"eval_last_k", eval_last_k},
            {"model", to_json(model)}};
  }

  [[nodiscard]] nlohmann::json to_json_full() const {
    auto j = hyperparameters();
    j["syn"] = syn_dir.string();
    j["real"] = real_dir.string();
    j["masks"] = masks_dir.string();
    j["test"] = test_dir.string();
    j["out"] = out_dir.string();
    return j;
  }
};

/// Losses of one optimizer step.
struct LossBreakdown {
  std::size_t epoch = 0;
  std::size_t frame = 0;
  bool real_frame = false;  // true for self-supervised steps on real frames
  std::optional<double> supervised;
  std::optional<double> invariance;
  std::optional<double> variance;
  std::optional<double> combined_real;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> log;
  std::vector<LossBreakdown> steps;
  std::optional<double> last_k_miou;  // EMA test mIoU averaged over the last eval_last_k epochs
};

namespace detail {

/// Large activation buffers are allocated and freed every step; keeping them
/// on the heap instead of fresh mmap regions avoids repeated page faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

struct LabeledCache {
  std::vector<Tensor> images;
  std::vector<LabelGrid> labels;
};

inline LabeledCache load_labeled(const Dataset& d) {
  LabeledCache c;
  for (std::size_t k = 0; k < d.size(); ++k) {
    c.images.push_back(d.image(k));
    c.labels.push_back(d.labels(k));
  }
  return c;
}

inline void check_dataset(const Dataset& d, const ModelConfig& m, const char* what) {
  if (d.size() == 0) throw DataError(std::string(what) + " dataset " + d.dir().string() + " has no frames");
  if (d.manifest().classes != m.classes)
    throw DataError(std::string(what) + " dataset has " + std::to_string(d.manifest().classes) +
                    " classes, model expects " + std::to_string(m.classes));
  if (d.manifest().height % 4 != 0 || d.manifest().width % 4 != 0)
    throw DataError(std::string(what) + " frames must have height and width divisible by 4");
}

inline std::vector<Tensor> collect_grads(const BoundParams& b) {
  std::vector<Tensor> g;
  g.reserve(b.vars.size());
  for (const auto& v : b.vars) g.push_back(v.grad());
  return g;
}

inline std::vector<Tensor> zero_grads(const ModelParams& p) {
  std::vector<Tensor> g;
  for (const auto& t : p.tensors) g.emplace_back(t.shape());
  return g;
}

/// Which parameters the last backward() loss depends on.
inline std::vector<bool> reached(const BoundParams& b) {
  std::vector<bool> r;
  r.reserve(b.vars.size());
  for (const auto& v : b.vars) r.push_back(v.reached());
  return r;
}

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// mIoU of `params` over preloaded labeled frames.
[[nodiscard]] inline std::optional<double> cached_miou(const ModelParams& params, const detail::LabeledCache& c) {
  std::vector<std::optional<double>> per;
  for (std::size_t k = 0; k < c.images.size(); ++k)
    per.push_back(miou_frame(argmax_labels(predict_logits(params, c.images[k])), c.labels[k], params.config.classes));
  return miou_dataset(per);
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

inline void write_metrics_log(const std::vector<EpochMetrics>& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& m : log) out << to_json(m).dump() << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

[[nodiscard]] inline TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  detail::tune_allocator();

  // Real training frames are always opened without label access; only the
  // real-labels baseline opens them with labels.
  std::optional<Dataset> syn, real, test;
  if (cfg.mode != TrainMode::real_labels) syn = Dataset::open(cfg.syn_dir, LabelAccess::allowed);
  if (cfg.mode == TrainMode::full) real = Dataset::open(cfg.real_dir, LabelAccess::forbidden);
  if (cfg.mode == TrainMode::real_labels) real = Dataset::open(cfg.real_dir, LabelAccess::allowed);
  if (!cfg.test_dir.empty()) test = Dataset::open(cfg.test_dir, LabelAccess::allowed);
  if (syn) detail::check_dataset(*syn, cfg.model, "synthetic");
  if (real) detail::check_dataset(*real, cfg.model, "real");
  if (test) detail::check_dataset(*test, cfg.model, "test");

  const Dataset& sup = cfg.mode == TrainMode::real_labels ? *real : *syn;
  const detail::LabeledCache sup_frames = detail::load_labeled(sup);
  std::optional<detail::LabeledCache> test_frames;
  if (test) test_frames = detail::load_labeled(*test);
  std::map<std::size_t, Tensor> real_images;
  std::map<std::size_t, MaskSet> real_masks;

  ModelParams params = init_params(cfg.model, derive_seed(cfg.seed, 10));
  ModelParams ema = params;
  AdamState adam = AdamState::for_params(params.tensors);
  Rng sup_rng(derive_seed(cfg.seed, 11));
  Rng real_rng(derive_seed(cfg.seed, 12));

  TrainResult result;
  // Parameters outside the loss's graph (the other head) skip the update.
  auto optimizer_step = [&](const std::vector<Tensor>& grads, const std::vector<bool>& active) {
    adam_step(params.tensors, grads, adam, cfg.adam, active);
    ema_update(ema, params, cfg.ema_decay);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<double> sup_losses, inv_losses, var_losses;
    for (std::size_t it = 0; it < cfg.frames_per_epoch; ++it) {
      {
        const std::size_t k = uniform_int(sup_rng, 0, sup_frames.images.size() - 1);
        Tape tape;
        auto bound = bind(tape, params, true);
        auto out = forward(bound, tape.leaf(sup_frames.images[k]));
        Var loss = cross_entropy(out.logits, sup_frames.labels[k]);
        tape.backward(loss);
        optimizer_step(detail::collect_grads(bound), detail::reached(bound));
        sup_losses.push_back(loss.value().item());
        result.steps.push_back({epoch, k, false, loss.value().item(), {}, {}, {}});
      }
      if (cfg.mode != TrainMode::full) continue;

      const std::size_t k = uniform_int(real_rng, 0, real->size() - 1);
      if (!real_images.contains(k)) real_images.emplace(k, real->image(k));
      if (!real_masks.contains(k)) {
        const auto path = real->mask_path(cfg.masks_dir, k);
        if (!std::filesystem::exists(path))
          throw DataError("missing mask set for real frame " + std::to_string(k) + ": " + path.string());
        MaskSet ms = load_maskset(path);
        if (ms.width != real->manifest().width || ms.height != real->manifest().height)
          throw DataError(path.string() + ": mask dimensions do not match the real frames");
        real_masks.emplace(k, std::move(ms));
      }
      Tape tape;
      auto bound = bind(tape, params, true);
      auto out = forward(bound, tape.leaf(real_images.at(k)));
      RealLoss rl = real_loss(out.dense, real_masks.at(k), cfg.alpha, cfg.beta);
      if (rl.active) {
        tape.backward(rl.total);
        optimizer_step(detail::collect_grads(bound), detail::reached(bound));
      } else {
        optimizer_step(detail::zero_grads(params), std::vector<bool>(params.tensors.size(), false));
      }
      inv_losses.push_back(rl.invariance);
      var_losses.push_back(rl.variance);
      result.steps.push_back({epoch, k, true, {}, rl.invariance, rl.variance, rl.combined});
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.mean_sup_loss = detail::mean_of(sup_losses);
    m.mean_inv_loss = detail::mean_of(inv_losses);
    m.mean_var_loss = detail::mean_of(var_losses);
    if (test_frames) m.ema_miou = cached_miou(ema, *test_frames);
    m.optimizer_steps = adam.step;
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
  }

  if (test_frames && result.log.size() >= cfg.eval_last_k && cfg.eval_last_k > 0) {
    std::vector<double> mious;
    for (const auto& m : result.log)
      if (m.ema_miou) mious.push_back(*m.ema_miou);
    if (mious.size() >= cfg.eval_last_k) result.last_k_miou = last_k_average(mious, cfg.eval_last_k);
  }

  Checkpoint& ck = result.checkpoint;
  ck.model = cfg.model;
  ck.train_config = cfg.hyperparameters();
  ck.params = std::move(params);
  ck.ema = std::move(ema);
  ck.adam = std::move(adam);
  ck.epoch = cfg.epochs;
  ck.log = result.log;

  if (!cfg.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw DataError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
    save_checkpoint(ck, cfg.out_dir / "checkpoint.srgc");
    write_metrics_log(result.log, cfg.out_dir / "metrics.jsonl");
    nlohmann::json summary = {{"config", cfg.hyperparameters()},
                              {"last_k", cfg.eval_last_k},
                              {"last_k_ema_miou", result.last_k_miou ? nlohmann::json(*result.last_k_miou)
                                                                     : nlohmann::json(nullptr)}};
    write_json_file(cfg.out_dir / "summary.json", summary);
  }
  return result;
}

}  // namespace segpool
