// SPDX-License-Identifier: Apache-2.0
//
// segpool: dataset generation, mask simulation, training and evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 data or contract error.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "segpool/segpool.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segpool;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void echo_config(const std::string& command, json config) {
  config["command"] = command;
  std::cerr << config.dump() << '\n';
}

struct GenArgs {
  std::string domain = "syn";
  fs::path out;
  std::size_t num = 1;
  std::uint64_t seed = 0;
  std::size_t height = kDefaultSize;
  std::size_t width = kDefaultSize;
  std::size_t classes = kDefaultClasses;
};

struct SamArgs {
  fs::path data;
  fs::path out;
  std::uint64_t seed = 0;
  OracleParams oracle;
};

struct TrainArgs {
  std::string mode = "full";
  TrainConfig cfg;
};

struct EvalArgs {
  fs::path ckpt;
  fs::path data;
  bool use_ema = true;
  std::uint64_t seed = 0;
};

struct VizArgs {
  fs::path ckpt;
  fs::path image;
  fs::path out;
  bool use_ema = true;
  std::uint64_t seed = 0;
};

struct PoolStatsArgs {
  fs::path masks;
  std::uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
  const DomainParams domain = DomainParams::preset(a.domain);
  echo_config("gen", {{"domain", to_json(domain)},
                      {"out", a.out.string()},
                      {"num", a.num},
                      {"seed", a.seed},
                      {"height", a.height},
                      {"width", a.width},
                      {"classes", a.classes}});
  gen_dataset(a.num, domain, a.out, a.seed, a.classes, a.height, a.width);
  return 0;
}

int run_sam(const SamArgs& a) {
  a.oracle.validate();
  echo_config("sam-sim", {{"data", a.data.string()},
                          {"out", a.out.string()},
                          {"seed", a.seed},
                          {"split_prob", a.oracle.split_probability},
                          {"max_parts", a.oracle.max_parts},
                          {"keep_whole_prob", a.oracle.keep_whole_probability},
                          {"jitter", a.oracle.jitter_radius},
                          {"spurious", a.oracle.spurious_masks},
                          {"min_pixels", a.oracle.min_mask_pixels}});
  const Dataset data = Dataset::open(a.data, LabelAccess::forbidden);
  simulate_masks(data, a.out, a.oracle, a.seed);
  return 0;
}

int run_train(TrainArgs a) {
  a.cfg.mode = parse_train_mode(a.mode);
  try {
    a.cfg.validate();
  } catch (const ContractViolation& e) {
    throw UsageError(e.what());
  }
  echo_config("train", a.cfg.to_json_full());
  const TrainResult r = train(a.cfg, [](const EpochMetrics& m) { std::cerr << to_json(m).dump() << '\n'; });
  if (r.last_k_miou) std::cerr << "last-" << a.cfg.eval_last_k << " EMA test mIoU: " << *r.last_k_miou << '\n';
  return 0;
}

const ModelParams& pick(const Checkpoint& ck, bool use_ema) { return use_ema ? ck.ema : ck.params; }

int run_eval(const EvalArgs& a) {
  echo_config("eval", {{"ckpt", a.ckpt.string()}, {"data", a.data.string()}, {"use_ema", a.use_ema}, {"seed", a.seed}});
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Dataset data = Dataset::open(a.data, LabelAccess::allowed);
  std::cout << to_json(evaluate(pick(ck, a.use_ema), data)).dump(2) << '\n';
  return 0;
}

int run_viz(const VizArgs& a) {
  echo_config("viz-features", {{"ckpt", a.ckpt.string()},
                               {"image", a.image.string()},
                               {"out", a.out.string()},
                               {"use_ema", a.use_ema},
                               {"seed", a.seed}});
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const ModelParams& params = pick(ck, a.use_ema);
  const Tensor image = read_image(a.image);
  Tape tape;
  const ForwardOut out = forward(bind(tape, params, false), tape.leaf(image));
  const VizInfo info = viz_features(out.dense.value(), a.out);
  std::cerr << json{{"width", info.width}, {"height", info.height}, {"constant_channels", info.constant_channels}}.dump()
            << '\n';
  return 0;
}

int run_pool_stats(const PoolStatsArgs& a) {
  echo_config("pool-stats", {{"masks", a.masks.string()}, {"seed", a.seed}});
  if (!fs::is_directory(a.masks)) throw DataError("not a directory: " + a.masks.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.masks)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.ends_with(".masks.json")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  json frames = json::array();
  std::size_t total_masks = 0, total_overlap = 0;
  double coverage_sum = 0.0;
  for (const auto& f : files) {
    const MaskStats s = mask_stats(load_maskset(f));
    frames.push_back({{"file", f.filename().string()},
                      {"masks", s.count},
                      {"pixel_counts", s.pixel_counts},
                      {"overlap_pixels", s.overlap_pixels},
                      {"coverage", s.coverage}});
    total_masks += s.count;
    total_overlap += s.overlap_pixels;
    coverage_sum += s.coverage;
  }
  const double n = static_cast<double>(files.size());
  json report = {{"files", files.size()},
                 {"total_masks", total_masks},
                 {"overlap_pixels", total_overlap},
                 {"mean_masks_per_frame", files.empty() ? 0.0 : static_cast<double>(total_masks) / n},
                 {"mean_coverage", files.empty() ? 0.0 : coverage_sum / n},
                 {"frames", frames}};
  std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segpool: segment-pooling domain adaptation for semantic segmentation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Render a procedural dataset");
  g->add_option("--domain", gen.domain, "Domain preset")->check(CLI::IsMember({"syn", "real"}))->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--num", gen.num, "Number of frames")->capture_default_str();
  g->add_option("--seed", gen.seed, "Base seed")->capture_default_str();
  g->add_option("--height", gen.height)->capture_default_str();
  g->add_option("--width", gen.width)->capture_default_str();
  g->add_option("--classes", gen.classes, "Classes including background")->capture_default_str();

  SamArgs sam;
  auto* s = app.add_subcommand("sam-sim", "Simulate oversegmenting masks from instance maps");
  s->add_option("--data", sam.data, "Dataset directory")->required();
  s->add_option("--out", sam.out, "Mask output directory")->required();
  s->add_option("--seed", sam.seed)->capture_default_str();
  s->add_option("--split-prob", sam.oracle.split_probability)->capture_default_str();
  s->add_option("--max-parts", sam.oracle.max_parts)->capture_default_str();
  s->add_option("--keep-whole-prob", sam.oracle.keep_whole_probability)->capture_default_str();
  s->add_option("--jitter", sam.oracle.jitter_radius, "Border jitter radius in pixels")->capture_default_str();
  s->add_option("--spurious", sam.oracle.spurious_masks, "Spurious background masks per frame")->capture_default_str();
  s->add_option("--min-pixels", sam.oracle.min_mask_pixels)->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--mode", tr.mode)->check(CLI::IsMember({"syn-only", "full", "real-labels"}))->capture_default_str();
  t->add_option("--syn", tr.cfg.syn_dir, "Labeled synthetic dataset");
  t->add_option("--real", tr.cfg.real_dir, "Real training dataset");
  t->add_option("--masks", tr.cfg.masks_dir, "Mask directory for the real training dataset");
  t->add_option("--test", tr.cfg.test_dir, "Labeled real test dataset for per-epoch evaluation");
  t->add_option("--out", tr.cfg.out_dir, "Output directory")->required();
  t->add_option("--seed", tr.cfg.seed)->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  t->add_option("--frames-per-epoch", tr.cfg.frames_per_epoch)->capture_default_str();
  t->add_option("--alpha", tr.cfg.alpha)->capture_default_str();
  t->add_option("--beta", tr.cfg.beta)->capture_default_str();
  t->add_option("--ema-decay", tr.cfg.ema_decay)->capture_default_str();
  t->add_option("--lr", tr.cfg.adam.lr)->capture_default_str();
  t->add_option("--eval-last-k", tr.cfg.eval_last_k)->capture_default_str();
  t->add_option("--classes", tr.cfg.model.classes)->capture_default_str();
  t->add_option("--dense-dim", tr.cfg.model.dense_dim)->capture_default_str();
  t->add_option("--base-channels", tr.cfg.model.base_channels)->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint; prints a JSON report");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--use-ema", ev.use_ema)->capture_default_str();
  e->add_option("--seed", ev.seed)->capture_default_str();

  VizArgs vz;
  auto* v = app.add_subcommand("viz-features", "Write dense features of one image as a PPM");
  v->add_option("--ckpt", vz.ckpt)->required();
  v->add_option("--image", vz.image)->required();
  v->add_option("--out", vz.out)->required();
  v->add_option("--use-ema", vz.use_ema)->capture_default_str();
  v->add_option("--seed", vz.seed)->capture_default_str();

  PoolStatsArgs ps;
  auto* p = app.add_subcommand("pool-stats", "Summarize mask files");
  p->add_option("--masks", ps.masks)->required();
  p->add_option("--seed", ps.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*s) return run_sam(sam);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*v) return run_viz(vz);
    if (*p) return run_pool_stats(ps);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n' << t->help();
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
