// SPDX-License-Identifier: Apache-2.0
//
// Intersection-over-union metrics. A frame's mIoU averages IoU over the
// classes present in its ground truth, background excluded; frames without
// any such class are left out of the dataset mean.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "segpool/dataset.hpp"
#include "segpool/error.hpp"
#include "segpool/model.hpp"
#include "segpool/netpbm.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

inline constexpr const char* kClassPresenceConvention = "gt-present-excluding-background";

namespace detail {
inline void require_same_grid(const LabelGrid& a, const LabelGrid& b) {
  if (a.width != b.width || a.height != b.height) throw InvalidShape("prediction and ground truth sizes differ");
}
}  // namespace detail

/// |P_c & G_c| / |P_c | G_c|; 1 when both are empty.
[[nodiscard]] inline double iou_class(const LabelGrid& pred, const LabelGrid& gt, int c) {
  detail::require_same_grid(pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] == c, g = gt.values[i] == c;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Classes 1..C-1 that occur in the ground truth.
[[nodiscard]] inline std::vector<int> present_classes(const LabelGrid& gt, std::size_t classes) {
  std::vector<bool> seen(classes, false);
  for (int v : gt.values)
    if (v > 0 && static_cast<std::size_t>(v) < classes) seen[static_cast<std::size_t>(v)] = true;
  std::vector<int> out;
  for (std::size_t c = 1; c < classes; ++c)
    if (seen[c]) out.push_back(static_cast<int>(c));
  return out;
}

/// nullopt when no foreground class is present in the ground truth.
[[nodiscard]] inline std::optional<double> miou_frame(const LabelGrid& pred, const LabelGrid& gt,
                                                      std::size_t classes) {
  detail::require_same_grid(pred, gt);
  const auto present = present_classes(gt, classes);
  if (present.empty()) return std::nullopt;
  double sum = 0.0;
  for (int c : present) sum += iou_class(pred, gt, c);
  return sum / static_cast<double>(present.size());
}

/// Unweighted mean over scorable frames; nullopt when there are none.
[[nodiscard]] inline std::optional<double> miou_dataset(std::span<const std::optional<double>> per_frame) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : per_frame)
    if (v) {
      sum += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

/// Mean of the last k entries of a per-epoch metric log.
[[nodiscard]] inline double last_k_average(std::span<const double> log, std::size_t k) {
  if (k == 0) throw ContractViolation("last_k_average needs k >= 1");
  if (log.size() < k)
    throw ContractViolation("metric log has " + std::to_string(log.size()) + " entries, fewer than k = " +
                            std::to_string(k));
  double sum = 0.0;
  for (std::size_t i = log.size() - k; i < log.size(); ++i) sum += log[i];
  return sum / static_cast<double>(k);
}

struct EvalReport {
  std::size_t classes = 0;
  std::vector<std::vector<std::optional<double>>> per_class_iou;  // frame x class; nullopt if class absent in gt
  std::vector<std::optional<double>> per_frame_miou;
  std::optional<double> miou;
  std::size_t frame_count = 0;
  std::string convention = kClassPresenceConvention;
};

[[nodiscard]] inline EvalReport make_report(std::span<const LabelGrid> preds, std::span<const LabelGrid> gts,
                                            std::size_t classes) {
  if (preds.size() != gts.size()) throw ContractViolation("prediction and ground-truth counts differ");
  EvalReport r;
  r.classes = classes;
  r.frame_count = preds.size();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto present = present_classes(gts[i], classes);
    std::vector<std::optional<double>> row(classes);
    for (int c : present) row[static_cast<std::size_t>(c)] = iou_class(preds[i], gts[i], c);
    r.per_class_iou.push_back(std::move(row));
    r.per_frame_miou.push_back(miou_frame(preds[i], gts[i], classes));
  }
  r.miou = miou_dataset(r.per_frame_miou);
  return r;
}

[[nodiscard]] inline nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t i = 0; i < r.frame_count; ++i) {
    nlohmann::json iou = nlohmann::json::array();
    for (const auto& v : r.per_class_iou[i]) iou.push_back(opt(v));
    frames.push_back({{"frame", i}, {"miou", opt(r.per_frame_miou[i])}, {"class_iou", std::move(iou)}});
  }
  return {{"classes", r.classes},
          {"frame_count", r.frame_count},
          {"miou", opt(r.miou)},
          {"class_presence", r.convention},
          {"frames", std::move(frames)}};
}

/// Runs the model over every frame of a labeled dataset.
[[nodiscard]] inline EvalReport evaluate(const ModelParams& params, const Dataset& data) {
  if (data.manifest().classes != params.config.classes)
    throw DataError("dataset has " + std::to_string(data.manifest().classes) + " classes, model " +
                    std::to_string(params.config.classes));
  std::vector<LabelGrid> preds, gts;
  for (std::size_t k = 0; k < data.size(); ++k) {
    preds.push_back(argmax_labels(predict_logits(params, data.image(k))));
    gts.push_back(data.labels(k));
  }
  return make_report(preds, gts, params.config.classes);
}

struct VizInfo {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::size_t> constant_channels;  // written as 0
};

/// Per-channel min-max normalization of a 3-channel feature map to 8 bits
/// (round half up), written as binary PPM.
inline VizInfo viz_features(const Tensor& dense, const std::filesystem::path& out_path) {
  if (dense.shape().rank() != 3 || dense.shape()[0] != 3)
    throw InvalidShape("feature visualization needs exactly 3 channels, got " + dense.shape().str() +
                       "; train with a dense dimension of 3");
  const std::size_t h = dense.shape()[1], w = dense.shape()[2], hw = h * w;
  VizInfo info{w, h, {}};
  netpbm::Image8 img{w, h, 3, std::vector<std::uint8_t>(3 * hw, 0)};
  for (std::size_t c = 0; c < 3; ++c) {
    auto plane = dense.data().subspan(c * hw, hw);
    const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
    if (!(*hi > *lo)) {
      info.constant_channels.push_back(c);
      continue;
    }
    const double span = *hi - *lo;
    for (std::size_t p = 0; p < hw; ++p)
      img.pixels[3 * p + c] = static_cast<std::uint8_t>(std::floor((plane[p] - *lo) / span * 255.0 + 0.5));
  }
  netpbm::write(out_path, img);
  return info;
}

}  // namespace segpool
