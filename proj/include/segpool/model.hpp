// SPDX-License-Identifier: Apache-2.0
//
// Miniature encoder-decoder: three encoder stages (1x, 1/2x, 1/4x), a
// top-down pyramid with lateral 1x1 projections, a fusion layer producing one
// full-resolution feature map, and two heads on that shared map: a 1x1
// segmentation head (class logits) and a two-layer dense feature head.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "segpool/autodiff.hpp"
#include "segpool/error.hpp"
#include "segpool/ops.hpp"
#include "segpool/rng.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

struct ModelConfig {
  std::size_t classes = 5;
  std::size_t dense_dim = 3;
  std::size_t base_channels = 16;
  std::size_t fused_channels = 32;
  std::size_t hidden_channels = 16;

  void validate() const {
    if (classes < 2) throw ContractViolation("model needs at least 2 classes");
    if (dense_dim < 1 || base_channels < 1 || fused_channels < 1 || hidden_channels < 1)
      throw ContractViolation("model channel counts must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;  // 0 for biases
};

/// Parameter enumeration in checkpoint order. Each layer contributes
/// `<layer>.weight` (Cout x Cin x k x k) followed by `<layer>.bias` (Cout):
///   enc0, down1, down2        encoder (3x3; strides 1, 2, 2)
///   lat0, lat1, lat2          lateral 1x1 projections to base channels
///   dec0, dec1, dec2          decoder 3x3 convs per pyramid level
///   fuse                      1x1, 3*base -> fused
///   seg                       1x1, fused -> classes
///   dense1, dense2            1x1, fused -> hidden -> dense_dim
[[nodiscard]] inline std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t b = cfg.base_channels;
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
    out.push_back({name + ".weight", Shape{cout, cin, k, k}, cin * k * k});
    out.push_back({name + ".bias", Shape{cout}, 0});
  };
  conv("enc0", b, 3, 3);
  conv("down1", 2 * b, b, 3);
  conv("down2", 4 * b, 2 * b, 3);
  conv("lat0", b, b, 1);
  conv("lat1", b, 2 * b, 1);
  conv("lat2", b, 4 * b, 1);
  conv("dec0", b, b, 3);
  conv("dec1", b, b, 3);
  conv("dec2", b, b, 3);
  conv("fuse", cfg.fused_channels, 3 * b, 1);
  conv("seg", cfg.classes, cfg.fused_channels, 1);
  conv("dense1", cfg.hidden_channels, cfg.fused_channels, 1);
  conv("dense2", cfg.dense_dim, cfg.hidden_channels, 1);
  return out;
}

struct ModelParams {
  ModelConfig config;
  std::vector<Tensor> tensors;  // in param_layout() order

  [[nodiscard]] std::size_t index_of(const std::string& name) const {
    auto layout = param_layout(config);
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (layout[i].name == name) return i;
    throw ContractViolation("unknown parameter '" + name + "'");
  }
  [[nodiscard]] const Tensor& operator[](const std::string& name) const { return tensors[index_of(name)]; }
  [[nodiscard]] Tensor& operator[](const std::string& name) { return tensors[index_of(name)]; }

  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
[[nodiscard]] inline double init_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

[[nodiscard]] inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p{cfg, {}};
  Rng rng(mix_seed(seed));
  for (const auto& spec : param_layout(cfg)) {
    Tensor t(spec.shape);
    if (spec.fan_in > 0) {
      const double bound = init_bound(spec.fan_in);
      for (auto& v : t.values()) v = uniform(rng, -bound, bound);
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

/// ema <- decay * ema + (1 - decay) * current, elementwise.
inline void ema_update(ModelParams& ema, const ModelParams& current, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ContractViolation("EMA decay must lie in [0, 1]");
  if (ema.config != current.config || ema.tensors.size() != current.tensors.size())
    throw ContractViolation("EMA and current parameters have different layouts");
  for (std::size_t i = 0; i < ema.tensors.size(); ++i) {
    auto& e = ema.tensors[i];
    const auto& c = current.tensors[i];
    if (e.shape() != c.shape()) throw ContractViolation("EMA parameter shape mismatch at index " + std::to_string(i));
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = decay * e[j] + (1.0 - decay) * c[j];
  }
}

/// Parameters placed on a tape.
struct BoundParams {
  std::vector<Var> vars;
  const ModelConfig* config = nullptr;

  [[nodiscard]] const Var& operator[](std::size_t i) const { return vars[i]; }
};

[[nodiscard]] inline BoundParams bind(Tape& tape, const ModelParams& params, bool trainable) {
  BoundParams b;
  b.config = &params.config;
  b.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) b.vars.push_back(tape.leaf(t, trainable));
  return b;
}

struct ForwardOut {
  Var logits;  // classes x H x W
  Var dense;   // dense_dim x H x W
  Var fused;   // fused_channels x H x W
};

[[nodiscard]] inline ForwardOut forward(const BoundParams& p, const Var& image) {
  using namespace ops;
  const Shape& s = image.shape();
  if (s.rank() != 3 || s[0] != 3) throw InvalidShape("model input must be 3 x H x W, got " + s.str());
  if (s[1] % 4 != 0 || s[2] % 4 != 0)
    throw InvalidShape("model input height and width must be divisible by 4, got " + s.str());

  // Indices follow param_layout(): layer i owns weight 2i and bias 2i+1.
  enum Layer { kEnc0, kDown1, kDown2, kLat0, kLat1, kLat2, kDec0, kDec1, kDec2, kFuse, kSeg, kDense1, kDense2 };
  auto conv = [&](const Var& x, Layer l, std::size_t stride, std::size_t pad) {
    return conv2d(x, p[2 * l], p[2 * l + 1], stride, pad);
  };

  Var e0 = gelu(conv(image, kEnc0, 1, 1));
  Var e1 = gelu(conv(e0, kDown1, 2, 1));
  Var e2 = gelu(conv(e1, kDown2, 2, 1));

  Var t2 = conv(e2, kLat2, 1, 0);
  Var t1 = add(conv(e1, kLat1, 1, 0), upsample_bilinear_2x(t2));
  Var t0 = add(conv(e0, kLat0, 1, 0), upsample_bilinear_2x(t1));

  Var d0 = gelu(conv(t0, kDec0, 1, 1));
  Var d1 = gelu(conv(t1, kDec1, 1, 1));
  Var d2 = gelu(conv(t2, kDec2, 1, 1));

  Var pyramid = concat_channels(concat_channels(d0, upsample_bilinear_2x(d1)),
                                upsample_bilinear_2x(upsample_bilinear_2x(d2)));
  Var fused = gelu(conv(pyramid, kFuse, 1, 0));
  Var logits = conv(fused, kSeg, 1, 0);
  Var dense = conv(gelu(conv(fused, kDense1, 1, 0)), kDense2, 1, 0);
  return {logits, dense, fused};
}

/// Per-pixel argmax of logits (ties resolve to the lower class id).
[[nodiscard]] inline LabelGrid argmax_labels(const Tensor& logits) {
  const std::size_t c = logits.shape()[0], h = logits.shape()[1], w = logits.shape()[2];
  LabelGrid out(w, h, 0);
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    double bv = logits[i];
    for (std::size_t k = 1; k < c; ++k)
      if (logits[k * hw + i] > bv) {
        bv = logits[k * hw + i];
        best = static_cast<int>(k);
      }
    out.values[i] = best;
  }
  return out;
}

/// Forward pass without gradient tracking.
[[nodiscard]] inline Tensor predict_logits(const ModelParams& params, const Tensor& image) {
  Tape tape;
  auto b = bind(tape, params, false);
  return forward(b, tape.leaf(image)).logits.value();
}

}  // namespace segpool
