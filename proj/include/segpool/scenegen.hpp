// SPDX-License-Identifier: Apache-2.0
//
// Procedural scenes of colored rectangles, discs and triangles. The layout
// (shapes, classes, occlusion) and the appearance (domain transform) are
// drawn from separate random streams, so two domains rendered from the same
// seed share their layout and differ only in how it looks.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "segpool/error.hpp"
#include "segpool/rng.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

using Rgb = std::array<double, 3>;

/// Appearance of one domain.
struct DomainParams {
  std::string name = "syn";
  double noise_sigma = 0.01;          // additive Gaussian, per channel
  double brightness_gradient = 0.0;   // amplitude of a linear brightness ramp
  double hue_rotation_deg = 0.0;      // rotation about the gray axis
  double speckle_probability = 0.0;   // chance a pixel is replaced by a random color
  Rgb background{0.45, 0.45, 0.45};

  void validate() const {
    if (!(noise_sigma >= 0.0)) throw ContractViolation("noise sigma must be >= 0");
    if (!(speckle_probability >= 0.0 && speckle_probability <= 1.0))
      throw ContractViolation("speckle probability must lie in [0, 1]");
    for (double c : background)
      if (!(c >= 0.0 && c <= 1.0)) throw ContractViolation("background color must lie in [0, 1]");
  }

  static DomainParams synthetic() { return {}; }
  static DomainParams real() {
    DomainParams d;
    d.name = "real";
    d.noise_sigma = 0.05;
    d.brightness_gradient = 0.25;
    d.hue_rotation_deg = 25.0;
    d.speckle_probability = 0.02;
    return d;
  }

  /// Preset by name: "syn" or "real".
  static DomainParams preset(const std::string& name) {
    if (name == "syn") return synthetic();
    if (name == "real") return real();
    throw ContractViolation("unknown domain '" + name + "' (expected syn or real)");
  }
};

enum class ShapeKind { rectangle, disc, triangle };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  int cls = 1;
  Rgb color{};
  // rectangle: x0, y0, width, height (pixels); disc: cx, cy, radius;
  // triangle: three (x, y) vertices.
  std::array<double, 6> geom{};
};

/// One scene: image in [0,1], per-pixel class and instance id (0 = background).
struct Frame {
  Tensor image;
  LabelGrid labels;
  LabelGrid instances;
};

inline constexpr std::size_t kDefaultClasses = 5;
inline constexpr std::size_t kDefaultSize = 64;
inline constexpr int kMinShapes = 1;
inline constexpr int kMaxShapes = 6;

namespace detail {

inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::fabs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  Rgb rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

inline bool covers(const ShapeSpec& s, double px, double py) {
  const auto& g = s.geom;
  switch (s.kind) {
    case ShapeKind::rectangle:
      return px >= g[0] && px < g[0] + g[2] && py >= g[1] && py < g[1] + g[3];
    case ShapeKind::disc: {
      const double dx = px - g[0], dy = py - g[1];
      return dx * dx + dy * dy <= g[2] * g[2];
    }
    case ShapeKind::triangle: {
      auto edge = [&](int a, int b) {
        return (g[2 * b] - g[2 * a]) * (py - g[2 * a + 1]) - (g[2 * b + 1] - g[2 * a + 1]) * (px - g[2 * a]);
      };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

}  // namespace detail

/// Base color of an object class: hues spread evenly around the color wheel.
[[nodiscard]] inline Rgb class_color(int cls, std::size_t classes) {
  const double hue = 15.0 + 360.0 * static_cast<double>(cls - 1) / static_cast<double>(classes - 1);
  return detail::hsv_to_rgb(hue, 0.7, 0.8);
}

/// Random layout: kind, class, per-instance color jitter and geometry.
[[nodiscard]] inline std::vector<ShapeSpec> sample_shapes(int count, std::size_t classes, std::size_t height,
                                                          std::size_t width, Rng& rng) {
  std::vector<ShapeSpec> shapes;
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const double unit = static_cast<double>(std::min(width, height)) / 64.0;
  for (int i = 0; i < count; ++i) {
    ShapeSpec s;
    s.kind = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
    s.cls = static_cast<int>(uniform_int(rng, 1, classes - 1));
    const double hue = 15.0 + 360.0 * (s.cls - 1) / static_cast<double>(classes - 1) + uniform(rng, -12.0, 12.0);
    s.color = detail::hsv_to_rgb(hue, std::clamp(0.7 + uniform(rng, -0.1, 0.1), 0.0, 1.0),
                                 std::clamp(0.8 + uniform(rng, -0.1, 0.1), 0.0, 1.0));
    switch (s.kind) {
      case ShapeKind::rectangle: {
        const double sw = std::round(uniform(rng, 8.0, 24.0) * unit), sh = std::round(uniform(rng, 8.0, 24.0) * unit);
        const double x0 = std::floor(uniform(rng, 0.0, w - sw + 1.0)), y0 = std::floor(uniform(rng, 0.0, h - sh + 1.0));
        s.geom = {x0, y0, sw, sh, 0, 0};
        break;
      }
      case ShapeKind::disc: {
        const double r = uniform(rng, 5.0, 12.0) * unit;
        s.geom = {uniform(rng, r, w - r), uniform(rng, r, h - r), r, 0, 0, 0};
        break;
      }
      case ShapeKind::triangle: {
        const double r = uniform(rng, 7.0, 14.0) * unit;
        const double cx = uniform(rng, r, w - r), cy = uniform(rng, r, h - r);
        const double a0 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        for (int k = 0; k < 3; ++k) {
          const double a = a0 + 2.0 * std::numbers::pi * k / 3.0 + uniform(rng, -0.4, 0.4);
          const double rr = r * uniform(rng, 0.75, 1.0);
          s.geom[2 * k] = cx + rr * std::cos(a);
          s.geom[2 * k + 1] = cy + rr * std::sin(a);
        }
        break;
      }
    }
    shapes.push_back(s);
  }
  return shapes;
}

/// Applies the domain transform in place: hue rotation, brightness ramp,
/// speckle, additive noise, clamp to [0, 1].
inline void apply_domain(Tensor& image, const DomainParams& domain, Rng& rng) {
  const std::size_t h = image.shape()[1], w = image.shape()[2], hw = h * w;
  const double a = domain.hue_rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(a), sn = std::sin(a), k = (1.0 - cs) / 3.0, r3 = std::sqrt(1.0 / 3.0) * sn;
  const double m[3][3] = {{cs + k, k - r3, k + r3}, {k + r3, cs + k, k - r3}, {k - r3, k + r3, cs + k}};
  const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double gx = std::cos(dir), gy = std::sin(dir);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const double in[3] = {image[p], image[hw + p], image[2 * hw + p]};
      const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
      const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
      const double gain = 1.0 + domain.brightness_gradient * (u * gx + v * gy);
      double out[3];
      for (int c = 0; c < 3; ++c) out[c] = gain * (m[c][0] * in[0] + m[c][1] * in[1] + m[c][2] * in[2]);
      if (domain.speckle_probability > 0.0 && uniform01(rng) < domain.speckle_probability)
        for (double& o : out) o = uniform01(rng);
      for (int c = 0; c < 3; ++c) {
        double val = out[c];
        if (domain.noise_sigma > 0.0) val += domain.noise_sigma * normal01(rng);
        image[c * hw + p] = std::clamp(val, 0.0, 1.0);
      }
    }
}

/// Paints shapes in order (later ones occlude earlier ones); instance ids
/// are 1-based positions in `shapes`.
[[nodiscard]] inline Frame render_shapes(std::span<const ShapeSpec> shapes, const DomainParams& domain,
                                         std::size_t height, std::size_t width, Rng& appearance_rng) {
  Frame f{Tensor(Shape{3, height, width}), LabelGrid(width, height, 0), LabelGrid(width, height, 0)};
  const std::size_t hw = height * width;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) f.image[c * hw + p] = domain.background[c];
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const ShapeSpec& s = shapes[i];
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        if (!detail::covers(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        const std::size_t p = y * width + x;
        for (std::size_t c = 0; c < 3; ++c) f.image[c * hw + p] = s.color[c];
        f.labels.values[p] = s.cls;
        f.instances.values[p] = static_cast<int>(i + 1);
      }
  }
  apply_domain(f.image, domain, appearance_rng);
  return f;
}

/// Layout from stream 0 of `seed`, appearance from stream 1.
[[nodiscard]] inline Frame render_frame(int num_shapes, std::size_t classes, const DomainParams& domain,
                                        std::size_t height, std::size_t width, std::uint64_t seed) {
  if (classes < 2) throw ContractViolation("render_frame needs at least 2 classes");
  if (height < 16 || width < 16) throw ContractViolation("render_frame needs height and width >= 16");
  if (num_shapes < 0 || num_shapes > 255) throw ContractViolation("num_shapes must lie in [0, 255]");
  domain.validate();
  Rng layout(derive_seed(seed, 0));
  Rng appearance(derive_seed(seed, 1));
  auto shapes = sample_shapes(num_shapes, classes, height, width, layout);
  return render_shapes(shapes, domain, height, width, appearance);
}

}  // namespace segpool
