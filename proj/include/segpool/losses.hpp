// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Supervised: per-pixel cross entropy on labeled frames.
// Self-supervised: statistics of the dense features pooled over (possibly
// overlapping) segments, an invariance term that shrinks within-segment
// spread and a hinge term that pushes segment means at least beta apart.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "segpool/autodiff.hpp"
#include "segpool/error.hpp"
#include "segpool/ops.hpp"
#include "segpool/segmask.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

inline constexpr double kDefaultAlpha = 0.05;
inline constexpr double kDefaultBeta = 0.5;

/// Mean over all pixels of -log softmax(logits)[label].
[[nodiscard]] inline Var cross_entropy(const Var& logits, const LabelGrid& labels) {
  const Tensor& x = logits.value();
  if (x.shape().rank() != 3) throw InvalidShape("cross_entropy logits must be C x H x W, got " + x.shape().str());
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (labels.height != h || labels.width != w)
    throw InvalidShape("cross_entropy: labels " + std::to_string(labels.height) + "x" + std::to_string(labels.width) +
                       " vs logits " + x.shape().str());
  const std::size_t hw = h * w;
  for (int y : labels.values)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ContractViolation("label " + std::to_string(y) + " outside [0, " + std::to_string(c - 1) + "]");

  // Softmax probabilities are kept for the backward pass.
  std::vector<double> prob(c * hw);
  double total = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    double mx = x[i];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, x[k * hw + i]);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double e = std::exp(x[k * hw + i] - mx);
      prob[k * hw + i] = e;
      z += e;
    }
    for (std::size_t k = 0; k < c; ++k) prob[k * hw + i] /= z;
    const auto y = static_cast<std::size_t>(labels.values[i]);
    total += std::log(z) + mx - x[y * hw + i];
  }
  const double inv_n = 1.0 / static_cast<double>(hw);
  auto label_copy = labels.values;
  return logits.tape().record(
      Tensor::scalar(total * inv_n), {logits.id()},
      [prob = std::move(prob), lab = std::move(label_copy), hw, inv_n](const Tensor& og,
                                                                         std::span<Tensor* const> ig) {
        const double g = og[0] * inv_n;
        Tensor& dx = *ig[0];
        for (std::size_t j = 0; j < prob.size(); ++j) dx[j] += g * prob[j];
        for (std::size_t i = 0; i < hw; ++i) dx[static_cast<std::size_t>(lab[i]) * hw + i] -= g;
      });
}

/// Per-segment mean and unnormalized variance, values only.
struct PooledValues {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> pixel_counts;
  std::vector<double> means;      // count x dim
  std::vector<double> variances;  // count x dim
};

/// Pooling over runs: each run is a contiguous slice of every channel plane.
[[nodiscard]] inline PooledValues pool_values(const Tensor& dense, const MaskSet& masks) {
  if (dense.shape().rank() != 3) throw InvalidShape("dense features must be D x H x W, got " + dense.shape().str());
  const std::size_t d = dense.shape()[0], h = dense.shape()[1], w = dense.shape()[2];
  if (masks.height != h || masks.width != w)
    throw InvalidShape("mask set is " + std::to_string(masks.width) + "x" + std::to_string(masks.height) +
                       ", features are " + dense.shape().str());
  PooledValues out;
  out.count = masks.size();
  out.dim = d;
  out.means.assign(out.count * d, 0.0);
  out.variances.assign(out.count * d, 0.0);
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < out.count; ++i) {
    const SegmentMask& m = masks.masks[i];
    out.pixel_counts.push_back(m.pixel_count());
    const double inv = 1.0 / static_cast<double>(m.pixel_count());
    for (std::size_t k = 0; k < d; ++k) {
      const double* plane = dense.data().data() + k * hw;
      double sum = 0.0;
      for (const auto& r : m.runs())
        for (std::size_t p = r.start; p < r.start + r.length; ++p) sum += plane[p];
      const double mu = sum * inv;
      double var = 0.0;
      for (const auto& r : m.runs())
        for (std::size_t p = r.start; p < r.start + r.length; ++p) {
          const double dz = plane[p] - mu;
          var += dz * dz;
        }
      out.means[i * d + k] = mu;
      out.variances[i * d + k] = var;
    }
  }
  return out;
}

/// Differentiable segment statistics. `means` and `variances` are N x D
/// nodes; both are invalid handles when N = 0.
struct SegmentStats {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> pixel_counts;
  Var means;
  Var variances;
  Tape* tape = nullptr;
};

[[nodiscard]] inline SegmentStats segment_pool(const Var& dense, const MaskSet& masks) {
  PooledValues pv = pool_values(dense.value(), masks);
  SegmentStats s;
  s.count = pv.count;
  s.dim = pv.dim;
  s.pixel_counts = pv.pixel_counts;
  s.tape = &dense.tape();
  if (pv.count == 0) return s;

  const std::size_t n = pv.count, d = pv.dim;
  const std::size_t hw = dense.shape()[1] * dense.shape()[2];
  // Runs are copied so the backward rules do not depend on the caller's MaskSet lifetime.
  std::vector<std::vector<Run>> runs;
  for (const auto& m : masks.masks) runs.push_back(m.runs());
  const Tensor* z = &dense.value();
  std::vector<double> mu = pv.means;

  s.means = dense.tape().record(
      Tensor(Shape{n, d}, std::move(pv.means)), {dense.id()},
      [runs, counts = pv.pixel_counts, n, d, hw](const Tensor& og, std::span<Tensor* const> ig) {
        Tensor& dz = *ig[0];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < d; ++k) {
            const double g = og[i * d + k] / static_cast<double>(counts[i]);
            if (g == 0.0) continue;
            double* plane = dz.data().data() + k * hw;
            for (const auto& r : runs[i])
              for (std::size_t p = r.start; p < r.start + r.length; ++p) plane[p] += g;
          }
      });
  // d v_i / d z_p = 2 (z_p - mu_i); the path through mu_i vanishes because
  // the deviations within a segment sum to zero.
  s.variances = dense.tape().record(
      Tensor(Shape{n, d}, std::move(pv.variances)), {dense.id()},
      [runs = std::move(runs), mu = std::move(mu), z, n, d, hw](const Tensor& og, std::span<Tensor* const> ig) {
        Tensor& dz = *ig[0];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < d; ++k) {
            const double g = 2.0 * og[i * d + k];
            if (g == 0.0) continue;
            const double m = mu[i * d + k];
            const double* zp = z->data().data() + k * hw;
            double* plane = dz.data().data() + k * hw;
            for (const auto& r : runs[i])
              for (std::size_t p = r.start; p < r.start + r.length; ++p) plane[p] += g * (zp[p] - m);
          }
      });
  return s;
}

namespace detail {
inline Var zero_scalar(Tape& tape) { return tape.leaf(Tensor::scalar(0.0)); }
}  // namespace detail

/// L_inv = (1/D) sum_i |v_i|_1 / sum_i |S_i|; 0 when N = 0.
[[nodiscard]] inline Var invariance_loss(const SegmentStats& s) {
  if (s.count == 0) return detail::zero_scalar(*s.tape);
  std::size_t pixels = 0;
  for (auto c : s.pixel_counts) pixels += c;
  const double factor = 1.0 / (static_cast<double>(s.dim) * static_cast<double>(pixels));
  double sum = 0.0;
  for (double v : s.variances.value().values()) sum += v;  // v >= 0, so |v|_1 is the plain sum
  return s.tape->record(Tensor::scalar(sum * factor), {s.variances.id()},
                        [factor](const Tensor& og, std::span<Tensor* const> ig) {
                          for (auto& g : ig[0]->values()) g += factor * og[0];
                        });
}

/// Mean over unordered pairs {i, j} of max(0, beta - |mu_i - mu_j|_2); 0
/// when N <= 1. The hinge is closed (zero at distance beta) and coincident
/// means get a zero subgradient.
[[nodiscard]] inline Var variance_loss(const SegmentStats& s, double beta) {
  if (!(beta > 0.0)) throw ContractViolation("variance_loss needs beta > 0");
  if (s.count <= 1) return detail::zero_scalar(*s.tape);
  const std::size_t n = s.count, d = s.dim;
  const Tensor& mu = s.means.value();
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;

  struct Active {
    std::size_t i, j;
    double dist;
  };
  std::vector<Active> active;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = mu[i * d + k] - mu[j * d + k];
        sq += diff * diff;
      }
      const double dist = std::sqrt(sq);
      if (dist < beta) {
        sum += beta - dist;
        active.push_back({i, j, dist});
      }
    }
  const Tensor* mv = &mu;
  return s.tape->record(Tensor::scalar(sum / pairs), {s.means.id()},
                        [active = std::move(active), mv, d, pairs](const Tensor& og, std::span<Tensor* const> ig) {
                          Tensor& dm = *ig[0];
                          const double g = og[0] / pairs;
                          for (const auto& a : active) {
                            if (a.dist == 0.0) continue;
                            for (std::size_t k = 0; k < d; ++k) {
                              const double u = ((*mv)[a.i * d + k] - (*mv)[a.j * d + k]) / a.dist;
                              dm[a.i * d + k] -= g * u;
                              dm[a.j * d + k] += g * u;
                            }
                          }
                        });
}

/// Self-supervised loss on one unannotated frame.
struct RealLoss {
  Var total;  // alpha * (invariance + variance); invalid when !active
  double invariance = 0.0;
  double variance = 0.0;
  double combined = 0.0;
  std::size_t segments = 0;
  bool active = false;  // false for frames with fewer than two segments
};

/// L_real = alpha * (L_inv + L_var). Frames with N <= 1 carry no pairwise
/// signal and are reported as zero without recording any tape work.
[[nodiscard]] inline RealLoss real_loss(const Var& dense, const MaskSet& masks, double alpha = kDefaultAlpha,
                                        double beta = kDefaultBeta) {
  RealLoss out;
  out.segments = masks.size();
  if (dense.shape().rank() != 3 || masks.height != dense.shape()[1] || masks.width != dense.shape()[2])
    throw InvalidShape("real_loss: mask set does not match features " + dense.shape().str());
  if (masks.size() <= 1) return out;
  SegmentStats stats = segment_pool(dense, masks);
  Var inv = invariance_loss(stats);
  Var var = variance_loss(stats, beta);
  out.total = ops::scale(ops::add(inv, var), alpha);
  out.invariance = inv.value().item();
  out.variance = var.value().item();
  out.combined = out.total.value().item();
  out.active = true;
  return out;
}

}  // namespace segpool
