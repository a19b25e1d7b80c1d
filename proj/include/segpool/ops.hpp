// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations recorded on a Tape. Feature maps are
// rank-3 (C x H x W); convolution weights are rank-4 (Cout x Cin x k x k).
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "segpool/autodiff.hpp"
#include "segpool/error.hpp"
#include "segpool/tensor.hpp"

namespace segpool::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.shape().rank() != rank)
    throw InvalidShape(std::string(what) + " must have rank " + std::to_string(rank) + ", got " + t.shape().str());
}

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  [[nodiscard]] std::size_t rows() const { return cin * k * k; }
  [[nodiscard]] std::size_t cols() const { return ho * wo; }
  [[nodiscard]] bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline void im2col(const ConvGeometry& g, const double* in, double* col) {
  const auto ih = static_cast<std::ptrdiff_t>(g.h), iw = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (y < 0 || y >= ih) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = in + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (x < 0 || x >= iw) ? 0.0 : src[x];
          }
        }
      }
}

inline void col2im_add(const ConvGeometry& g, const double* col, double* in) {
  const auto ih = static_cast<std::ptrdiff_t>(g.h), iw = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= ih) continue;
          const double* src = row + oy * g.wo;
          double* dst = in + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (x >= 0 && x < iw) dst[x] += src[ox];
          }
        }
      }
}

/// Source taps for one output index of a 2x half-pixel-center upsampling.
struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<Tap> upsample_taps(std::size_t n) {
  std::vector<Tap> taps(2 * n);
  const double hi = static_cast<double>(n - 1);
  for (std::size_t d = 0; d < 2 * n; ++d) {
    double s = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, hi);
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double f = s - static_cast<double>(i0);
    taps[d] = Tap{i0, i1, 1.0 - f, f};
  }
  return taps;
}

}  // namespace detail

/// Output extent of a convolution along one axis.
[[nodiscard]] inline std::size_t conv_out_extent(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw InvalidShape("conv2d stride must be positive");
  if (n + 2 * pad < k)
    throw InvalidShape("conv2d kernel " + std::to_string(k) + " larger than padded extent " +
                       std::to_string(n + 2 * pad));
  return (n + 2 * pad - k) / stride + 1;
}

/// 2-D cross-correlation with square odd kernels, zero padding and bias.
[[nodiscard]] inline Var conv2d(const Var& input, const Var& weight, const Var& bias, std::size_t stride = 1,
                                std::size_t padding = 0) {
  using namespace detail;
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const std::size_t cout = w.shape()[0];
  const std::size_t k = w.shape()[2];
  if (w.shape()[3] != k || k % 2 == 0) throw InvalidShape("conv2d kernel must be square and odd, got " + w.shape().str());
  if (w.shape()[1] != x.shape()[0])
    throw InvalidShape("conv2d weight " + w.shape().str() + " does not match input channels of " + x.shape().str());
  if (bias.value().shape() != Shape{cout})
    throw InvalidShape("conv2d bias must have shape [" + std::to_string(cout) + "], got " + bias.value().shape().str());

  ConvGeometry g{x.shape()[0], x.shape()[1], x.shape()[2], k, stride, padding, 0, 0};
  g.ho = conv_out_extent(g.h, k, stride, padding);
  g.wo = conv_out_extent(g.w, k, stride, padding);

  Storage col;
  const double* col_ptr = x.data().data();
  if (!g.pointwise()) {
    col.resize(g.rows() * g.cols());
    im2col(g, x.data().data(), col.data());
    col_ptr = col.data();
  }

  Tensor out(Shape{cout, g.ho, g.wo});
  MatMap om(out.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.cols()));
  ConstMatMap wm(w.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.rows()));
  ConstMatMap cm(col_ptr, static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
  om.noalias() = wm * cm;
  Eigen::Map<const Eigen::VectorXd> bv(bias.value().data().data(), static_cast<Eigen::Index>(cout));
  om.colwise() += bv;

  Tape& tape = input.tape();
  if (!tape.requires_grad({input, weight, bias})) return tape.leaf(std::move(out));

  const Tensor* xv = &x;
  const Tensor* wv = &w;
  return tape.record(std::move(out), {input.id(), weight.id(), bias.id()},
                     [g, cout, xv, wv, col = std::move(col)](const Tensor& og, std::span<Tensor* const> ig) {
                       const auto rows = static_cast<Eigen::Index>(g.rows());
                       const auto cols = static_cast<Eigen::Index>(g.cols());
                       const auto co = static_cast<Eigen::Index>(cout);
                       ConstMatMap gm(og.data().data(), co, cols);
                       const double* cp = g.pointwise() ? xv->data().data() : col.data();
                       ConstMatMap cm(cp, rows, cols);
                       if (ig[1]) {
                         MatMap dw(ig[1]->data().data(), co, rows);
                         dw.noalias() += gm * cm.transpose();
                       }
                       if (ig[2]) {
                         Eigen::Map<Eigen::VectorXd> db(ig[2]->data().data(), co);
                         db += gm.rowwise().sum();
                       }
                       if (ig[0]) {
                         ConstMatMap wm(wv->data().data(), co, rows);
                         if (g.pointwise()) {
                           MatMap dx(ig[0]->data().data(), rows, cols);
                           dx.noalias() += wm.transpose() * gm;
                         } else {
                           RowMat dcol(rows, cols);
                           dcol.noalias() = wm.transpose() * gm;
                           col2im_add(g, dcol.data(), ig[0]->data().data());
                         }
                       }
                     });
}

inline constexpr double kGeluCubic = 0.044715;

/// Elementwise tanh-approximation GELU. tanh(u) is evaluated as
/// 1 - 2 / (exp(2u) + 1) through Eigen's vectorized exp.
[[nodiscard]] inline Var gelu(const Var& input) {
  using namespace detail;
  const Tensor& x = input.value();
  const auto n = static_cast<Eigen::Index>(x.size());
  const double c = std::sqrt(2.0 / std::numbers::pi);
  ConstArrMap xa(x.data().data(), n);
  Eigen::ArrayXd t = 1.0 - 2.0 / ((2.0 * c * (xa + kGeluCubic * xa.cube())).exp() + 1.0);
  Tensor out(x.shape());
  ArrMap(out.data().data(), n) = 0.5 * xa * (1.0 + t);

  Tape& tape = input.tape();
  if (!tape.requires_grad({input})) return tape.leaf(std::move(out));
  const Tensor* xv = &x;
  return tape.record(std::move(out), {input.id()},
                     [xv, c, t = std::move(t)](const Tensor& og, std::span<Tensor* const> ig) {
                       const auto n = static_cast<Eigen::Index>(og.size());
                       ConstArrMap xa(xv->data().data(), n);
                       ConstArrMap ga(og.data().data(), n);
                       ArrMap(ig[0]->data().data(), n) +=
                           ga * (0.5 * (1.0 + t) +
                                 0.5 * xa * (1.0 - t.square()) * c * (1.0 + 3.0 * kGeluCubic * xa.square()));
                     });
}

/// Bilinear 2x upsampling, half-pixel centers, edge clamped.
[[nodiscard]] inline Var upsample_bilinear_2x(const Var& input) {
  using namespace detail;
  const Tensor& x = input.value();
  require_rank(x, 3, "upsample input");
  const std::size_t ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = 2 * h, ow = 2 * w;
  auto ty = upsample_taps(h);
  auto tx = upsample_taps(w);

  Tensor out(Shape{ch, oh, ow});
  for (std::size_t c = 0; c < ch; ++c) {
    const double* src = x.data().data() + c * h * w;
    double* dst = out.data().data() + c * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const Tap& a = ty[y];
      const double* r0 = src + a.i0 * w;
      const double* r1 = src + a.i1 * w;
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const Tap& b = tx[xo];
        dst[y * ow + xo] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
      }
    }
  }

  Tape& tape = input.tape();
  if (!tape.requires_grad({input})) return tape.leaf(std::move(out));
  return tape.record(std::move(out), {input.id()},
                     [ch, h, w, ty = std::move(ty), tx = std::move(tx)](const Tensor& og,
                                                                         std::span<Tensor* const> ig) {
                       const std::size_t oh = 2 * h, ow = 2 * w;
                       for (std::size_t c = 0; c < ch; ++c) {
                         const double* g = og.data().data() + c * oh * ow;
                         double* dst = ig[0]->data().data() + c * h * w;
                         for (std::size_t y = 0; y < oh; ++y) {
                           const Tap& a = ty[y];
                           double* r0 = dst + a.i0 * w;
                           double* r1 = dst + a.i1 * w;
                           for (std::size_t xo = 0; xo < ow; ++xo) {
                             const Tap& b = tx[xo];
                             const double gv = g[y * ow + xo];
                             r0[b.i0] += a.w0 * b.w0 * gv;
                             r0[b.i1] += a.w0 * b.w1 * gv;
                             r1[b.i0] += a.w1 * b.w0 * gv;
                             r1[b.i1] += a.w1 * b.w1 * gv;
                           }
                         }
                       }
                     });
}

[[nodiscard]] inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw InvalidShape("add: " + a.shape().str() + " vs " + b.shape().str());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()}, [](const Tensor& og, std::span<Tensor* const> ig) {
    for (auto* g : ig)
      if (g)
        for (std::size_t i = 0; i < og.size(); ++i) (*g)[i] += og[i];
  });
}

/// Stacks b's channels after a's.
[[nodiscard]] inline Var concat_channels(const Var& a, const Var& b) {
  detail::require_rank(a.value(), 3, "concat input");
  detail::require_rank(b.value(), 3, "concat input");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa[1] != sb[1] || sa[2] != sb[2])
    throw InvalidShape("concat_channels spatial mismatch: " + sa.str() + " vs " + sb.str());
  Tensor out(Shape{sa[0] + sb[0], sa[1], sa[2]});
  std::copy(a.value().values().begin(), a.value().values().end(), out.values().begin());
  std::copy(b.value().values().begin(), b.value().values().end(),
            out.values().begin() + static_cast<std::ptrdiff_t>(a.value().size()));
  const std::size_t na = a.value().size();
  return a.tape().record(std::move(out), {a.id(), b.id()}, [na](const Tensor& og, std::span<Tensor* const> ig) {
    if (ig[0])
      for (std::size_t i = 0; i < na; ++i) (*ig[0])[i] += og[i];
    if (ig[1])
      for (std::size_t i = 0; i < ig[1]->size(); ++i) (*ig[1])[i] += og[na + i];
  });
}

/// Multiplies every element by a constant.
[[nodiscard]] inline Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= factor;
  return a.tape().record(std::move(out), {a.id()}, [factor](const Tensor& og, std::span<Tensor* const> ig) {
    for (std::size_t i = 0; i < og.size(); ++i) (*ig[0])[i] += factor * og[i];
  });
}

}  // namespace segpool::ops
