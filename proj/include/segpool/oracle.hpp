// SPDX-License-Identifier: Apache-2.0
//
// Simulated class-agnostic "segment everything" output computed from
// ground-truth instance maps: whole-object masks, random partitions of
// objects into parts (which overlap the whole masks), ragged borders and
// spurious background blobs.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "segpool/dataset.hpp"
#include "segpool/error.hpp"
#include "segpool/rng.hpp"
#include "segpool/segmask.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

struct OracleParams {
  double split_probability = 0.7;
  std::size_t max_parts = 3;
  double keep_whole_probability = 0.8;
  std::size_t jitter_radius = 1;
  std::size_t spurious_masks = 2;
  std::size_t min_mask_pixels = 8;

  void validate() const {
    if (!(split_probability >= 0.0 && split_probability <= 1.0))
      throw ContractViolation("split probability must lie in [0, 1]");
    if (!(keep_whole_probability >= 0.0 && keep_whole_probability <= 1.0))
      throw ContractViolation("keep-whole probability must lie in [0, 1]");
    if (max_parts < 1) throw ContractViolation("max parts per instance must be >= 1");
    if (min_mask_pixels < 1) throw ContractViolation("min mask pixels must be >= 1");
  }
};

/// Chance that a pixel in the border band of a mask is flipped.
inline constexpr double kJitterFlipProbability = 0.25;

/// Radius range of spurious background discs on a 64x64 frame; scales with
/// the shorter image side.
inline constexpr double kSpuriousRadiusMin = 2.0;
inline constexpr double kSpuriousRadiusMax = 6.0;

namespace detail {

/// Flips pixels within `radius` (Chebyshev) of the mask border.
inline void jitter_border(Bitmap& b, std::size_t radius, Rng& rng) {
  if (radius == 0) return;
  const auto h = static_cast<std::ptrdiff_t>(b.height), w = static_cast<std::ptrdiff_t>(b.width);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const Bitmap src = b;
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      bool in = false, out = false;
      for (std::ptrdiff_t dy = -r; dy <= r && !(in && out); ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          (src.values[static_cast<std::size_t>(yy * w + xx)] ? in : out) = true;
        }
      if (in && out && uniform01(rng) < kJitterFlipProbability) {
        auto& v = b.values[static_cast<std::size_t>(y * w + x)];
        v = v ? 0 : 1;
      }
    }
}

inline std::size_t popcount(const Bitmap& b) {
  return static_cast<std::size_t>(std::count(b.values.begin(), b.values.end(), std::uint8_t{1}));
}

}  // namespace detail

/// Deterministic in (instances, params, seed). Instance id 0 is background.
[[nodiscard]] inline MaskSet oversegment_oracle(const LabelGrid& instances, const OracleParams& params,
                                                std::uint64_t seed) {
  params.validate();
  const std::size_t w = instances.width, h = instances.height;
  MaskSet out{w, h, {}};
  Rng rng(mix_seed(seed));

  std::map<int, std::vector<std::size_t>> pixels;
  std::vector<std::size_t> background;
  for (std::size_t p = 0; p < instances.size(); ++p) {
    if (instances.values[p] < 0) throw DataError("negative instance id");
    if (instances.values[p] == 0)
      background.push_back(p);
    else
      pixels[instances.values[p]].push_back(p);
  }

  auto emit = [&](Bitmap b) {
    detail::jitter_border(b, params.jitter_radius, rng);
    if (detail::popcount(b) >= params.min_mask_pixels) out.add(encode_rle(b));
  };

  for (const auto& [id, pix] : pixels) {
    const bool whole = uniform01(rng) < params.keep_whole_probability;
    const bool split = uniform01(rng) < params.split_probability && params.max_parts >= 2 && pix.size() >= 2;
    if (whole) {
      Bitmap b(w, h, 0);
      for (auto p : pix) b.values[p] = 1;
      emit(std::move(b));
    }
    if (split) {
      const std::size_t parts =
          std::min<std::size_t>(uniform_int(rng, 2, params.max_parts), pix.size());
      // Distinct seed pixels by partial Fisher-Yates over the instance's pixels.
      std::vector<std::size_t> pool = pix;
      for (std::size_t k = 0; k < parts; ++k) std::swap(pool[k], pool[uniform_int(rng, k, pool.size() - 1)]);
      std::vector<Bitmap> part(parts, Bitmap(w, h, 0));
      for (auto p : pix) {
        const auto py = static_cast<double>(p / w), px = static_cast<double>(p % w);
        std::size_t best = 0;
        double bd = 0.0;
        for (std::size_t k = 0; k < parts; ++k) {
          const double dy = py - static_cast<double>(pool[k] / w), dx = px - static_cast<double>(pool[k] % w);
          const double d = dx * dx + dy * dy;
          if (k == 0 || d < bd) {
            bd = d;
            best = k;
          }
        }
        part[best].values[p] = 1;
      }
      for (auto& b : part) emit(std::move(b));
    }
  }

  for (std::size_t j = 0; j < params.spurious_masks && !background.empty(); ++j) {
    const std::size_t c = background[uniform_int(rng, 0, background.size() - 1)];
    const auto cy = static_cast<double>(c / w), cx = static_cast<double>(c % w);
    const double radius = uniform(rng, kSpuriousRadiusMin, kSpuriousRadiusMax) * static_cast<double>(std::min(w, h)) / 64.0;
    Bitmap b(w, h, 0);
    for (auto p : background) {
      const double dy = static_cast<double>(p / w) - cy, dx = static_cast<double>(p % w) - cx;
      if (dx * dx + dy * dy <= radius * radius) b.values[p] = 1;
    }
    emit(std::move(b));
  }

  out.canonicalize();
  return out;
}

/// Runs the oracle over every frame of a dataset, writing one canonical
/// `.masks.json` per frame into `out_dir`. Frame k uses seed ^ k. Reads
/// instance maps only.
inline std::size_t simulate_masks(const Dataset& data, const std::filesystem::path& out_dir,
                                  const OracleParams& params, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  for (std::size_t k = 0; k < data.size(); ++k) {
    MaskSet ms = oversegment_oracle(data.instances(k), params, seed ^ static_cast<std::uint64_t>(k));
    save_maskset(ms, data.mask_path(out_dir, k));
  }
  return data.size();
}

}  // namespace segpool
