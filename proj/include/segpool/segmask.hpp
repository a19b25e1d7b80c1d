// SPDX-License-Identifier: Apache-2.0
//
// Run-length encoded binary segment masks. A MaskSet holds every segment
// found in one image; segments may overlap each other and may split a single
// object into several parts.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "segpool/error.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

using Bitmap = Grid<std::uint8_t>;

class EmptyMaskError : public DataError {
 public:
  using DataError::DataError;
};

struct Run {
  std::size_t start = 0;
  std::size_t length = 0;
  friend bool operator==(const Run&, const Run&) = default;
  friend auto operator<=>(const Run&, const Run&) = default;
};

/// One segment as sorted, disjoint, maximal runs over row-major pixel indices.
class SegmentMask {
 public:
  SegmentMask() = default;

  /// Validates and normalizes (merges touching runs). Throws DataError on
  /// unsorted, overlapping or out-of-range runs and EmptyMaskError when no
  /// pixel is set.
  SegmentMask(std::size_t width, std::size_t height, std::vector<Run> runs)
      : width_(width), height_(height) {
    if (width == 0 || height == 0) throw DataError("mask dimensions must be positive");
    const std::size_t n = width * height;
    std::size_t prev_end = 0;
    bool first = true;
    for (const auto& r : runs) {
      if (r.length == 0) throw DataError("mask run of length 0 at offset " + std::to_string(r.start));
      if (r.start + r.length > n || r.start + r.length < r.start)
        throw DataError("mask run [" + std::to_string(r.start) + ", +" + std::to_string(r.length) +
                        ") exceeds image of " + std::to_string(n) + " pixels");
      if (!first && r.start < prev_end) throw DataError("mask runs must be sorted and non-overlapping");
      if (!first && r.start == prev_end)
        runs_.back().length += r.length;
      else
        runs_.push_back(r);
      prev_end = r.start + r.length;
      first = false;
    }
    if (runs_.empty()) throw EmptyMaskError("segment mask has no pixels");
    for (const auto& r : runs_) count_ += r.length;
  }

  [[nodiscard]] std::size_t width() const noexcept { return width_; }
  [[nodiscard]] std::size_t height() const noexcept { return height_; }
  [[nodiscard]] const std::vector<Run>& runs() const noexcept { return runs_; }
  [[nodiscard]] std::size_t pixel_count() const noexcept { return count_; }

  friend bool operator==(const SegmentMask&, const SegmentMask&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<Run> runs_;
  std::size_t count_ = 0;
};

[[nodiscard]] inline SegmentMask encode_rle(const Bitmap& bitmap) {
  std::vector<Run> runs;
  const std::size_t n = bitmap.size();
  for (std::size_t i = 0; i < n;) {
    if (!bitmap.values[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && bitmap.values[j]) ++j;
    runs.push_back({i, j - i});
    i = j;
  }
  if (runs.empty()) throw EmptyMaskError("cannot encode an all-false bitmap");
  return SegmentMask(bitmap.width, bitmap.height, std::move(runs));
}

[[nodiscard]] inline Bitmap decode_rle(const SegmentMask& mask) {
  Bitmap b(mask.width(), mask.height(), 0);
  for (const auto& r : mask.runs()) std::fill_n(b.values.begin() + static_cast<std::ptrdiff_t>(r.start), r.length, 1);
  return b;
}

struct MaskSet {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<SegmentMask> masks;

  [[nodiscard]] std::size_t size() const noexcept { return masks.size(); }

  /// Orders masks by (first run start, pixel count, runs).
  void canonicalize() {
    std::sort(masks.begin(), masks.end(), [](const SegmentMask& a, const SegmentMask& b) {
      return std::forward_as_tuple(a.runs().front().start, a.pixel_count(), a.runs()) <
             std::forward_as_tuple(b.runs().front().start, b.pixel_count(), b.runs());
    });
  }

  void add(SegmentMask m) {
    if (m.width() != width || m.height() != height)
      throw InvalidShape("mask is " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                         ", set is " + std::to_string(width) + "x" + std::to_string(height));
    masks.push_back(std::move(m));
  }

  friend bool operator==(const MaskSet&, const MaskSet&) = default;
};

/// Canonical JSON form: {"height","masks":[{"runs":[s0,l0,s1,l1,...]}],"width"}
/// with masks in canonical order.
[[nodiscard]] inline nlohmann::json to_json(const MaskSet& ms) {
  MaskSet sorted = ms;
  sorted.canonicalize();
  nlohmann::json masks = nlohmann::json::array();
  for (const auto& m : sorted.masks) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : m.runs()) {
      runs.push_back(r.start);
      runs.push_back(r.length);
    }
    masks.push_back({{"runs", std::move(runs)}});
  }
  return {{"width", ms.width}, {"height", ms.height}, {"masks", std::move(masks)}};
}

[[nodiscard]] inline std::string serialize(const MaskSet& ms) { return to_json(ms).dump() + "\n"; }

[[nodiscard]] inline MaskSet maskset_from_json(const nlohmann::json& j) {
  try {
    MaskSet ms;
    ms.width = j.at("width").get<std::size_t>();
    ms.height = j.at("height").get<std::size_t>();
    if (ms.width == 0 || ms.height == 0) throw DataError("mask set dimensions must be positive");
    for (const auto& m : j.at("masks")) {
      const auto& flat = m.at("runs");
      if (flat.size() % 2 != 0) throw DataError("mask run list has odd length");
      std::vector<Run> runs;
      for (std::size_t i = 0; i < flat.size(); i += 2)
        runs.push_back({flat[i].get<std::size_t>(), flat[i + 1].get<std::size_t>()});
      ms.masks.emplace_back(ms.width, ms.height, std::move(runs));
    }
    ms.canonicalize();
    return ms;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed mask set: ") + e.what());
  }
}

inline void save_maskset(const MaskSet& ms, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << serialize(ms);
  if (!out) throw DataError("write failed: " + path.string());
}

[[nodiscard]] inline MaskSet load_maskset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mask file " + path.string());
  try {
    return maskset_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const EmptyMaskError& e) {
    throw EmptyMaskError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

struct MaskStats {
  std::size_t count = 0;
  std::vector<std::size_t> pixel_counts;
  std::size_t overlap_pixels = 0;  // pixels inside >= 2 masks
  double coverage = 0.0;           // fraction of pixels inside >= 1 mask
};

[[nodiscard]] inline MaskStats mask_stats(const MaskSet& ms) {
  MaskStats s;
  s.count = ms.masks.size();
  const std::size_t n = ms.width * ms.height;
  std::vector<std::uint32_t> hits(n, 0);
  for (const auto& m : ms.masks) {
    s.pixel_counts.push_back(m.pixel_count());
    for (const auto& r : m.runs())
      for (std::size_t i = r.start; i < r.start + r.length; ++i) ++hits[i];
  }
  std::size_t covered = 0;
  for (auto h : hits) {
    covered += h >= 1;
    s.overlap_pixels += h >= 2;
  }
  s.coverage = n ? static_cast<double>(covered) / static_cast<double>(n) : 0.0;
  return s;
}

}  // namespace segpool
