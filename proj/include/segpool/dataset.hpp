// SPDX-License-Identifier: Apache-2.0
//
// On-disk datasets: one directory per split with manifest.json, images as
// binary PPM and label / instance maps as binary PGM (value = id).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "segpool/error.hpp"
#include "segpool/netpbm.hpp"
#include "segpool/scenegen.hpp"
#include "segpool/segmask.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

struct FrameFiles {
  std::string image;
  std::string labels;
  std::string instances;
  std::string masks;  // looked up in a separate mask directory
};

struct DatasetManifest {
  std::string domain;
  std::uint64_t seed = 0;
  std::size_t classes = kDefaultClasses;
  std::size_t height = kDefaultSize;
  std::size_t width = kDefaultSize;
  DomainParams domain_params;
  std::vector<FrameFiles> frames;
};

inline nlohmann::json to_json(const DomainParams& d) {
  return {{"name", d.name},
          {"noise_sigma", d.noise_sigma},
          {"brightness_gradient", d.brightness_gradient},
          {"hue_rotation_deg", d.hue_rotation_deg},
          {"speckle_probability", d.speckle_probability},
          {"background", d.background}};
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : m.frames)
    frames.push_back({{"image", f.image}, {"labels", f.labels}, {"instances", f.instances}, {"masks", f.masks}});
  return {{"domain", m.domain},     {"count", m.frames.size()}, {"seed", m.seed},
          {"classes", m.classes},   {"height", m.height},       {"width", m.width},
          {"domain_params", to_json(m.domain_params)},          {"frames", std::move(frames)}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.domain = j.at("domain").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.classes = j.at("classes").get<std::size_t>();
  m.height = j.at("height").get<std::size_t>();
  m.width = j.at("width").get<std::size_t>();
  const auto& d = j.at("domain_params");
  m.domain_params.name = d.at("name").get<std::string>();
  m.domain_params.noise_sigma = d.at("noise_sigma").get<double>();
  m.domain_params.brightness_gradient = d.at("brightness_gradient").get<double>();
  m.domain_params.hue_rotation_deg = d.at("hue_rotation_deg").get<double>();
  m.domain_params.speckle_probability = d.at("speckle_probability").get<double>();
  m.domain_params.background = d.at("background").get<Rgb>();
  for (const auto& f : j.at("frames"))
    m.frames.push_back({f.at("image").get<std::string>(), f.at("labels").get<std::string>(),
                        f.at("instances").get<std::string>(), f.at("masks").get<std::string>()});
  if (j.at("count").get<std::size_t>() != m.frames.size()) throw DataError("manifest count does not match frame list");
  return m;
}

inline const char* kManifestName = "manifest.json";

[[nodiscard]] inline std::string frame_stem(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05zu", k);
  return buf;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

[[nodiscard]] inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_image(const std::filesystem::path& path, const Tensor& image) {
  const std::size_t h = image.shape()[1], w = image.shape()[2], hw = h * w;
  netpbm::Image8 img{w, h, 3, std::vector<std::uint8_t>(3 * hw)};
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[3 * p + c] = static_cast<std::uint8_t>(std::lround(std::clamp(image[c * hw + p], 0.0, 1.0) * 255.0));
  netpbm::write(path, img);
}

[[nodiscard]] inline Tensor read_image(const std::filesystem::path& path) {
  auto img = netpbm::read(path);
  if (img.channels != 3) throw DataError(path.string() + ": expected a P6 color image");
  const std::size_t hw = img.width * img.height;
  Tensor t(Shape{3, img.height, img.width});
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + p] = img.pixels[3 * p + c] / 255.0;
  return t;
}

inline void write_ids(const std::filesystem::path& path, const LabelGrid& g) {
  netpbm::Image8 img{g.width, g.height, 1, std::vector<std::uint8_t>(g.size())};
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.values[i] < 0 || g.values[i] > 255) throw DataError("id " + std::to_string(g.values[i]) + " does not fit PGM");
    img.pixels[i] = static_cast<std::uint8_t>(g.values[i]);
  }
  netpbm::write(path, img);
}

[[nodiscard]] inline LabelGrid read_ids(const std::filesystem::path& path) {
  auto img = netpbm::read(path);
  if (img.channels != 1) throw DataError(path.string() + ": expected a P5 gray image");
  LabelGrid g(img.width, img.height, 0);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = img.pixels[i];
  return g;
}

/// Writes `n` frames and a manifest into `dir`. Frame k is rendered from
/// seed ^ k, so growing n keeps earlier frames unchanged.
inline DatasetManifest gen_dataset(std::size_t n, const DomainParams& domain, const std::filesystem::path& dir,
                                   std::uint64_t seed, std::size_t classes = kDefaultClasses,
                                   std::size_t height = kDefaultSize, std::size_t width = kDefaultSize) {
  if (classes > 256) throw ContractViolation("at most 256 classes fit the PGM label format");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest m{domain.name, seed, classes, height, width, domain, {}};
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint64_t fseed = seed ^ static_cast<std::uint64_t>(k);
    Rng count_rng(derive_seed(fseed, 2));
    const int shapes = static_cast<int>(uniform_int(count_rng, kMinShapes, kMaxShapes));
    Frame f = render_frame(shapes, classes, domain, height, width, fseed);
    const std::string stem = frame_stem(k);
    FrameFiles files{stem + ".ppm", stem + ".labels.pgm", stem + ".instances.pgm", stem + ".masks.json"};
    write_image(dir / files.image, f.image);
    write_ids(dir / files.labels, f.labels);
    write_ids(dir / files.instances, f.instances);
    m.frames.push_back(files);
  }
  write_json_file(dir / kManifestName, to_json(m));
  return m;
}

enum class LabelAccess { allowed, forbidden };

/// Read access to a dataset directory. With LabelAccess::forbidden any
/// attempt to read a label map is a contract violation; this is how
/// unannotated use of a domain is enforced.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& dir, LabelAccess access) {
    Dataset d;
    d.dir_ = dir;
    d.access_ = access;
    try {
      d.manifest_ = manifest_from_json(read_json_file(dir / kManifestName));
    } catch (const nlohmann::json::exception& e) {
      throw DataError((dir / kManifestName).string() + ": " + e.what());
    }
    return d;
  }

  [[nodiscard]] std::size_t size() const noexcept { return manifest_.frames.size(); }
  [[nodiscard]] const DatasetManifest& manifest() const noexcept { return manifest_; }
  [[nodiscard]] const std::filesystem::path& dir() const noexcept { return dir_; }
  [[nodiscard]] LabelAccess label_access() const noexcept { return access_; }

  [[nodiscard]] Tensor image(std::size_t k) const {
    Tensor t = read_image(dir_ / frame(k).image);
    check_dims(t.shape()[1], t.shape()[2], frame(k).image);
    return t;
  }

  [[nodiscard]] LabelGrid labels(std::size_t k) const {
    if (access_ == LabelAccess::forbidden)
      throw ContractViolation("label access is forbidden for dataset " + dir_.string() + " (frame " +
                              frame(k).labels + ")");
    LabelGrid g = read_ids(dir_ / frame(k).labels);
    check_dims(g.height, g.width, frame(k).labels);
    for (int v : g.values)
      if (static_cast<std::size_t>(v) >= manifest_.classes)
        throw DataError(frame(k).labels + ": label " + std::to_string(v) + " >= class count " +
                        std::to_string(manifest_.classes));
    return g;
  }

  [[nodiscard]] LabelGrid instances(std::size_t k) const {
    LabelGrid g = read_ids(dir_ / frame(k).instances);
    check_dims(g.height, g.width, frame(k).instances);
    return g;
  }

  [[nodiscard]] std::filesystem::path mask_path(const std::filesystem::path& mask_dir, std::size_t k) const {
    return mask_dir / frame(k).masks;
  }

 private:
  [[nodiscard]] const FrameFiles& frame(std::size_t k) const {
    if (k >= manifest_.frames.size()) throw ContractViolation("frame index " + std::to_string(k) + " out of range");
    return manifest_.frames[k];
  }
  void check_dims(std::size_t h, std::size_t w, const std::string& file) const {
    if (h != manifest_.height || w != manifest_.width)
      throw DataError(file + ": dimensions " + std::to_string(w) + "x" + std::to_string(h) + " differ from manifest");
  }

  std::filesystem::path dir_;
  LabelAccess access_ = LabelAccess::allowed;
  DatasetManifest manifest_;
};

}  // namespace segpool
