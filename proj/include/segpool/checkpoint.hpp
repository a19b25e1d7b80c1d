// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (little-endian):
//   "SRGC" | u32 format version | u64 header length | JSON header | f64 data
// The header holds the model config, training hyperparameters, progress, the
// per-epoch log and a tensor directory (name, shape, element offset) that
// indexes the raw f64 block. Tensors are stored as params/*, ema/*,
// adam_m/*, adam_v/* in parameter layout order.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "segpool/adam.hpp"
#include "segpool/error.hpp"
#include "segpool/model.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'R', 'G', 'C'};

/// One metrics-log record. Loss means are absent when no step of that kind
/// ran in the epoch; ema_miou is absent without a test split.
struct EpochMetrics {
  std::size_t epoch = 0;
  std::optional<double> mean_sup_loss;
  std::optional<double> mean_inv_loss;
  std::optional<double> mean_var_loss;
  std::optional<double> ema_miou;
  std::uint64_t optimizer_steps = 0;  // cumulative

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", m.epoch},
          {"mean_sup_loss", opt(m.mean_sup_loss)},
          {"mean_inv_loss", opt(m.mean_inv_loss)},
          {"mean_var_loss", opt(m.mean_var_loss)},
          {"ema_miou", opt(m.ema_miou)},
          {"optimizer_steps", m.optimizer_steps}};
}

inline EpochMetrics epoch_metrics_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* key) -> std::optional<double> {
    const auto& v = j.at(key);
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  return {j.at("epoch").get<std::size_t>(), opt("mean_sup_loss"), opt("mean_inv_loss"),
          opt("mean_var_loss"),             opt("ema_miou"),      j.at("optimizer_steps").get<std::uint64_t>()};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"classes", c.classes},
          {"dense_dim", c.dense_dim},
          {"base_channels", c.base_channels},
          {"fused_channels", c.fused_channels},
          {"hidden_channels", c.hidden_channels}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.classes = j.at("classes").get<std::size_t>();
  c.dense_dim = j.at("dense_dim").get<std::size_t>();
  c.base_channels = j.at("base_channels").get<std::size_t>();
  c.fused_channels = j.at("fused_channels").get<std::size_t>();
  c.hidden_channels = j.at("hidden_channels").get<std::size_t>();
  c.validate();
  return c;
}

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig model;
  nlohmann::json train_config = nlohmann::json::object();
  ModelParams params;
  ModelParams ema;
  AdamState adam;
  std::size_t epoch = 0;  // completed epochs
  std::vector<EpochMetrics> log;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

template <typename Vec>
struct TensorGroup {
  const char* prefix;
  Vec* tensors;
};

}  // namespace detail

[[nodiscard]] inline std::string serialize(const Checkpoint& ck) {
  const auto layout = param_layout(ck.model);
  using Group = detail::TensorGroup<const std::vector<Tensor>>;
  const Group groups[] = {
      {"params", &ck.params.tensors}, {"ema", &ck.ema.tensors}, {"adam_m", &ck.adam.m}, {"adam_v", &ck.adam.v}};
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& g : groups) {
    if (g.tensors->size() != layout.size())
      throw ContractViolation(std::string("checkpoint group ") + g.prefix + " does not match the model layout");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if ((*g.tensors)[i].shape() != layout[i].shape)
        throw ContractViolation("checkpoint tensor " + layout[i].name + " has the wrong shape");
      dir.push_back({{"name", std::string(g.prefix) + "/" + layout[i].name},
                     {"shape", layout[i].shape.dims()},
                     {"offset", offset}});
      offset += layout[i].shape.numel();
    }
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& m : ck.log) log.push_back(to_json(m));
  nlohmann::json header = {{"model", to_json(ck.model)},  {"train_config", ck.train_config},
                           {"epoch", ck.epoch},           {"adam_step", ck.adam.step},
                           {"log", std::move(log)},       {"tensors", std::move(dir)},
                           {"total_values", offset}};
  const std::string hs = header.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, ck.version);
  detail::put_u64(out, hs.size());
  out += hs;
  out.reserve(out.size() + offset * 8);
  for (const auto& g : groups)
    for (const auto& t : *g.tensors)
      for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

namespace detail {

inline void parse_checkpoint_body(const std::string& bytes, std::uint64_t hlen, const std::string& where,
                                  Checkpoint& ck) {
  const nlohmann::json header =
      nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  ck.model = model_config_from_json(header.at("model"));
  ck.train_config = header.at("train_config");
  ck.epoch = header.at("epoch").get<std::size_t>();
  ck.adam.step = header.at("adam_step").get<std::uint64_t>();
  for (const auto& m : header.at("log")) ck.log.push_back(epoch_metrics_from_json(m));

  const auto layout = param_layout(ck.model);
  const std::uint64_t total = header.at("total_values").get<std::uint64_t>();
  const std::size_t data_start = 16 + hlen;
  if ((bytes.size() - data_start) / 8 < total || (bytes.size() - data_start) != total * 8)
    throw DataError(where + ": truncated or oversized tensor data (expected " + std::to_string(total * 8) +
                    " bytes, found " + std::to_string(bytes.size() - data_start) + ")");

  ck.params.config = ck.model;
  ck.ema.config = ck.model;
  using Group = TensorGroup<std::vector<Tensor>>;
  const Group groups[] = {
      {"params", &ck.params.tensors}, {"ema", &ck.ema.tensors}, {"adam_m", &ck.adam.m}, {"adam_v", &ck.adam.v}};
  const auto& dir = header.at("tensors");
  if (dir.size() != 4 * layout.size()) throw DataError(where + ": tensor directory does not match model layout");
  std::size_t entry = 0;
  for (const auto& g : groups)
    for (const auto& spec : layout) {
      const auto& d = dir[entry++];
      const std::string expect = std::string(g.prefix) + "/" + spec.name;
      if (d.at("name").get<std::string>() != expect) throw DataError(where + ": expected tensor " + expect);
      Shape shape(d.at("shape").get<std::vector<std::size_t>>());
      if (shape != spec.shape) throw DataError(where + ": tensor " + expect + " has shape " + shape.str());
      const std::uint64_t off = d.at("offset").get<std::uint64_t>();
      if (off + shape.numel() > total) throw DataError(where + ": tensor " + expect + " out of range");
      std::vector<double> values(shape.numel());
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = std::bit_cast<double>(get_le(bytes, data_start + 8 * (off + i), 8));
      g.tensors->emplace_back(std::move(shape), std::move(values));
    }
}

}  // namespace detail

[[nodiscard]] inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  if (bytes.size() < 16) throw DataError(where + ": truncated (no header)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw DataError(where + ": bad magic, not a checkpoint");
  Checkpoint ck;
  ck.version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (ck.version != kCheckpointVersion)
    throw DataError(where + ": unsupported format version " + std::to_string(ck.version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t hlen = detail::get_le(bytes, 8, 8);
  if (hlen > bytes.size() - 16) throw DataError(where + ": truncated header");
  try {
    detail::parse_checkpoint_body(bytes, hlen, where, ck);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed header: " + e.what());
  } catch (const InvalidShape& e) {
    throw DataError(where + ": " + e.what());
  } catch (const ContractViolation& e) {
    throw DataError(where + ": " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

[[nodiscard]] inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace segpool
