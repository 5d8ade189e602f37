#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>

#include "modse/config.hpp"
#include "modse/errors.hpp"
#include "modse/io.hpp"
#include "modse/model.hpp"

namespace modse {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'D', 'S', 'E', 'C', 'K', '1'};

/// Layout: magic, u64 header length, JSON header (config, expert sizes,
/// tensor names and shapes), then every tensor as little-endian float32 in
/// header order.
template <typename Scalar>
std::string encode_checkpoint(const RunConfig& cfg, const ModelWeights<Scalar>& w, long long step) {
  nlohmann::json tensors = nlohmann::json::array();
  const auto named = named_parameters(w);
  for (const auto& [name, t] : named) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  const auto spec = cfg.model.expert_spec();
  const nlohmann::json header{{"type", "modse-checkpoint"},
                              {"version", 1},
                              {"step", step},
                              {"config", to_json(cfg)},
                              {"expert_sizes", spec.expert_sizes},
                              {"spec_hash", spec.hash()},
                              {"tensors", tensors}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  le::put_u64(out, h.size());
  out += h;
  for (const auto& [_, t] : named) {
    for (Scalar v : t.values()) le::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const ModelWeights<Scalar>& w,
                     long long step) {
  write_file_atomic(path, encode_checkpoint(cfg, w, step));
}

template <typename Scalar>
struct LoadedCheckpoint {
  RunConfig config;
  ModelWeights<Scalar> weights;
  long long step = 0;
};

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0) {
    throw DataError(path.string() + ": not a checkpoint");
  }
  const std::uint64_t hlen = le::get_u64(p + 8);
  if (bytes.size() < 16 + hlen) throw DataError(path.string() + ": truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  LoadedCheckpoint<Scalar> out;
  out.config = run_config_from_json(header.at("config"));
  out.step = header.value("step", 0LL);
  out.weights = init_model<Scalar>(out.config.model);
  auto named = named_parameters(out.weights);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != named.size()) throw DataError(path.string() + ": tensor count does not match the config");
  std::size_t off = 16 + hlen;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    if (tensors[i].at("name") != name || tensors[i].at("shape").get<Shape>() != t.shape()) {
      throw DataError(path.string() + ": tensor " + name + " does not match the config");
    }
    const auto n = static_cast<std::size_t>(t.size());
    if (bytes.size() < off + 4 * n) throw DataError(path.string() + ": truncated tensor " + name);
    Scalar* dst = t.mutable_value().data();
    for (std::size_t k = 0; k < n; ++k) dst[k] = static_cast<Scalar>(le::get_f32(p + off + 4 * k));
    off += 4 * n;
  }
  if (off != bytes.size()) throw DataError(path.string() + ": trailing bytes after the last tensor");
  return out;
}

}  // namespace modse
