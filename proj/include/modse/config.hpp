#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "modse/paired_spec.hpp"

namespace modse {

struct ModelConfig {
  int dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_experts = 8;
  int top_k = 2;
  int vocab_size = 258;
  int h_base = 160;
  // Empty means homogeneous experts of width h_base.
  std::vector<SizeRatio> expert_ratios = published_ratios();
  int seq_len = 256;
  int batch_size = 16;
  std::uint64_t seed = 0;

  bool homogeneous() const { return expert_ratios.empty(); }
  PairedExpertSpec expert_spec() const;
  // Throws ConfigError on any violated invariant.
  void validate() const;
};

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;
  int warmup_steps = 2000;
  double lr_init = 2e-7;
  double lr_peak = 3e-4;
  double lr_min = 3e-5;
  int total_steps = 10000;
  double alpha = 0.01;

  void validate() const;
};

struct DataConfig {
  // Synthetic grammar corpus sizes in tokens, used when `path` is empty.
  std::int64_t train_tokens = 200000;
  std::int64_t eval_tokens = 8192;
  std::string path;  // optional UTF-8 text file, one document per line
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  DataConfig data;
  int trace_every = 50;  // training trace records every n-th step
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

/// "homogeneous" or "4.5:0.5,4.0:1.0,..." as accepted by the --ratios flag.
std::vector<SizeRatio> parse_ratios(const std::string& text);
std::string ratios_string(const std::vector<SizeRatio>& ratios);

}  // namespace modse
