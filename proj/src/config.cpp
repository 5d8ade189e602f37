#include "modse/config.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "modse/errors.hpp"
#include "modse/io.hpp"

using nlohmann::json;

namespace modse {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

std::vector<SizeRatio> ratios_from_json(const json& j) {
  if (j.is_string()) return parse_ratios(j.get<std::string>());
  if (!j.is_array()) throw ConfigError("model.expert_ratios must be \"homogeneous\" or a list of pairs");
  std::vector<SizeRatio> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw ConfigError("model.expert_ratios entries must be [large, small] pairs");
    }
    out.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  if (out.empty()) throw ConfigError("model.expert_ratios is empty; use \"homogeneous\" instead");
  return out;
}

}  // namespace

PairedExpertSpec ModelConfig::expert_spec() const {
  if (homogeneous()) return homogeneous_spec(dim, h_base, n_experts);
  return build_paired_spec(dim, h_base, expert_ratios);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (dim < 1 || n_layers < 1 || n_heads < 1 || n_experts < 1 || vocab_size < 1 || h_base < 1) {
    fail("sizes must be positive");
  }
  if (dim % n_heads != 0) fail("dim must be divisible by n_heads");
  if ((dim / n_heads) % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (top_k < 1 || top_k > n_experts) fail("top_k must lie in [1, n_experts]");
  if (seq_len < 1 || batch_size < 1) fail("seq_len and batch_size must be positive");
  if (!homogeneous()) {
    if (n_experts % 2 != 0) fail("n_experts must be even when ratios are given");
    if (static_cast<int>(expert_ratios.size()) * 2 != n_experts) {
      fail(std::to_string(expert_ratios.size()) + " ratio pairs do not describe " + std::to_string(n_experts) +
           " experts");
    }
  } else if (n_experts % 2 != 0) {
    fail("n_experts must be even");
  }
  try {
    expert_spec();
  } catch (const ConstraintError& e) {
    fail(e.what());
  }
}

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("optimizer: " + m); };
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) fail("betas must lie in (0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (weight_decay < 0 || grad_clip_norm <= 0) fail("weight_decay must be >= 0 and grad_clip_norm > 0");
  if (warmup_steps < 0 || total_steps < 0 || warmup_steps > total_steps) fail("need 0 <= warmup_steps <= total_steps");
  if (lr_init < 0 || lr_peak < 0 || lr_min < 0) fail("learning rates must be non-negative");
  if (!(alpha >= 0)) fail("alpha must be non-negative");
}

std::vector<SizeRatio> parse_ratios(const std::string& text) {
  if (text == "homogeneous") return {};
  std::vector<SizeRatio> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("ratio '" + item + "' must look like large:small");
    try {
      out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
    } catch (const std::exception&) {
      throw ConfigError("ratio '" + item + "' is not numeric");
    }
  }
  if (out.empty()) throw ConfigError("empty ratio list");
  return out;
}

std::string ratios_string(const std::vector<SizeRatio>& ratios) {
  if (ratios.empty()) return "homogeneous";
  std::string out;
  char buf[64];
  for (const auto& r : ratios) {
    std::snprintf(buf, sizeof buf, "%s%g:%g", out.empty() ? "" : ",", r.large, r.small);
    out += buf;
  }
  return out;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j, {"model", "optimizer", "data", "trace_every"}, "config");
  RunConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m,
                   {"dim", "n_layers", "n_heads", "n_experts", "top_k", "vocab_size", "h_base", "expert_ratios",
                    "seq_len", "batch_size", "seed"},
                   "model");
    auto& c = cfg.model;
    read(m, "dim", c.dim, "model");
    read(m, "n_layers", c.n_layers, "model");
    read(m, "n_heads", c.n_heads, "model");
    read(m, "n_experts", c.n_experts, "model");
    read(m, "top_k", c.top_k, "model");
    read(m, "vocab_size", c.vocab_size, "model");
    read(m, "h_base", c.h_base, "model");
    read(m, "seq_len", c.seq_len, "model");
    read(m, "batch_size", c.batch_size, "model");
    read(m, "seed", c.seed, "model");
    if (m.contains("expert_ratios")) c.expert_ratios = ratios_from_json(m.at("expert_ratios"));
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    reject_unknown(o,
                   {"beta1", "beta2", "eps", "weight_decay", "grad_clip_norm", "warmup_steps", "lr_init", "lr_peak",
                    "lr_min", "total_steps", "alpha"},
                   "optimizer");
    auto& c = cfg.optimizer;
    read(o, "beta1", c.beta1, "optimizer");
    read(o, "beta2", c.beta2, "optimizer");
    read(o, "eps", c.eps, "optimizer");
    read(o, "weight_decay", c.weight_decay, "optimizer");
    read(o, "grad_clip_norm", c.grad_clip_norm, "optimizer");
    read(o, "warmup_steps", c.warmup_steps, "optimizer");
    read(o, "lr_init", c.lr_init, "optimizer");
    read(o, "lr_peak", c.lr_peak, "optimizer");
    read(o, "lr_min", c.lr_min, "optimizer");
    read(o, "total_steps", c.total_steps, "optimizer");
    read(o, "alpha", c.alpha, "optimizer");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"train_tokens", "eval_tokens", "path"}, "data");
    read(d, "train_tokens", cfg.data.train_tokens, "data");
    read(d, "eval_tokens", cfg.data.eval_tokens, "data");
    read(d, "path", cfg.data.path, "data");
  }
  read(j, "trace_every", cfg.trace_every, "config");
  if (cfg.trace_every < 1) throw ConfigError("trace_every must be >= 1");
  cfg.model.validate();
  cfg.optimizer.validate();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const auto& m = cfg.model;
  json ratios;
  if (m.homogeneous()) {
    ratios = "homogeneous";
  } else {
    ratios = json::array();
    for (const auto& r : m.expert_ratios) ratios.push_back({r.large, r.small});
  }
  const auto& o = cfg.optimizer;
  return {{"model",
           {{"dim", m.dim},
            {"n_layers", m.n_layers},
            {"n_heads", m.n_heads},
            {"n_experts", m.n_experts},
            {"top_k", m.top_k},
            {"vocab_size", m.vocab_size},
            {"h_base", m.h_base},
            {"expert_ratios", ratios},
            {"seq_len", m.seq_len},
            {"batch_size", m.batch_size},
            {"seed", m.seed}}},
          {"optimizer",
           {{"beta1", o.beta1},
            {"beta2", o.beta2},
            {"eps", o.eps},
            {"weight_decay", o.weight_decay},
            {"grad_clip_norm", o.grad_clip_norm},
            {"warmup_steps", o.warmup_steps},
            {"lr_init", o.lr_init},
            {"lr_peak", o.lr_peak},
            {"lr_min", o.lr_min},
            {"total_steps", o.total_steps},
            {"alpha", o.alpha}}},
          {"data",
           {{"train_tokens", cfg.data.train_tokens}, {"eval_tokens", cfg.data.eval_tokens}, {"path", cfg.data.path}}},
          {"trace_every", cfg.trace_every}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  try {
    return run_config_from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace modse
