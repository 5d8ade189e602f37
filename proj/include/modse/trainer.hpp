#pragma once

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <vector>

#include "modse/analytics.hpp"
#include "modse/config.hpp"
#include "modse/model.hpp"
#include "modse/trace.hpp"

namespace modse {

struct TrainStepRecord {
  long long step = 0;
  double ce_loss = 0;
  double balance_loss_sum = 0;
  double lr = 0;
  double grad_norm_pre_clip = 0;
  std::vector<std::vector<double>> f;  // per layer
  std::vector<std::vector<double>> P;  // per layer
};

nlohmann::json to_json(const TrainStepRecord& r);

/// Output files of a run; an empty path skips that output.
struct TrainOutputs {
  std::filesystem::path metrics;
  std::filesystem::path trace;
  std::filesystem::path checkpoint_init;
  std::filesystem::path checkpoint_final;
};

struct TrainResult {
  std::vector<TrainStepRecord> records;
  ModelWeights<float> weights;
};

TraceHeader trace_header_for(const ModelConfig& cfg);

struct Corpora {
  std::vector<Index> train;
  std::vector<Index> eval;
};

/// Training and evaluation token streams of a run: the synthetic grammar from
/// the seed's "data" and "eval" streams, or the tail of data.path held out for
/// evaluation.
Corpora load_corpora(const RunConfig& cfg);

/// Trains from the config's seed on random windows of `corpus`. The objective
/// is next-token CE plus alpha times the per-layer balance losses summed.
/// Single-threaded and bitwise deterministic for a fixed config.
TrainResult train(const RunConfig& cfg, std::span<const Index> corpus, int steps, const TrainOutputs& outs = {});

struct EvalResult {
  double mean_ce = 0;
  std::optional<TokenLosses> per_token;  // token_index = position of the input token
};

/// Mean next-token CE over non-overlapping windows of the corpus. When
/// `trace` is given, the routing of every evaluated position is appended to
/// it with the token's CE attached.
EvalResult eval_loss(const ModelConfig& cfg, const ModelWeights<float>& w, std::span<const Index> corpus,
                     bool with_per_token, RoutingTrace* trace = nullptr, int epoch = 0);

/// Mean over steps and layers of max(f)/min(f) for the given step range
/// (+inf when some expert had no top-1 tokens in a step).
double mean_top1_ratio(std::span<const TrainStepRecord> records);

}  // namespace modse
