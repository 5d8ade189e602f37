#include "modse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "modse/checkpoint.hpp"
#include "modse/data.hpp"
#include "modse/errors.hpp"
#include "modse/io.hpp"
#include "modse/optim.hpp"
#include "modse/rng.hpp"

namespace fs = std::filesystem;

namespace modse {

namespace {

// JSONL file built in `<path>.tmp` and renamed into place on commit.
class LineWriter {
 public:
  explicit LineWriter(const fs::path& path) : path_(path) {
    if (path_.empty()) return;
    out_.open(temp_path_for(path_), std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + temp_path_for(path_).string());
  }
  ~LineWriter() {
    if (!path_.empty() && !committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(temp_path_for(path_), ec);
    }
  }
  void line(const std::string& s) {
    if (!path_.empty()) out_ << s << '\n';
  }
  void commit() {
    if (path_.empty()) return;
    out_.close();
    if (!out_) throw IoError("write failed for " + path_.string());
    std::error_code ec;
    fs::rename(temp_path_for(path_), path_, ec);
    if (ec) throw IoError("cannot rename onto " + path_.string());
    committed_ = true;
  }

 private:
  fs::path path_;
  std::ofstream out_;
  bool committed_ = false;
};

void append_routing(RoutingTrace* trace, TraceWriter* writer, const std::vector<GateOutput<float>>& gates, int epoch,
                    std::int64_t token_base, const std::vector<float>& ce) {
  for (std::size_t l = 0; l < gates.size(); ++l) {
    const auto& go = gates[l];
    for (Index t = 0; t < go.tokens; ++t) {
      for (Index r = 0; r < go.k; ++r) {
        RoutingRecord rec{epoch,
                          static_cast<int>(l),
                          token_base + t,
                          static_cast<int>(r),
                          static_cast<int>(go.index(t, r)),
                          std::clamp(go.topk_weights(t, r), 0.0f, 1.0f),
                          ce.empty() ? std::nullopt : std::optional<float>(ce[static_cast<std::size_t>(t)])};
        if (trace) trace->records.push_back(rec);
        if (writer) writer->append(rec);
      }
    }
  }
}

}  // namespace

nlohmann::json to_json(const TrainStepRecord& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < r.f.size(); ++l) layers.push_back({{"f", r.f[l]}, {"P", r.P[l]}});
  return {{"step", r.step},
          {"ce_loss", r.ce_loss},
          {"balance_loss_sum", r.balance_loss_sum},
          {"lr", r.lr},
          {"grad_norm_pre_clip", r.grad_norm_pre_clip},
          {"layers", layers}};
}

TraceHeader trace_header_for(const ModelConfig& cfg) {
  const auto spec = cfg.expert_spec();
  return {spec.hash(), cfg.n_experts, cfg.n_layers, cfg.top_k, spec.expert_sizes};
}

Corpora load_corpora(const RunConfig& cfg) {
  Corpora c;
  if (cfg.data.path.empty()) {
    const SeedStreams seeds(cfg.model.seed);
    c.train = grammar_corpus(seeds.derive("data"), cfg.data.train_tokens);
    c.eval = grammar_corpus(seeds.derive("eval"), cfg.data.eval_tokens);
    return c;
  }
  const auto all = read_text_corpus(cfg.data.path);
  if (static_cast<std::int64_t>(all.size()) <= cfg.data.eval_tokens + 1) {
    throw DataError(cfg.data.path + " is too short for the requested eval split");
  }
  const auto split = all.end() - cfg.data.eval_tokens;
  c.train.assign(all.begin(), split);
  c.eval.assign(split, all.end());
  return c;
}

TrainResult train(const RunConfig& cfg, std::span<const Index> corpus, int steps, const TrainOutputs& outs) {
  cfg.model.validate();
  cfg.optimizer.validate();
  if (steps < 0) throw ArgumentError("step count must be >= 0");
  const Index batch = cfg.model.batch_size, seq = cfg.model.seq_len;
  if (static_cast<Index>(corpus.size()) < seq + 1) {
    throw DataError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than one training window");
  }

  TrainResult result;
  result.weights = init_model<float>(cfg.model);
  auto params = parameters(result.weights);
  auto state = make_adam_state(params);
  auto rng = SeedStreams(cfg.model.seed).stream("shuffle");
  std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(corpus.size()) - seq - 1);

  if (!outs.checkpoint_init.empty()) save_checkpoint(outs.checkpoint_init, cfg, result.weights, 0);
  LineWriter metrics(outs.metrics);
  std::optional<TraceWriter> trace;
  if (!outs.trace.empty()) trace.emplace(outs.trace, trace_header_for(cfg.model));

  std::vector<Index> inputs(static_cast<std::size_t>(batch * seq)), targets(inputs.size());
  for (int step = 0; step < steps; ++step) {
    for (Index b = 0; b < batch; ++b) {
      const auto off = static_cast<std::size_t>(pick(rng));
      for (Index i = 0; i < seq; ++i) {
        inputs[static_cast<std::size_t>(b * seq + i)] = corpus[off + static_cast<std::size_t>(i)];
        targets[static_cast<std::size_t>(b * seq + i)] = corpus[off + static_cast<std::size_t>(i) + 1];
      }
    }
    for (auto& p : params) p.zero_grad();
    Graph<float> g;
    const auto fwd = transformer_forward(g, cfg.model, result.weights, inputs, batch, seq);
    const auto parts = training_loss(g, fwd, targets, cfg.optimizer.alpha);
    if (!std::isfinite(parts.total.item())) throw Error("non-finite loss at step " + std::to_string(step));
    backward(parts.total, g);

    TrainStepRecord rec;
    rec.step = step;
    rec.ce_loss = parts.ce.item();
    rec.balance_loss_sum = parts.balance_sum;
    rec.grad_norm_pre_clip = clip_global_norm(params, cfg.optimizer.grad_clip_norm);
    rec.lr = lr_at(step, cfg.optimizer);
    for (const auto& b : parts.balance) {
      rec.f.push_back(b.f);
      rec.P.push_back(b.P);
    }
    adam_step(params, state, cfg.optimizer, rec.lr);

    if (trace && step % cfg.trace_every == 0) {
      const auto ce = cross_entropy_values(fwd.logits.value(), std::span<const Index>(targets));
      append_routing(nullptr, &*trace, fwd.gates, step, static_cast<std::int64_t>(step) * batch * seq, ce);
    }
    metrics.line(to_json(rec).dump());
    result.records.push_back(std::move(rec));
  }
  metrics.commit();
  if (trace) trace->commit();
  if (!outs.checkpoint_final.empty()) save_checkpoint(outs.checkpoint_final, cfg, result.weights, steps);
  return result;
}

EvalResult eval_loss(const ModelConfig& cfg, const ModelWeights<float>& w, std::span<const Index> corpus,
                     bool with_per_token, RoutingTrace* trace, int epoch) {
  const Index n = static_cast<Index>(corpus.size());
  if (n < 2) throw DataError("evaluation corpus needs at least two tokens");
  const Index seq = cfg.seq_len, batch = cfg.batch_size;
  if (trace && trace->header.experts == 0) trace->header = trace_header_for(cfg);

  EvalResult out;
  if (with_per_token) out.per_token.emplace();
  double total = 0;
  Index count = 0;
  // Windows [start, start + len] predict positions start+1 .. start+len.
  std::vector<Index> starts;
  for (Index s = 0; s + 1 < n; s += seq) starts.push_back(s);
  std::size_t i = 0;
  while (i < starts.size()) {
    const Index len = std::min(seq, n - 1 - starts[i]);
    std::size_t j = i;
    while (j < starts.size() && static_cast<Index>(j - i) < batch && std::min(seq, n - 1 - starts[j]) == len) ++j;
    const Index rows = static_cast<Index>(j - i);
    std::vector<Index> inputs, targets;
    for (std::size_t r = i; r < j; ++r) {
      for (Index t = 0; t < len; ++t) {
        inputs.push_back(corpus[static_cast<std::size_t>(starts[r] + t)]);
        targets.push_back(corpus[static_cast<std::size_t>(starts[r] + t + 1)]);
      }
    }
    Graph<float> g;
    const auto fwd = transformer_forward(g, cfg, w, inputs, rows, len);
    const auto ce = cross_entropy_values(fwd.logits.value(), std::span<const Index>(targets));
    for (std::size_t r = i; r < j; ++r) {
      for (Index t = 0; t < len; ++t) {
        const float v = ce[static_cast<std::size_t>(static_cast<Index>(r - i) * len + t)];
        total += v;
        ++count;
        if (with_per_token) {
          out.per_token->token.push_back(starts[r] + t);
          out.per_token->loss.push_back(v);
        }
      }
    }
    if (trace) {
      // Token ids are corpus positions, which rows of one batch cover contiguously.
      for (std::size_t l = 0; l < fwd.gates.size(); ++l) {
        const auto& go = fwd.gates[l];
        for (Index t = 0; t < go.tokens; ++t) {
          const Index pos = starts[i + static_cast<std::size_t>(t / len)] + t % len;
          for (Index r = 0; r < go.k; ++r) {
            trace->records.push_back({epoch, static_cast<int>(l), pos, static_cast<int>(r),
                                      static_cast<int>(go.index(t, r)), std::clamp(go.topk_weights(t, r), 0.0f, 1.0f),
                                      ce[static_cast<std::size_t>(t)]});
          }
        }
      }
    }
    i = j;
  }
  out.mean_ce = total / static_cast<double>(count);
  return out;
}

double mean_top1_ratio(std::span<const TrainStepRecord> records) {
  if (records.empty()) throw ArgumentError("no step records");
  double acc = 0;
  std::size_t n = 0;
  for (const auto& r : records) {
    for (const auto& f : r.f) {
      const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
      acc += *lo > 0 ? *hi / *lo : std::numeric_limits<double>::infinity();
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

}  // namespace modse
