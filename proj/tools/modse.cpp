#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <unistd.h>

#include "modse/analytics.hpp"
#include "modse/checkpoint.hpp"
#include "modse/config.hpp"
#include "modse/data.hpp"
#include "modse/errors.hpp"
#include "modse/io.hpp"
#include "modse/placement.hpp"
#include "modse/rng.hpp"
#include "modse/trainer.hpp"
#include "modse/verify.hpp"

#ifndef MODSE_VERSION
#define MODSE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace modse;

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2, kVerify = 3 };

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Outputs are written under a hidden staging directory next to their final
// place and moved into `out` only when the command succeeds.
class Staging {
 public:
  explicit Staging(fs::path out) : out_(std::move(out)) {
    fs::create_directories(out_);
    dir_ = out_ / (".partial-" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Staging() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;

  fs::path path(const std::string& name) {
    names_.insert(name);
    return dir_ / name;
  }
  void write(const std::string& name, std::string_view content) { write_file_atomic(path(name), content); }

  // Moves every staged file into place and returns name -> sha256.
  std::map<std::string, std::string> commit() {
    std::map<std::string, std::string> digests;
    for (const auto& name : names_) {
      if (!fs::exists(dir_ / name)) continue;
      digests[name] = sha256_file(dir_ / name);
      fs::rename(dir_ / name, out_ / name);
    }
    return digests;
  }

 private:
  fs::path out_, dir_;
  std::set<std::string> names_;
};

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nullptr;
  std::uint64_t seed = 0;
  std::string started_at = utc_now();

  void finish(const fs::path& out, const std::map<std::string, std::string>& digests) const {
    nlohmann::json j{{"command", command},
                     {"argv", argv},
                     {"config", config},
                     {"seed", seed},
                     {"version", MODSE_VERSION},
                     {"started_at", started_at},
                     {"finished_at", utc_now()},
                     {"outputs", digests}};
    write_file_atomic(out / "manifest.json", j.dump(2) + "\n");
  }
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("modse");
  logger->set_pattern("[%H:%M:%S] [%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("MODSE_LOG");
  const std::string level = env ? env : "info";
  if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else if (level == "warn") {
    spdlog::set_level(spdlog::level::warn);
  } else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("unknown MODSE_LOG value '{}', using info", level);
  }
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad threshold '" + item + "'");
    }
  }
  return out;
}

// ---- train ----

struct TrainArgs {
  std::string config, out, ratios, trace = "routing_trace.jsonl";
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> alpha;
};

int cmd_train(const TrainArgs& a, Manifest& m) {
  RunConfig cfg = load_run_config(a.config);
  if (a.seed) cfg.model.seed = *a.seed;
  if (!a.ratios.empty()) cfg.model.expert_ratios = parse_ratios(a.ratios);
  if (a.alpha) cfg.optimizer.alpha = *a.alpha;
  cfg.model.validate();
  cfg.optimizer.validate();
  const int steps = a.steps.value_or(cfg.optimizer.total_steps);
  if (steps < 0) throw ConfigError("--steps must be >= 0");
  m.config = to_json(cfg);
  m.seed = cfg.model.seed;

  const auto corpora = load_corpora(cfg);
  spdlog::info("training {} steps, spec {}, alpha {}", steps, ratios_string(cfg.model.expert_ratios),
               cfg.optimizer.alpha);

  Staging stage(a.out);
  TrainOutputs outs{stage.path("metrics.jsonl"), stage.path(a.trace), stage.path("ckpt_init.bin"),
                    stage.path("ckpt_final.bin")};
  const auto result = train(cfg, corpora.train, steps, outs);
  if (!result.records.empty()) {
    const auto& last = result.records.back();
    spdlog::info("step {} ce {:.4f} balance {:.5f}", last.step, last.ce_loss, last.balance_loss_sum);
  }

  RoutingTrace eval_trace;
  const auto ev = eval_loss(cfg.model, result.weights, corpora.eval, true, &eval_trace, steps);
  stage.write("eval_losses.csv", render_token_losses_csv(*ev.per_token));
  write_trace(eval_trace, stage.path("eval_trace.jsonl"));
  std::cout << "eval_ce " << ev.mean_ce << "\n";
  m.finish(a.out, stage.commit());
  return kOk;
}

// ---- plan ----

struct PlanArgs {
  std::string config, out, strategy = "pairwise", order = "spec";
  int devices = 1;
};

int cmd_plan(const PlanArgs& a, Manifest& m) {
  const RunConfig cfg = load_run_config(a.config);
  m.config = to_json(cfg);
  m.seed = cfg.model.seed;
  const auto spec = cfg.model.expert_spec();
  const auto strategy = parse_strategy(a.strategy);
  if (a.order != "spec" && a.order != "size_descending") throw ConfigError("--order must be spec or size_descending");
  DeviceModel devices;
  devices.device_count = a.devices;
  const auto plan = strategy == PlacementStrategy::pairwise
                        ? plan_pairwise(spec, cfg.model.n_layers, devices)
                        : plan_baselines(spec, cfg.model.n_layers, devices, strategy,
                                         a.order == "spec" ? ExpertOrder::spec : ExpertOrder::size_descending);
  for (std::size_t d = 0; d < plan.per_device_params.size(); ++d) {
    std::cout << "device " << d << " params " << plan.per_device_params[d] << "\n";
  }
  if (!a.out.empty()) {
    Staging stage(a.out);
    stage.write("plan.json", to_json(plan).dump(2) + "\n");
    m.finish(a.out, stage.commit());
  }
  return kOk;
}

// ---- analyze ----

struct AnalyzeArgs {
  std::string trace, counts, config, columns = "size_descending", base_losses, modse_losses, out, thresholds;
  std::optional<double> threshold;  // default: mean baseline loss
};

int cmd_analyze(const AnalyzeArgs& a, Manifest& m) {
  if (a.trace.empty() == a.counts.empty()) throw ConfigError("give exactly one of --trace or --counts");
  if (a.base_losses.empty() != a.modse_losses.empty()) {
    throw ConfigError("--losses-baseline and --losses-modse go together");
  }
  RoutingTrace trace;
  if (!a.trace.empty()) {
    trace = read_trace(a.trace);
  } else {
    if (a.config.empty()) throw ConfigError("--counts needs --config for the expert sizes");
    const RunConfig cfg = load_run_config(a.config);
    const auto spec = cfg.model.expert_spec();
    std::vector<int> order;
    if (a.columns == "size_descending") {
      order = size_descending_order(spec.expert_sizes);
    } else if (a.columns != "spec") {
      throw ConfigError("--columns must be spec or size_descending");
    }
    const auto table = load_count_table_csv(a.counts, spec.experts(), order);
    trace = synthesize_trace(table, trace_header_for(cfg.model));
    m.config = to_json(cfg);
  }
  if (trace.records.empty()) throw ConfigError("empty trace");
  const auto& sizes = trace.header.expert_sizes;
  // The trace carries hidden sizes only; d_model does not enter any analysis.
  const auto spec = spec_from_sizes(1, sizes);

  std::map<std::string, std::string> files;
  const auto table = count_routing(trace);
  files["counts.csv"] = render_count_table_csv(table);
  for (const auto& [key, row] : table.rows) {
    std::cout << "epoch " << key.epoch << " layer " << key.layer << " rank " << key.rank << " max/min "
              << format_ratio(row.ratio()) << "\n";
  }

  std::unordered_set<std::int64_t> difficult;
  if (!a.base_losses.empty()) {
    const auto aligned = align_losses(load_token_losses(a.base_losses), load_token_losses(a.modse_losses));
    double mean = 0;
    for (double v : aligned.baseline) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(aligned.baseline.size(), 1));
    std::vector<double> thresholds;
    if (a.thresholds.empty()) {
      std::set<double, std::greater<>> t{2.0, 1.8, 1.6, 1.4, 1.2, mean};
      thresholds.assign(t.begin(), t.end());
    } else {
      thresholds = parse_thresholds(a.thresholds);
    }
    files["thresholds.csv"] = render_threshold_table_csv(difficult_token_table(aligned.baseline, aligned.modse, thresholds));
    const double cut = a.threshold.value_or(mean);
    for (std::size_t i = 0; i < aligned.token.size(); ++i) {
      if (aligned.baseline[i] > cut) difficult.insert(aligned.token[i]);
    }
    spdlog::info("{} of {} tokens exceed baseline loss {}", difficult.size(), aligned.token.size(), cut);
  } else {
    for (const auto& r : trace.records) difficult.insert(r.token);
  }
  const auto report = difficult_token_expert_distribution(trace, difficult, spec, default_size_classes(spec));
  files["distribution.csv"] = render_distribution_csv(report);
  files["heatmap_top1.csv"] = render_heatmap_csv(report.top1_by_layer, sizes);
  files["heatmap_top1.svg"] = render_heatmap_svg(report.top1_by_layer, sizes);
  std::cout << "sum(L) top1+2 " << report.sum_large_top12 << " top1 " << report.sum_large_top1 << "\n"
            << "sum(S) top1+2 " << report.sum_small_top12 << " top1 " << report.sum_small_top1 << "\n";

  Staging stage(a.out);
  for (const auto& [name, content] : files) stage.write(name, content);
  m.finish(a.out, stage.commit());
  return kOk;
}

// ---- gradcheck ----

int cmd_gradcheck(const std::string& scale, std::uint64_t seed, double fault) {
  GradcheckScale s;
  if (scale == "micro") {
    s = GradcheckScale::Micro;
  } else if (scale == "small") {
    s = GradcheckScale::Small;
  } else {
    throw ConfigError("--scale must be micro or small");
  }
  bool ok = true;
  for (const auto& r : run_gradcheck_suites(s, seed, fault)) {
    std::cout << r.name << " worst_rel_error " << r.worst_rel_error << " tolerance " << r.tolerance << " checks "
              << r.checks << (r.passed() ? " ok" : " FAIL") << "\n";
    ok = ok && r.passed();
  }
  return ok ? kOk : kVerify;
}

// ---- gen-data ----

int cmd_gen_data(std::uint64_t seed, std::int64_t tokens, const std::string& out, Manifest& m) {
  m.seed = seed;
  if (tokens < 1) throw ConfigError("--tokens must be positive");
  std::string text;
  for (const auto& line : grammar_lines(SeedStreams(seed).derive("data"), tokens)) text += line + "\n";
  Staging stage(out);
  stage.write("corpus.txt", text);
  m.finish(out, stage.commit());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Diverse-size mixture-of-experts toolkit"};
  app.require_subcommand(1);
  Manifest manifest;
  manifest.argv.assign(argv, argv + argc);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train the toy model and write metrics, traces and checkpoints");
  train_cmd->add_option("--config", ta.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", ta.seed, "Override the config seed");
  train_cmd->add_option("--steps", ta.steps, "Steps to run (default: optimizer.total_steps)");
  train_cmd->add_option("--out", ta.out, "Run directory")->required();
  train_cmd->add_option("--ratios", ta.ratios, "'homogeneous' or large:small pairs, e.g. 4.5:0.5,4:1,3:2,2.5:2.5");
  train_cmd->add_option("--alpha", ta.alpha, "Balance-loss weight");
  train_cmd->add_option("--trace", ta.trace, "Training trace file name inside --out (.bin for binary)");

  PlanArgs pa;
  auto* plan_cmd = app.add_subcommand("plan", "Place experts on devices and print per-device parameters");
  plan_cmd->add_option("--config", pa.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  plan_cmd->add_option("--devices", pa.devices, "Device count")->required();
  plan_cmd->add_option("--strategy", pa.strategy, "pairwise, naive_contiguous or size_sorted");
  plan_cmd->add_option("--order", pa.order, "Expert order for naive_contiguous: spec or size_descending");
  plan_cmd->add_option("--out", pa.out, "Directory for plan.json");

  AnalyzeArgs aa;
  auto* analyze_cmd = app.add_subcommand("analyze", "Routing and difficult-token tables from a trace");
  analyze_cmd->add_option("--trace", aa.trace, "Routing trace (JSONL or binary)");
  analyze_cmd->add_option("--counts", aa.counts, "Count table CSV to expand into a trace instead of --trace");
  analyze_cmd->add_option("--config", aa.config, "Run config giving expert sizes for --counts");
  analyze_cmd->add_option("--columns", aa.columns, "Column order of --counts: size_descending or spec");
  analyze_cmd->add_option("--losses-baseline", aa.base_losses, "Per-token losses of the baseline");
  analyze_cmd->add_option("--losses-modse", aa.modse_losses, "Per-token losses of the diverse-size model");
  analyze_cmd->add_option("--threshold", aa.threshold, "Baseline loss above which a token counts as difficult (default: baseline mean)");
  analyze_cmd->add_option("--thresholds", aa.thresholds, "Comma-separated descending thresholds for the table");
  analyze_cmd->add_option("--out", aa.out, "Output directory")->required();

  std::string scale = "micro";
  std::uint64_t gc_seed = 0;
  double fault = 0;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  gradcheck_cmd->add_option("--scale", scale, "micro or small");
  gradcheck_cmd->add_option("--seed", gc_seed, "Seed of the random inputs");
  gradcheck_cmd->add_option("--inject-fault", fault)->group("");

  std::uint64_t gd_seed = 0;
  std::int64_t gd_tokens = 200000;
  std::string gd_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic grammar corpus");
  gen_cmd->add_option("--seed", gd_seed, "Corpus seed");
  gen_cmd->add_option("--tokens", gd_tokens, "Minimum token count");
  gen_cmd->add_option("--out", gd_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (train_cmd->parsed()) {
      manifest.command = "train";
      return cmd_train(ta, manifest);
    }
    if (plan_cmd->parsed()) {
      manifest.command = "plan";
      return cmd_plan(pa, manifest);
    }
    if (analyze_cmd->parsed()) {
      manifest.command = "analyze";
      return cmd_analyze(aa, manifest);
    }
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(scale, gc_seed, fault);
    manifest.command = "gen-data";
    return cmd_gen_data(gd_seed, gd_tokens, gd_out, manifest);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const ArgumentError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const ConstraintError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const PlanningError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const AlignmentError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const TraceFormatError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntime;
  }
}
