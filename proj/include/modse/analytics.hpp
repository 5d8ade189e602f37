#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "modse/paired_spec.hpp"
#include "modse/trace.hpp"

namespace modse {

struct CountKey {
  int epoch = 0;
  int layer = 0;
  int rank = 0;

  auto operator<=>(const CountKey&) const = default;
};

struct CountRow {
  std::vector<std::int64_t> counts;

  std::int64_t max() const;
  std::int64_t min() const;
  std::int64_t total() const;
  // max/min, or +inf when some expert received no tokens.
  double ratio() const;
};

/// Token counts per (epoch, layer, rank) and expert.
struct CountTable {
  int experts = 0;
  std::vector<int> expert_sizes;  // column labels, may be empty
  std::map<CountKey, CountRow> rows;

  const CountRow& at(int epoch, int layer, int rank) const;
};

CountTable count_routing(const RoutingTrace& trace);

/// Reads `epoch,layer,rank,c0..c{N-1}[,extra columns]` (or `layer,rank,...`
/// with epoch 0). Extra trailing columns are ignored. Column c is credited to
/// expert column_to_expert[c], or to expert c when the map is empty.
CountTable load_count_table_csv(const std::filesystem::path& path, int experts,
                                std::span<const int> column_to_expert = {});

/// Expert indices ordered by descending hidden size (stable), the column
/// order of the published count tables.
std::vector<int> size_descending_order(std::span<const int> sizes);

/// Count table: expert size header, one row per (epoch, layer, rank),
/// then max, min and max/min rounded to two decimals.
std::string render_count_table_csv(const CountTable& table);

std::string format_ratio(double ratio);

/// Builds a trace that realizes the given counts: for every (epoch, layer) the
/// rank rows must share one total T; tokens 0..T-1 each receive one expert per
/// rank with no expert repeated across ranks.
RoutingTrace synthesize_trace(const CountTable& table, const TraceHeader& header);

struct ThresholdRow {
  double threshold = 0;
  std::int64_t count = 0;
  double avg_reduction = 0;  // 0 when no token passes the threshold
};

/// For each threshold (descending): tokens whose baseline loss exceeds it, and
/// their mean loss reduction baseline - modse.
std::vector<ThresholdRow> difficult_token_table(std::span<const double> baseline, std::span<const double> modse,
                                                std::span<const double> thresholds);

std::string render_threshold_table_csv(std::span<const ThresholdRow> rows);

struct SizeClasses {
  std::set<int> large;
  std::set<int> small;
};

/// Experts wider than h_base are large, narrower ones small; width h_base is in neither.
SizeClasses default_size_classes(const PairedExpertSpec& spec);

struct DifficultTokenReport {
  std::vector<ThresholdRow> thresholds;
  std::vector<int> expert_sizes;
  std::vector<std::int64_t> top1;   // rank-0 events per expert
  std::vector<std::int64_t> top12;  // events of every rank per expert
  std::int64_t sum_large_top1 = 0;
  std::int64_t sum_small_top1 = 0;
  std::int64_t middle_top1 = 0;
  std::int64_t sum_large_top12 = 0;
  std::int64_t sum_small_top12 = 0;
  std::int64_t middle_top12 = 0;
  std::vector<std::vector<std::int64_t>> top1_by_layer;  // layers x experts
  std::int64_t difficult_tokens = 0;
};

DifficultTokenReport difficult_token_expert_distribution(const RoutingTrace& trace,
                                                         const std::unordered_set<std::int64_t>& difficult,
                                                         const PairedExpertSpec& spec, const SizeClasses& classes);

std::string render_distribution_csv(const DifficultTokenReport& report);

/// Per-token losses keyed by token index, as stored in `token_index,loss` CSV files.
struct TokenLosses {
  std::vector<std::int64_t> token;
  std::vector<double> loss;

  double mean() const;
};

TokenLosses load_token_losses(const std::filesystem::path& path);
std::string render_token_losses_csv(const TokenLosses& losses);

/// Matches two loss files token by token; throws AlignmentError unless both
/// cover exactly the same token indices.
struct AlignedLosses {
  std::vector<std::int64_t> token;
  std::vector<double> baseline;
  std::vector<double> modse;
};
AlignedLosses align_losses(const TokenLosses& baseline, const TokenLosses& modse);

/// Heatmap of a layer x expert grid with experts ordered by descending size
/// (stable). Writes `<prefix>.csv` and `<prefix>.svg`.
std::string render_heatmap_csv(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes);
std::string render_heatmap_svg(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes);
void emit_heatmap(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes,
                  const std::filesystem::path& prefix);

}  // namespace modse
