#include "modse/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "modse/errors.hpp"
#include "modse/io.hpp"

namespace fs = std::filesystem;

namespace modse {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

std::int64_t parse_int(const std::string& s, const fs::path& path, std::size_t line) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ":" + std::to_string(line) + ": expected an integer, got '" + s + "'");
  }
}

double parse_real(const std::string& s, const fs::path& path, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ":" + std::to_string(line) + ": expected a number, got '" + s + "'");
  }
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::int64_t CountRow::max() const { return counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end()); }
std::int64_t CountRow::min() const { return counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end()); }
std::int64_t CountRow::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

double CountRow::ratio() const {
  const auto lo = min();
  if (lo == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(max()) / static_cast<double>(lo);
}

const CountRow& CountTable::at(int epoch, int layer, int rank) const {
  const auto it = rows.find({epoch, layer, rank});
  if (it == rows.end()) {
    throw ArgumentError("no counts for epoch " + std::to_string(epoch) + ", layer " + std::to_string(layer) +
                        ", rank " + std::to_string(rank));
  }
  return it->second;
}

CountTable count_routing(const RoutingTrace& trace) {
  trace.validate();
  CountTable table;
  table.experts = trace.header.experts;
  table.expert_sizes = trace.header.expert_sizes;
  for (const auto& r : trace.records) {
    auto& row = table.rows[{r.epoch, r.layer, r.rank}];
    if (row.counts.empty()) row.counts.assign(static_cast<std::size_t>(table.experts), 0);
    row.counts[static_cast<std::size_t>(r.expert)] += 1;
  }
  return table;
}

std::vector<int> size_descending_order(std::span<const int> sizes) {
  std::vector<int> order(sizes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sizes[a] > sizes[b]; });
  return order;
}

CountTable load_count_table_csv(const fs::path& path, int experts, std::span<const int> column_to_expert) {
  if (experts < 1) throw ArgumentError("expert count must be >= 1");
  if (!column_to_expert.empty() && static_cast<int>(column_to_expert.size()) != experts) {
    throw ArgumentError("column map must list one expert per column");
  }
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty count table");
  const auto header = split_csv_line(line);
  const bool has_epoch = !header.empty() && header[0] == "epoch";
  const std::size_t first = has_epoch ? 3 : 2;
  if (header.size() < first + static_cast<std::size_t>(experts)) {
    throw DataError(path.string() + ": header has fewer than " + std::to_string(experts) + " count columns");
  }

  CountTable table;
  table.experts = experts;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < first + static_cast<std::size_t>(experts)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": too few columns");
    }
    CountKey key;
    key.epoch = has_epoch ? static_cast<int>(parse_int(cells[0], path, lineno)) : 0;
    key.layer = static_cast<int>(parse_int(cells[first - 2], path, lineno));
    key.rank = static_cast<int>(parse_int(cells[first - 1], path, lineno));
    CountRow row;
    row.counts.assign(static_cast<std::size_t>(experts), 0);
    for (int c = 0; c < experts; ++c) {
      const auto v = parse_int(cells[first + static_cast<std::size_t>(c)], path, lineno);
      if (v < 0) throw DataError(path.string() + ":" + std::to_string(lineno) + ": negative count");
      const int e = column_to_expert.empty() ? c : column_to_expert[static_cast<std::size_t>(c)];
      row.counts[static_cast<std::size_t>(e)] = v;
    }
    if (!table.rows.emplace(key, std::move(row)).second) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate (epoch, layer, rank) row");
    }
  }
  return table;
}

std::string format_ratio(double ratio) {
  if (std::isinf(ratio)) return "inf";
  return fmt("%.2f", ratio);
}

std::string render_count_table_csv(const CountTable& table) {
  std::string out = "epoch,layer,rank";
  for (int e = 0; e < table.experts; ++e) {
    out += ',';
    out += table.expert_sizes.empty() ? "e" + std::to_string(e)
                                      : std::to_string(table.expert_sizes[static_cast<std::size_t>(e)]);
  }
  out += ",max,min,max/min\n";
  for (const auto& [key, row] : table.rows) {
    out += std::to_string(key.epoch) + ',' + std::to_string(key.layer) + ',' + std::to_string(key.rank);
    for (auto c : row.counts) out += ',' + std::to_string(c);
    out += ',' + std::to_string(row.max()) + ',' + std::to_string(row.min()) + ',' + format_ratio(row.ratio()) + '\n';
  }
  return out;
}

RoutingTrace synthesize_trace(const CountTable& table, const TraceHeader& header) {
  RoutingTrace trace;
  trace.header = header;
  if (header.experts != table.experts) throw ArgumentError("trace header and count table disagree on N");

  std::map<std::pair<int, int>, std::vector<const CountRow*>> groups;
  for (const auto& [key, row] : table.rows) {
    auto& ranks = groups[{key.epoch, key.layer}];
    if (key.rank != static_cast<int>(ranks.size())) {
      throw ArgumentError("count table ranks must be 0..k-1 for every (epoch, layer)");
    }
    ranks.push_back(&row);
  }

  const auto n = static_cast<std::size_t>(table.experts);
  for (const auto& [el, ranks] : groups) {
    const auto [epoch, layer] = el;
    const int k = static_cast<int>(ranks.size());
    if (k > header.top_k) throw ArgumentError("count table has more ranks than top_k");
    const std::int64_t tokens = ranks[0]->total();
    for (const auto* r : ranks) {
      if (r->total() != tokens) {
        throw ArgumentError("rank totals differ in epoch " + std::to_string(epoch) + ", layer " +
                            std::to_string(layer));
      }
    }
    for (std::size_t e = 0; e < n; ++e) {
      std::int64_t across = 0;
      for (const auto* r : ranks) across += r->counts[e];
      if (across > tokens) {
        throw ArgumentError("expert " + std::to_string(e) + " would repeat across ranks of one token in layer " +
                            std::to_string(layer));
      }
    }

    // choice[t][r]: greedily take the largest remaining count not yet used by
    // token t, swapping with an earlier token when only a used expert is left.
    std::vector<std::vector<std::int64_t>> remaining;
    for (const auto* r : ranks) remaining.push_back(r->counts);
    std::vector<std::vector<int>> choice(static_cast<std::size_t>(tokens), std::vector<int>(k, -1));
    auto uses = [&](std::int64_t t, int e) {
      const auto& c = choice[static_cast<std::size_t>(t)];
      return std::find(c.begin(), c.end(), e) != c.end();
    };
    for (std::int64_t t = 0; t < tokens; ++t) {
      for (int r = 0; r < k; ++r) {
        auto& rem = remaining[static_cast<std::size_t>(r)];
        int best = -1;
        for (std::size_t e = 0; e < n; ++e) {
          if (rem[e] > 0 && !uses(t, static_cast<int>(e)) && (best < 0 || rem[e] > rem[static_cast<std::size_t>(best)])) {
            best = static_cast<int>(e);
          }
        }
        if (best < 0) {
          int forced = -1;
          for (std::size_t e = 0; e < n; ++e) {
            if (rem[e] > 0) forced = static_cast<int>(e);
          }
          bool fixed = false;
          for (std::int64_t u = 0; u < t && !fixed; ++u) {
            const int x = choice[static_cast<std::size_t>(u)][static_cast<std::size_t>(r)];
            if (!uses(t, x) && !uses(u, forced)) {
              choice[static_cast<std::size_t>(u)][static_cast<std::size_t>(r)] = forced;
              --rem[static_cast<std::size_t>(forced)];
              ++rem[static_cast<std::size_t>(x)];
              fixed = true;
            }
          }
          if (!fixed) throw ArgumentError("counts cannot be realized with distinct experts per token");
          best = -1;
          for (std::size_t e = 0; e < n; ++e) {
            if (rem[e] > 0 && !uses(t, static_cast<int>(e))) best = static_cast<int>(e);
          }
        }
        choice[static_cast<std::size_t>(t)][static_cast<std::size_t>(r)] = best;
        --rem[static_cast<std::size_t>(best)];
      }
    }
    const float weight = 1.0f / static_cast<float>(k);
    for (std::int64_t t = 0; t < tokens; ++t) {
      for (int r = 0; r < k; ++r) {
        trace.records.push_back({epoch, layer, t, r, choice[static_cast<std::size_t>(t)][static_cast<std::size_t>(r)],
                                 weight, std::nullopt});
      }
    }
  }
  return trace;
}

std::vector<ThresholdRow> difficult_token_table(std::span<const double> baseline, std::span<const double> modse,
                                                std::span<const double> thresholds) {
  if (baseline.size() != modse.size()) {
    throw AlignmentError("loss arrays differ in length: " + std::to_string(baseline.size()) + " vs " +
                         std::to_string(modse.size()));
  }
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (!(thresholds[i] < thresholds[i - 1])) throw ArgumentError("thresholds must be strictly descending");
  }
  std::vector<ThresholdRow> rows;
  for (double t : thresholds) {
    ThresholdRow row;
    row.threshold = t;
    double acc = 0;
    for (std::size_t i = 0; i < baseline.size(); ++i) {
      if (baseline[i] > t) {
        ++row.count;
        acc += baseline[i] - modse[i];
      }
    }
    row.avg_reduction = row.count > 0 ? acc / static_cast<double>(row.count) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::string render_threshold_table_csv(std::span<const ThresholdRow> rows) {
  std::string out = "loss_threshold,avg_loss_reduction,tokens\n";
  for (const auto& r : rows) {
    out += fmt("%.4g", r.threshold) + ',' + fmt("%.2f", r.avg_reduction) + ',' + std::to_string(r.count) + '\n';
  }
  return out;
}

SizeClasses default_size_classes(const PairedExpertSpec& spec) {
  SizeClasses c;
  for (int s : spec.expert_sizes) {
    if (s > spec.h_base) c.large.insert(s);
    if (s < spec.h_base) c.small.insert(s);
  }
  return c;
}

DifficultTokenReport difficult_token_expert_distribution(const RoutingTrace& trace,
                                                         const std::unordered_set<std::int64_t>& difficult,
                                                         const PairedExpertSpec& spec, const SizeClasses& classes) {
  const std::set<int> known(spec.expert_sizes.begin(), spec.expert_sizes.end());
  for (const auto* set : {&classes.large, &classes.small}) {
    for (int s : *set) {
      if (!known.count(s)) throw ConfigError("size class lists " + std::to_string(s) + ", which no expert has");
    }
  }
  for (int s : classes.large) {
    if (classes.small.count(s)) throw ConfigError("size " + std::to_string(s) + " is both large and small");
  }
  if (trace.header.experts != spec.experts()) throw ConfigError("trace expert count differs from the spec");

  DifficultTokenReport rep;
  const auto n = static_cast<std::size_t>(spec.experts());
  rep.expert_sizes = spec.expert_sizes;
  rep.top1.assign(n, 0);
  rep.top12.assign(n, 0);
  rep.top1_by_layer.assign(static_cast<std::size_t>(trace.header.layers), std::vector<std::int64_t>(n, 0));
  rep.difficult_tokens = static_cast<std::int64_t>(difficult.size());
  for (const auto& r : trace.records) {
    if (!difficult.count(r.token)) continue;
    const auto e = static_cast<std::size_t>(r.expert);
    rep.top12[e] += 1;
    if (r.rank == 0) {
      rep.top1[e] += 1;
      rep.top1_by_layer[static_cast<std::size_t>(r.layer)][e] += 1;
    }
  }
  for (std::size_t e = 0; e < n; ++e) {
    const int s = spec.expert_sizes[e];
    auto& top1_sum = classes.large.count(s) ? rep.sum_large_top1 : classes.small.count(s) ? rep.sum_small_top1 : rep.middle_top1;
    auto& top12_sum =
        classes.large.count(s) ? rep.sum_large_top12 : classes.small.count(s) ? rep.sum_small_top12 : rep.middle_top12;
    top1_sum += rep.top1[e];
    top12_sum += rep.top12[e];
  }
  return rep;
}

std::string render_distribution_csv(const DifficultTokenReport& report) {
  std::string out = "expert,expert_size,tokens_top1_and_2,tokens_top1\n";
  for (int e : size_descending_order(report.expert_sizes)) {
    const auto i = static_cast<std::size_t>(e);
    out += std::to_string(e) + ',' + std::to_string(report.expert_sizes[i]) + ',' + std::to_string(report.top12[i]) +
           ',' + std::to_string(report.top1[i]) + '\n';
  }
  out += "sum(L),," + std::to_string(report.sum_large_top12) + ',' + std::to_string(report.sum_large_top1) + '\n';
  out += "sum(S),," + std::to_string(report.sum_small_top12) + ',' + std::to_string(report.sum_small_top1) + '\n';
  return out;
}

double TokenLosses::mean() const {
  if (loss.empty()) throw ArgumentError("mean of an empty loss list");
  return std::accumulate(loss.begin(), loss.end(), 0.0) / static_cast<double>(loss.size());
}

TokenLosses load_token_losses(const fs::path& path) {
  auto in = open_input(path);
  TokenLosses out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (lineno == 1 && !cells.empty() && cells[0] == "token_index") continue;
    if (cells.size() != 2) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected token_index,loss");
    out.token.push_back(parse_int(cells[0], path, lineno));
    out.loss.push_back(parse_real(cells[1], path, lineno));
  }
  return out;
}

std::string render_token_losses_csv(const TokenLosses& losses) {
  std::string out = "token_index,loss\n";
  for (std::size_t i = 0; i < losses.token.size(); ++i) {
    out += std::to_string(losses.token[i]) + ',' + fmt("%.9g", losses.loss[i]) + '\n';
  }
  return out;
}

AlignedLosses align_losses(const TokenLosses& baseline, const TokenLosses& modse) {
  if (baseline.token.size() != modse.token.size()) {
    throw AlignmentError("loss files cover " + std::to_string(baseline.token.size()) + " and " +
                         std::to_string(modse.token.size()) + " tokens");
  }
  std::map<std::int64_t, double> other;
  for (std::size_t i = 0; i < modse.token.size(); ++i) {
    if (!other.emplace(modse.token[i], modse.loss[i]).second) {
      throw AlignmentError("token " + std::to_string(modse.token[i]) + " listed twice");
    }
  }
  AlignedLosses out;
  for (std::size_t i = 0; i < baseline.token.size(); ++i) {
    const auto it = other.find(baseline.token[i]);
    if (it == other.end()) throw AlignmentError("token " + std::to_string(baseline.token[i]) + " missing from one file");
    out.token.push_back(baseline.token[i]);
    out.baseline.push_back(baseline.loss[i]);
    out.modse.push_back(it->second);
  }
  return out;
}

namespace {

std::vector<int> heatmap_columns(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes) {
  const std::size_t cols = grid.empty() ? sizes.size() : grid[0].size();
  for (const auto& row : grid) {
    if (row.size() != cols) throw ArgumentError("heatmap grid is not rectangular");
  }
  if (sizes.empty()) {
    std::vector<int> order(cols);
    std::iota(order.begin(), order.end(), 0);
    return order;
  }
  if (sizes.size() != cols) throw ArgumentError("heatmap needs one size per column");
  return size_descending_order(sizes);
}

}  // namespace

std::string render_heatmap_csv(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes) {
  const auto order = heatmap_columns(grid, sizes);
  std::string out;
  for (const auto& row : grid) {
    for (std::size_t c = 0; c < order.size(); ++c) {
      if (c) out += ',';
      out += std::to_string(row[static_cast<std::size_t>(order[c])]);
    }
    out += '\n';
  }
  return out;
}

std::string render_heatmap_svg(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes) {
  const auto order = heatmap_columns(grid, sizes);
  constexpr int cell = 48, left = 70, top = 30;
  const int width = left + cell * static_cast<int>(order.size()) + 10;
  const int height = top + cell * static_cast<int>(grid.size()) + 10;
  std::int64_t hi = 0;
  for (const auto& row : grid) {
    for (auto v : row) hi = std::max(hi, v);
  }
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t c = 0; c < order.size(); ++c) {
    const auto label = sizes.empty() ? "e" + std::to_string(order[c]) : std::to_string(sizes[static_cast<std::size_t>(order[c])]);
    svg << "<text x=\"" << left + cell * static_cast<int>(c) + cell / 2 << "\" y=\"" << top - 8
        << "\" text-anchor=\"middle\">" << label << "</text>\n";
  }
  for (std::size_t r = 0; r < grid.size(); ++r) {
    const int y = top + cell * static_cast<int>(r);
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">layer" << r
        << "</text>\n";
    for (std::size_t c = 0; c < order.size(); ++c) {
      const auto v = grid[r][static_cast<std::size_t>(order[c])];
      const double t = hi > 0 ? static_cast<double>(v) / static_cast<double>(hi) : 0.0;
      // white to dark red
      const int g = static_cast<int>(std::lround(255 * (1 - t)));
      const int red = static_cast<int>(std::lround(255 - 100 * t));
      svg << "<rect x=\"" << left + cell * static_cast<int>(c) << "\" y=\"" << y << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << red << ',' << g << ',' << g
          << ")\" stroke=\"#888\"/>\n";
      svg << "<text x=\"" << left + cell * static_cast<int>(c) + cell / 2 << "\" y=\"" << y + cell / 2 + 4
          << "\" text-anchor=\"middle\">" << v << "</text>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_heatmap(const std::vector<std::vector<std::int64_t>>& grid, std::span<const int> sizes,
                  const fs::path& prefix) {
  const auto csv = render_heatmap_csv(grid, sizes);
  const auto svg = render_heatmap_svg(grid, sizes);
  fs::path csv_path = prefix;
  csv_path += ".csv";
  fs::path svg_path = prefix;
  svg_path += ".svg";
  write_file_atomic(csv_path, csv);
  write_file_atomic(svg_path, svg);
}

}  // namespace modse
