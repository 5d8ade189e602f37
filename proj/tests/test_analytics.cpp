#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <regex>
#include <set>

#include "modse/analytics.hpp"
#include "modse/errors.hpp"
#include "modse/io.hpp"

using namespace modse;
namespace fs = std::filesystem;

namespace {

PairedExpertSpec spec_300m() {
  const auto r = published_ratios();
  return build_paired_spec(1536, 3840, r);
}

TraceHeader header_300m(int layers) {
  const auto spec = spec_300m();
  return {spec.hash(), 8, layers, 2, spec.expert_sizes};
}

RoutingTrace difficult_trace() {
  const auto spec = spec_300m();
  const auto order = size_descending_order(spec.expert_sizes);
  const auto table = load_count_table_csv(MODSE_FIXTURE_DIR "/difficult_token_counts.csv", 8, order);
  return synthesize_trace(table, header_300m(8));
}

std::unordered_set<std::int64_t> all_tokens(const RoutingTrace& t) {
  std::unordered_set<std::int64_t> s;
  for (const auto& r : t.records) s.insert(r.token);
  return s;
}

// Table-5-like data: cumulative counts and mean reductions per threshold are
// matched by giving every token of a band the same reduction.
struct Table5Data {
  std::vector<double> baseline, modse;
};

Table5Data table5_like() {
  const std::vector<double> thresholds{2.0, 1.8, 1.6, 1.4, 1.2, 1.05};
  const std::vector<int> counts{180, 222, 337, 730, 1991, 3633};
  const std::vector<double> red{0.58, 0.46, 0.36, 0.32, 0.22, 0.18};
  Table5Data d;
  double prev_sum = 0;
  int prev_count = 0;
  for (std::size_t b = 0; b < thresholds.size(); ++b) {
    const double upper = b == 0 ? 3.0 : thresholds[b - 1];
    const int n = counts[b] - prev_count;
    const double band_sum = red[b] * counts[b] - prev_sum;
    for (int i = 0; i < n; ++i) {
      const double loss = thresholds[b] + (upper - thresholds[b]) * (i + 0.5) / n;
      d.baseline.push_back(loss);
      d.modse.push_back(loss - band_sum / n);
    }
    prev_sum = red[b] * counts[b];
    prev_count = counts[b];
  }
  for (int i = 0; i < 4000; ++i) {
    d.baseline.push_back(0.2 + 0.8 * i / 4000.0);
    d.modse.push_back(0.2 + 0.8 * i / 4000.0 - 0.01);
  }
  return d;
}

std::vector<ThresholdRow> filter_and_average(const std::vector<double>& base, const std::vector<double>& mod,
                                             const std::vector<double>& thresholds) {
  std::vector<ThresholdRow> out;
  for (double t : thresholds) {
    ThresholdRow r{t, 0, 0};
    double s = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (base[i] > t) {
        r.count++;
        s += base[i] - mod[i];
      }
    }
    r.avg_reduction = r.count ? s / r.count : 0;
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("epoch-7 layer-0 rank-0 ratio of the diverse-size counts") {
  const auto table = load_count_table_csv(MODSE_FIXTURE_DIR "/routing_counts_modse.csv", 8);
  const auto& row = table.at(7, 0, 0);
  CHECK(row.counts == std::vector<std::int64_t>{16658651, 15442565, 18865092, 21987256, 22649968, 29079684, 30773936,
                                                40200720});
  CHECK(row.max() == 40200720);
  CHECK(row.min() == 15442565);
  CHECK(std::abs(row.ratio() - 2.60) <= 0.005);
  CHECK(format_ratio(row.ratio()) == "2.60");
}

TEST_CASE("rendered ratios agree with the published columns") {
  for (const char* name : {"/routing_counts_baseline.csv", "/routing_counts_modse.csv"}) {
    const auto table = load_count_table_csv(std::string(MODSE_FIXTURE_DIR) + name, 8);
    CHECK(table.rows.size() == 96);
    // Published ratios carry two or three decimals; they must round-trip to ours.
    const auto text = read_file(std::string(MODSE_FIXTURE_DIR) + name);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
      const auto& row = table.at(std::stoi(cells[0]), std::stoi(cells[1]), std::stoi(cells[2]));
      CHECK(row.max() == std::stoll(cells[11]));
      CHECK(row.min() == std::stoll(cells[12]));
      CHECK(std::abs(row.ratio() - std::stod(cells[13])) <= 0.0051);
    }
  }
}

TEST_CASE("count_routing on tiny traces") {
  RoutingTrace single;
  single.header = header_300m(1);
  single.records.push_back({0, 0, 0, 0, 3, 1.0f, {}});
  const auto one = count_routing(single);
  CHECK(one.at(0, 0, 0).counts == std::vector<std::int64_t>{0, 0, 0, 1, 0, 0, 0, 0});
  CHECK(std::isinf(one.at(0, 0, 0).ratio()));
  CHECK(render_count_table_csv(one).find(",inf\n") != std::string::npos);

  RoutingTrace uniform;
  uniform.header = header_300m(2);
  std::int64_t token = 0;
  for (int l = 0; l < 2; ++l) {
    for (int rep = 0; rep < 5; ++rep) {
      for (int e = 0; e < 8; ++e) {
        uniform.records.push_back({1, l, token, 0, e, 0.6f, {}});
        uniform.records.push_back({1, l, token, 1, (e + 3) % 8, 0.4f, {}});
        ++token;
      }
    }
  }
  const auto table = count_routing(uniform);
  CHECK(table.rows.size() == 4);
  for (const auto& [key, row] : table.rows) {
    CHECK(row.ratio() == 1.0);
    CHECK(row.total() == 40);
  }
  const auto csv = render_count_table_csv(table);
  CHECK(csv.rfind("epoch,layer,rank,6912,768,6144,1536,4608,3072,3840,3840,max,min,max/min\n", 0) == 0);
  CHECK(csv.find("1,0,0,5,5,5,5,5,5,5,5,5,5,1.00\n") != std::string::npos);
}

TEST_CASE("difficult-token counts reproduce the per-size totals") {
  const auto spec = spec_300m();
  const auto trace = difficult_trace();
  CHECK_NOTHROW(trace.validate());
  const auto tokens = all_tokens(trace);
  CHECK(tokens.size() == 1504);

  const auto rep = difficult_token_expert_distribution(trace, tokens, spec, default_size_classes(spec));
  // Published column order is by descending width.
  const auto order = size_descending_order(spec.expert_sizes);
  std::vector<std::int64_t> top12, top1;
  for (int e : order) {
    top12.push_back(rep.top12[static_cast<std::size_t>(e)]);
    top1.push_back(rep.top1[static_cast<std::size_t>(e)]);
  }
  CHECK(top12 == std::vector<std::int64_t>{2649, 3729, 4095, 2332, 2933, 2877, 2972, 2477});
  CHECK(top1 == std::vector<std::int64_t>{1560, 2313, 2342, 1166, 1566, 1363, 873, 849});
  CHECK(rep.sum_large_top12 == 10473);
  CHECK(rep.sum_small_top12 == 8326);
  CHECK(rep.sum_large_top1 == 6215);
  CHECK(rep.sum_small_top1 == 3085);

  // Mass conservation.
  const std::int64_t top1_total = rep.sum_large_top1 + rep.sum_small_top1 + rep.middle_top1;
  CHECK(top1_total == rep.difficult_tokens * 8);
  CHECK(rep.sum_large_top12 + rep.sum_small_top12 + rep.middle_top12 == 2 * top1_total);

  const auto csv = render_distribution_csv(rep);
  CHECK(csv.find("sum(L),,10473,6215") != std::string::npos);
  CHECK(csv.find("sum(S),,8326,3085") != std::string::npos);
}

TEST_CASE("synthesized counts survive a trace round trip") {
  const auto spec = spec_300m();
  const auto order = size_descending_order(spec.expert_sizes);
  const auto fixture = load_count_table_csv(MODSE_FIXTURE_DIR "/difficult_token_counts.csv", 8, order);
  const auto recount = count_routing(difficult_trace());
  CHECK(recount.rows.size() == fixture.rows.size());
  for (const auto& [key, row] : fixture.rows) CHECK(recount.at(key.epoch, key.layer, key.rank).counts == row.counts);
}

TEST_CASE("heatmap rows sum to the per-layer top-0 totals") {
  const auto spec = spec_300m();
  const auto rep = difficult_token_expert_distribution(difficult_trace(), all_tokens(difficult_trace()), spec,
                                                       default_size_classes(spec));
  const auto csv = render_heatmap_csv(rep.top1_by_layer, spec.expert_sizes);
  std::istringstream in(csv);
  std::string line;
  int rows = 0;
  const auto fixture = read_file(MODSE_FIXTURE_DIR "/difficult_token_counts.csv");
  std::istringstream fx(fixture);
  std::getline(fx, line);
  std::vector<std::string> fixture_rank0;
  while (std::getline(fx, line)) {
    if (line.rfind(std::to_string(fixture_rank0.size()) + ",0,", 0) == 0) fixture_rank0.push_back(line.substr(4));
  }
  while (std::getline(in, line)) {
    std::int64_t sum = 0;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) sum += std::stoll(c);
    CHECK(sum == 1504);
    // Columns ordered by descending width reproduce the published rows.
    CHECK(line == fixture_rank0[static_cast<std::size_t>(rows)]);
    ++rows;
  }
  CHECK(rows == 8);
}

TEST_CASE("heatmap basics") {
  const std::vector<std::vector<std::int64_t>> eye{{1, 0}, {0, 1}};
  CHECK(render_heatmap_csv(eye, {}) == "1,0\n0,1\n");
  const std::vector<int> sizes{10, 30};
  CHECK(render_heatmap_csv(eye, sizes) == "0,1\n1,0\n");

  const std::vector<std::vector<std::int64_t>> flat{{4, 4, 4}, {4, 4, 4}};
  const auto svg = render_heatmap_svg(flat, {});
  std::set<std::string> fills;
  const std::regex fill("fill=\"(rgb\\([0-9,]+\\))\"");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), fill); it != std::sregex_iterator(); ++it) {
    fills.insert((*it)[1]);
  }
  CHECK(fills.size() == 1);
  CHECK(svg.rfind("<svg", 0) == 0);

  CHECK_THROWS_AS(render_heatmap_csv({{1, 2}, {3}}, {}), ArgumentError);

  const auto dir = fs::temp_directory_path() / "modse_test_heatmap";
  fs::create_directories(dir);
  emit_heatmap(eye, {}, dir / "fig");
  CHECK(read_file(dir / "fig.csv") == "1,0\n0,1\n");
  CHECK(fs::exists(dir / "fig.svg"));
  CHECK_THROWS_AS(emit_heatmap(eye, {}, dir / "missing" / "fig"), IoError);
}

TEST_CASE("difficult token table on table-5-like data") {
  const auto d = table5_like();
  const std::vector<double> thresholds{2.0, 1.8, 1.6, 1.4, 1.2, 1.05};
  const auto rows = difficult_token_table(d.baseline, d.modse, thresholds);
  const auto oracle = filter_and_average(d.baseline, d.modse, thresholds);
  const std::vector<std::int64_t> counts{180, 222, 337, 730, 1991, 3633};
  const std::vector<std::string> reductions{"0.58", "0.46", "0.36", "0.32", "0.22", "0.18"};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].count == oracle[i].count);
    CHECK(rows[i].avg_reduction == doctest::Approx(oracle[i].avg_reduction).epsilon(1e-12));
    CHECK(rows[i].count == counts[i]);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", rows[i].avg_reduction);
    CHECK(std::string(buf) == reductions[i]);
  }
  const auto csv = render_threshold_table_csv(rows);
  CHECK(csv.find("2,0.58,180\n") != std::string::npos);
}

TEST_CASE("difficult token table properties") {
  std::mt19937_64 rng(11);
  std::gamma_distribution<double> loss(2.0, 0.6);
  std::normal_distribution<double> delta(0.05, 0.2);
  const std::vector<double> thresholds{2.0, 1.8, 1.6, 1.4, 1.2, 1.05};
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> base, mod;
    for (int i = 0; i < 500; ++i) {
      base.push_back(loss(rng));
      mod.push_back(base.back() - delta(rng));
    }
    const auto rows = difficult_token_table(base, mod, thresholds);
    const auto oracle = filter_and_average(base, mod, thresholds);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].count == oracle[i].count);
      CHECK(rows[i].avg_reduction == doctest::Approx(oracle[i].avg_reduction).epsilon(1e-12));
      if (i) CHECK(rows[i].count >= rows[i - 1].count);
    }
    for (const auto& r : difficult_token_table(base, base, thresholds)) CHECK(r.avg_reduction == 0.0);
  }
  const std::vector<double> a{1, 2, 3}, b{1, 2};
  CHECK_THROWS_AS(difficult_token_table(a, b, thresholds), AlignmentError);
  const std::vector<double> ascending{1.0, 2.0};
  CHECK_THROWS_AS(difficult_token_table(a, a, ascending), ArgumentError);
}

TEST_CASE("size classes") {
  const auto spec = spec_300m();
  const auto c = default_size_classes(spec);
  CHECK(c.large == std::set<int>{6912, 6144, 4608});
  CHECK(c.small == std::set<int>{3072, 1536, 768});

  RoutingTrace empty;
  empty.header = header_300m(8);
  const auto rep = difficult_token_expert_distribution(empty, {}, spec, c);
  CHECK(rep.sum_large_top12 == 0);
  CHECK(rep.sum_small_top1 == 0);
  for (auto v : rep.top12) CHECK(v == 0);

  SizeClasses bad = c;
  bad.large.insert(5000);
  CHECK_THROWS_AS(difficult_token_expert_distribution(empty, {}, spec, bad), ConfigError);
}

TEST_CASE("loss files load and align") {
  const auto dir = fs::temp_directory_path() / "modse_test_losses";
  fs::create_directories(dir);
  write_file_atomic(dir / "a.csv", "token_index,loss\n0,1.5\n1,0.25\n2,3\n");
  write_file_atomic(dir / "b.csv", "token_index,loss\n2,2.5\n0,1.0\n1,0.5\n");
  write_file_atomic(dir / "c.csv", "token_index,loss\n0,1.5\n1,0.25\n5,3\n");
  write_file_atomic(dir / "bad.csv", "token_index,loss\n0,abc\n");
  const auto a = load_token_losses(dir / "a.csv");
  CHECK(a.mean() == doctest::Approx(4.75 / 3));
  const auto aligned = align_losses(a, load_token_losses(dir / "b.csv"));
  CHECK(aligned.modse == std::vector<double>{1.0, 0.5, 2.5});
  CHECK_THROWS_AS(align_losses(a, load_token_losses(dir / "c.csv")), AlignmentError);
  CHECK_THROWS_AS(load_token_losses(dir / "bad.csv"), DataError);
  CHECK(load_token_losses(dir / "a.csv").loss == a.loss);
  CHECK(render_token_losses_csv(a) == "token_index,loss\n0,1.5\n1,0.25\n2,3\n");
}
