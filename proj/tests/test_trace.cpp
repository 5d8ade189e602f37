#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "modse/analytics.hpp"
#include "modse/errors.hpp"
#include "modse/io.hpp"
#include "modse/trace.hpp"

using namespace modse;
namespace fs = std::filesystem;

namespace {

RoutingTrace random_trace(std::uint64_t seed, int tokens) {
  std::mt19937_64 rng(seed);
  RoutingTrace t;
  t.header = {"abc123", 8, 2, 2, {288, 32, 256, 64, 192, 128, 160, 160}};
  std::uniform_real_distribution<float> w(0.0f, 1.0f);
  for (int epoch = 0; epoch < 2; ++epoch) {
    for (int layer = 0; layer < 2; ++layer) {
      for (int tok = 0; tok < tokens; ++tok) {
        const int a = static_cast<int>(rng() % 8);
        const int b = (a + 1 + static_cast<int>(rng() % 7)) % 8;
        const float g = w(rng);
        std::optional<float> loss;
        if (tok % 3 != 0) loss = w(rng) * 5;
        t.records.push_back({epoch, layer, tok, 0, a, std::max(g, 1 - g), loss});
        t.records.push_back({epoch, layer, tok, 1, b, std::min(g, 1 - g), loss});
      }
    }
  }
  return t;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "modse_test_trace";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("jsonl and binary round trips agree bitwise") {
  const auto trace = random_trace(5, 50);
  std::stringstream js, bs;
  write_trace_jsonl(trace, js);
  write_trace_binary(trace, bs);
  const auto from_json = read_trace_jsonl(js);
  const auto from_bin = read_trace_binary(bs);
  CHECK(from_json.records == trace.records);
  CHECK(from_bin.records == trace.records);
  CHECK(from_bin.header.expert_sizes == trace.header.expert_sizes);
  CHECK(from_json.header.spec_hash == "abc123");

  const auto a = count_routing(from_json), b = count_routing(from_bin);
  CHECK(render_count_table_csv(a) == render_count_table_csv(b));
}

TEST_CASE("files written through the writer are detected by content") {
  const auto trace = random_trace(6, 20);
  for (const char* name : {"t.jsonl", "t.bin"}) {
    const auto path = scratch(name);
    write_trace(trace, path);
    CHECK_FALSE(fs::exists(temp_path_for(path)));
    CHECK(read_trace(path).records == trace.records);
  }
}

TEST_CASE("uncommitted writer leaves nothing behind") {
  const auto path = scratch("abandoned.jsonl");
  fs::remove(path);
  {
    TraceWriter w(path, random_trace(1, 1).header);
    w.append({0, 0, 0, 0, 1, 0.5f, {}});
  }
  CHECK_FALSE(fs::exists(path));
  CHECK_FALSE(fs::exists(temp_path_for(path)));
}

TEST_CASE("malformed records report their offset") {
  const auto trace = random_trace(7, 3);
  std::stringstream js;
  write_trace_jsonl(trace, js);
  std::string text = js.str();
  text += "{\"epoch\":0,\"layer\":0}\n";
  std::istringstream in(text);
  try {
    read_trace_jsonl(in);
    FAIL("expected a format error");
  } catch (const TraceFormatError& e) {
    CHECK(std::string(e.what()).find("record " + std::to_string(trace.records.size())) != std::string::npos);
  }

  auto bad = trace;
  bad.records[4].expert = 8;
  try {
    bad.validate();
    FAIL("expected a format error");
  } catch (const TraceFormatError& e) {
    CHECK(std::string(e.what()).find("record 4") != std::string::npos);
  }

  bad = trace;
  bad.records[3].expert = bad.records[2].expert;  // same token, both ranks
  CHECK_THROWS_AS(bad.validate(), TraceFormatError);

  bad = trace;
  bad.records[0].rank = 2;
  CHECK_THROWS_AS(bad.validate(), TraceFormatError);

  bad = trace;
  bad.records[0].gate_weight = 1.5f;
  CHECK_THROWS_AS(bad.validate(), TraceFormatError);
}

TEST_CASE("binary reader rejects truncation and foreign files") {
  const auto trace = random_trace(8, 4);
  std::stringstream bs;
  write_trace_binary(trace, bs);
  std::string bytes = bs.str();
  std::istringstream cut(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_trace_binary(cut), TraceFormatError);
  std::istringstream junk("not a trace at all");
  CHECK_THROWS_AS(read_trace_binary(junk), TraceFormatError);
  std::istringstream empty("");
  CHECK_THROWS_AS(read_trace_jsonl(empty), TraceFormatError);
}

TEST_CASE("atomic file writes and digests") {
  const auto path = scratch("blob.txt");
  write_file_atomic(path, "abc");
  CHECK(read_file(path) == "abc");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_file(path) == sha256_hex("abc"));
  CHECK_THROWS_AS(read_file(scratch("missing.txt")), IoError);
}
