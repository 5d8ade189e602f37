#include "modse/trace.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include "modse/errors.hpp"
#include "modse/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace modse {

namespace {

constexpr char kBinaryMagic[8] = {'M', 'O', 'D', 'S', 'E', 'T', 'R', 'B'};
constexpr std::uint32_t kBinaryVersion = 1;
constexpr std::size_t kRecordBytes = 32;

json header_json(const TraceHeader& h) {
  return json{{"type", "modse-trace"}, {"version", 1},      {"spec_hash", h.spec_hash},
              {"experts", h.experts},  {"layers", h.layers}, {"top_k", h.top_k},
              {"expert_sizes", h.expert_sizes}};
}

TraceHeader parse_header(const json& j) {
  if (!j.is_object() || j.value("type", "") != "modse-trace") {
    throw TraceFormatError("trace header missing or not a modse-trace header");
  }
  TraceHeader h;
  try {
    h.spec_hash = j.value("spec_hash", "");
    h.experts = j.at("experts").get<int>();
    h.layers = j.at("layers").get<int>();
    h.top_k = j.at("top_k").get<int>();
    h.expert_sizes = j.value("expert_sizes", std::vector<int>{});
  } catch (const json::exception& e) {
    throw TraceFormatError(std::string("trace header: ") + e.what());
  }
  if (h.experts < 1 || h.layers < 1 || h.top_k < 1 || h.top_k > h.experts) {
    throw TraceFormatError("trace header: inconsistent experts/layers/top_k");
  }
  if (!h.expert_sizes.empty() && static_cast<int>(h.expert_sizes.size()) != h.experts) {
    throw TraceFormatError("trace header: expert_sizes must list one size per expert");
  }
  return h;
}

void append_record_json(std::string& out, const RoutingRecord& r) {
  char buf[192];
  int n = std::snprintf(buf, sizeof buf, "{\"epoch\":%d,\"layer\":%d,\"token\":%lld,\"rank\":%d,\"expert\":%d,\"gate_weight\":%.9g",
                        r.epoch, r.layer, static_cast<long long>(r.token), r.rank, r.expert,
                        static_cast<double>(r.gate_weight));
  out.append(buf, static_cast<std::size_t>(n));
  if (r.ce_loss) {
    n = std::snprintf(buf, sizeof buf, ",\"ce_loss\":%.9g", static_cast<double>(*r.ce_loss));
    out.append(buf, static_cast<std::size_t>(n));
  }
  out.append("}\n");
}

void append_record_binary(std::string& out, const RoutingRecord& r) {
  le::put_u32(out, static_cast<std::uint32_t>(r.epoch));
  le::put_u32(out, static_cast<std::uint32_t>(r.layer));
  le::put_u64(out, static_cast<std::uint64_t>(r.token));
  le::put_u32(out, static_cast<std::uint32_t>(r.rank));
  le::put_u32(out, static_cast<std::uint32_t>(r.expert));
  le::put_f32(out, r.gate_weight);
  le::put_f32(out, r.ce_loss ? *r.ce_loss : std::numeric_limits<float>::quiet_NaN());
}

std::string binary_preamble(const TraceHeader& h) {
  std::string out(kBinaryMagic, sizeof kBinaryMagic);
  const std::string hj = header_json(h).dump();
  le::put_u32(out, kBinaryVersion);
  le::put_u32(out, static_cast<std::uint32_t>(hj.size()));
  out += hj;
  return out;
}

RoutingRecord parse_record_json(const std::string& line, std::size_t offset) {
  try {
    const json j = json::parse(line);
    RoutingRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.layer = j.at("layer").get<int>();
    r.token = j.at("token").get<std::int64_t>();
    r.rank = j.at("rank").get<int>();
    r.expert = j.at("expert").get<int>();
    r.gate_weight = static_cast<float>(j.at("gate_weight").get<double>());
    if (j.contains("ce_loss") && !j.at("ce_loss").is_null()) r.ce_loss = static_cast<float>(j.at("ce_loss").get<double>());
    return r;
  } catch (const json::exception& e) {
    throw TraceFormatError("trace record " + std::to_string(offset) + ": " + e.what());
  }
}

}  // namespace

void RoutingTrace::validate() const {
  const auto& h = header;
  if (h.experts < 1 || h.layers < 1 || h.top_k < 1) throw TraceFormatError("trace header is incomplete");
  std::map<std::tuple<int, int, std::int64_t>, std::uint64_t> seen;  // bitmask of chosen experts
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto fail = [i](const std::string& what) {
      throw TraceFormatError("trace record " + std::to_string(i) + ": " + what);
    };
    if (r.layer < 0 || r.layer >= h.layers) fail("layer " + std::to_string(r.layer) + " out of range");
    if (r.rank < 0 || r.rank >= h.top_k) fail("rank " + std::to_string(r.rank) + " must be < top_k");
    if (r.expert < 0 || r.expert >= h.experts) fail("expert " + std::to_string(r.expert) + " out of range");
    if (!(r.gate_weight >= 0.0f && r.gate_weight <= 1.0f)) fail("gate_weight outside [0, 1]");
    if (h.experts <= 64) {
      auto& mask = seen[{r.epoch, r.layer, r.token}];
      const std::uint64_t bit = std::uint64_t{1} << r.expert;
      if (mask & bit) fail("expert repeated across ranks of one token");
      mask |= bit;
    }
  }
}

TraceFormat trace_format_for(const fs::path& path) {
  return path.extension() == ".bin" ? TraceFormat::binary : TraceFormat::jsonl;
}

TraceWriter::TraceWriter(const fs::path& path, const TraceHeader& header)
    : TraceWriter(path, header, trace_format_for(path)) {}

TraceWriter::TraceWriter(const fs::path& path, const TraceHeader& header, TraceFormat format)
    : path_(path), tmp_(temp_path_for(path)), format_(format) {
  out_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open trace file " + tmp_.string());
  if (format_ == TraceFormat::binary) {
    const auto pre = binary_preamble(header);
    out_.write(pre.data(), static_cast<std::streamsize>(pre.size()));
  } else {
    out_ << header_json(header).dump() << '\n';
  }
}

TraceWriter::~TraceWriter() {
  if (!committed_) {
    out_.close();
    std::error_code ec;
    fs::remove(tmp_, ec);
  }
}

void TraceWriter::append(const RoutingRecord& r) {
  std::string buf;
  if (format_ == TraceFormat::binary) {
    append_record_binary(buf, r);
  } else {
    append_record_json(buf, r);
  }
  out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  ++count_;
}

void TraceWriter::commit() {
  out_.close();
  if (!out_) throw IoError("write failed for trace " + tmp_.string());
  std::error_code ec;
  fs::rename(tmp_, path_, ec);
  if (ec) throw IoError("cannot rename " + tmp_.string() + " to " + path_.string());
  committed_ = true;
}

void write_trace_jsonl(const RoutingTrace& trace, std::ostream& os) {
  os << header_json(trace.header).dump() << '\n';
  std::string buf;
  for (const auto& r : trace.records) {
    buf.clear();
    append_record_json(buf, r);
    os << buf;
  }
}

void write_trace_binary(const RoutingTrace& trace, std::ostream& os) {
  std::string buf = binary_preamble(trace.header);
  for (const auto& r : trace.records) append_record_binary(buf, r);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_trace(const RoutingTrace& trace, const fs::path& path) {
  TraceWriter w(path, trace.header);
  for (const auto& r : trace.records) w.append(r);
  w.commit();
}

RoutingTrace read_trace_jsonl(std::istream& is) {
  RoutingTrace trace;
  std::string line;
  if (!std::getline(is, line)) throw TraceFormatError("empty trace: missing header line");
  try {
    trace.header = parse_header(json::parse(line));
  } catch (const json::exception& e) {
    throw TraceFormatError(std::string("trace header: ") + e.what());
  }
  std::size_t offset = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    trace.records.push_back(parse_record_json(line, offset++));
  }
  return trace;
}

RoutingTrace read_trace_binary(std::istream& is) {
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kBinaryMagic, 8)) != 0) {
    throw TraceFormatError("binary trace: bad magic");
  }
  if (le::get_u32(p + 8) != kBinaryVersion) throw TraceFormatError("binary trace: unsupported version");
  const std::size_t hlen = le::get_u32(p + 12);
  if (bytes.size() < 16 + hlen) throw TraceFormatError("binary trace: truncated header");
  RoutingTrace trace;
  try {
    trace.header = parse_header(json::parse(bytes.substr(16, hlen)));
  } catch (const json::exception& e) {
    throw TraceFormatError(std::string("binary trace header: ") + e.what());
  }
  const std::size_t body = 16 + hlen;
  const std::size_t payload = bytes.size() - body;
  if (payload % kRecordBytes != 0) {
    throw TraceFormatError("binary trace: truncated record " + std::to_string(payload / kRecordBytes));
  }
  trace.records.reserve(payload / kRecordBytes);
  for (std::size_t off = body; off < bytes.size(); off += kRecordBytes) {
    const unsigned char* q = p + off;
    RoutingRecord r;
    r.epoch = static_cast<int>(le::get_u32(q));
    r.layer = static_cast<int>(le::get_u32(q + 4));
    r.token = static_cast<std::int64_t>(le::get_u64(q + 8));
    r.rank = static_cast<int>(le::get_u32(q + 16));
    r.expert = static_cast<int>(le::get_u32(q + 20));
    r.gate_weight = le::get_f32(q + 24);
    const float loss = le::get_f32(q + 28);
    if (!std::isnan(loss)) r.ce_loss = loss;
    trace.records.push_back(r);
  }
  return trace;
}

RoutingTrace read_trace(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open trace " + path.string());
  char magic[8] = {};
  in.read(magic, 8);
  const bool binary = in.gcount() == 8 && std::equal(magic, magic + 8, kBinaryMagic);
  in.clear();
  in.seekg(0);
  RoutingTrace trace = binary ? read_trace_binary(in) : read_trace_jsonl(in);
  trace.validate();
  return trace;
}

}  // namespace modse
