#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace modse {

struct TraceHeader {
  std::string spec_hash;
  int experts = 0;
  int layers = 0;
  int top_k = 0;
  std::vector<int> expert_sizes;
};

/// One routing decision: token `token` chose `expert` as its rank-th choice in `layer`.
struct RoutingRecord {
  int epoch = 0;
  int layer = 0;
  std::int64_t token = 0;
  int rank = 0;
  int expert = 0;
  float gate_weight = 0;
  std::optional<float> ce_loss;

  bool operator==(const RoutingRecord&) const = default;
};

struct RoutingTrace {
  TraceHeader header;
  std::vector<RoutingRecord> records;

  bool empty() const { return records.empty(); }
  // Throws TraceFormatError naming the first offending record.
  void validate() const;
};

enum class TraceFormat { jsonl, binary };

// .bin selects the binary layout, anything else JSONL.
TraceFormat trace_format_for(const std::filesystem::path& path);

/// Append-only trace writer. Output goes to `<path>.tmp` and is renamed onto
/// `path` by commit(); a writer destroyed without commit removes its temp file.
class TraceWriter {
 public:
  TraceWriter(const std::filesystem::path& path, const TraceHeader& header);
  TraceWriter(const std::filesystem::path& path, const TraceHeader& header, TraceFormat format);
  ~TraceWriter();
  TraceWriter(const TraceWriter&) = delete;
  TraceWriter& operator=(const TraceWriter&) = delete;

  void append(const RoutingRecord& r);
  void commit();
  std::int64_t count() const { return count_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  TraceFormat format_;
  std::ofstream out_;
  std::int64_t count_ = 0;
  bool committed_ = false;
};

void write_trace_jsonl(const RoutingTrace& trace, std::ostream& os);
void write_trace_binary(const RoutingTrace& trace, std::ostream& os);
void write_trace(const RoutingTrace& trace, const std::filesystem::path& path);

RoutingTrace read_trace_jsonl(std::istream& is);
RoutingTrace read_trace_binary(std::istream& is);
// Detects the layout from the file's leading bytes and validates the result.
RoutingTrace read_trace(const std::filesystem::path& path);

}  // namespace modse
