#include "modse/data.hpp"

#include <fstream>

#include "modse/errors.hpp"
#include "modse/rng.hpp"

namespace modse {

std::vector<Index> ByteTokenizer::encode_line(std::string_view line) {
  std::vector<Index> out;
  out.reserve(line.size() + 2);
  out.push_back(kBos);
  for (unsigned char c : line) out.push_back(static_cast<Index>(c));
  out.push_back(kEos);
  return out;
}

std::string ByteTokenizer::decode(std::span<const Index> ids) {
  std::string out;
  for (Index id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

GrammarGenerator::GrammarGenerator(std::uint64_t seed, int max_depth) : state_(seed), max_depth_(max_depth) {}

std::uint64_t GrammarGenerator::draw() {
  state_ += 0x9e3779b97f4a7c15ULL;
  return splitmix64(state_);
}

std::string GrammarGenerator::expr(int depth, long long& value) {
  if (depth == 0 || draw() % 100 < 35) {
    value = static_cast<long long>(draw() % 10);
    return std::to_string(value);
  }
  long long a = 0, b = 0;
  const std::string left = expr(depth - 1, a);
  const std::string right = expr(depth - 1, b);
  static constexpr char ops[] = {'+', '-', '*'};
  const char op = ops[draw() % 3];
  value = op == '+' ? a + b : op == '-' ? a - b : a * b;
  // Keep results short so lines stay a few dozen bytes.
  value %= 1000;
  return "(" + left + op + right + ")";
}

std::string GrammarGenerator::next_line() {
  long long value = 0;
  const std::string e = expr(max_depth_, value);
  return e + "=" + std::to_string(value);
}

std::vector<std::string> grammar_lines(std::uint64_t seed, std::int64_t min_tokens) {
  GrammarGenerator gen(seed);
  std::vector<std::string> lines;
  std::int64_t tokens = 0;
  while (tokens < min_tokens) {
    lines.push_back(gen.next_line());
    tokens += static_cast<std::int64_t>(lines.back().size()) + 2;
  }
  return lines;
}

std::vector<Index> encode_lines(const std::vector<std::string>& lines) {
  std::vector<Index> out;
  for (const auto& l : lines) {
    const auto ids = ByteTokenizer::encode_line(l);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::vector<Index> grammar_corpus(std::uint64_t seed, std::int64_t n_tokens) {
  auto out = encode_lines(grammar_lines(seed, n_tokens));
  out.resize(static_cast<std::size_t>(n_tokens));
  return out;
}

std::vector<Index> read_text_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return encode_lines(lines);
}

}  // namespace modse
