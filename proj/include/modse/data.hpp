#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "modse/tensor.hpp"

namespace modse {

/// Byte-level tokenizer: ids 0..255 are raw bytes, then BOS and EOS.
struct ByteTokenizer {
  static constexpr Index kBos = 256;
  static constexpr Index kEos = 257;
  static constexpr Index kVocab = 258;

  // BOS, the bytes of `line`, EOS.
  static std::vector<Index> encode_line(std::string_view line);
  static std::string decode(std::span<const Index> ids);
};

/// Seeded generator of nested arithmetic lines such as "(3*(4-1))=9".
/// Digits after "=" depend on the whole expression, so they are hard to
/// predict, while brackets and operators follow simple local rules.
class GrammarGenerator {
 public:
  explicit GrammarGenerator(std::uint64_t seed, int max_depth = 3);
  std::string next_line();

 private:
  std::string expr(int depth, long long& value);
  std::uint64_t state_;
  int max_depth_;
  std::uint64_t draw();
};

std::vector<std::string> grammar_lines(std::uint64_t seed, std::int64_t min_tokens);

/// Token stream of BOS/EOS-delimited lines, truncated to exactly n_tokens.
std::vector<Index> grammar_corpus(std::uint64_t seed, std::int64_t n_tokens);

std::vector<Index> encode_lines(const std::vector<std::string>& lines);
std::vector<Index> read_text_corpus(const std::filesystem::path& path);

}  // namespace modse
