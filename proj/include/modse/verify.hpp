#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace modse {

enum class GradcheckScale { Micro, Small };

struct SuiteResult {
  std::string name;
  double worst_rel_error = 0;
  double tolerance = 0;
  int checks = 0;

  bool passed() const { return worst_rel_error <= tolerance; }
};

/// 64-bit central-difference suites: tensor ops, gate, MoE layer, balance loss
/// and a micro end-to-end model. `fault` scales every analytic gradient by
/// (1 + fault) before comparison; nonzero values exist to prove the checker
/// can fail.
std::vector<SuiteResult> run_gradcheck_suites(GradcheckScale scale, std::uint64_t seed, double fault = 0.0);

}  // namespace modse
