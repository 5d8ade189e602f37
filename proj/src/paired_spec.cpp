#include "modse/paired_spec.hpp"

#include <cmath>
#include <sstream>

#include "modse/errors.hpp"
#include "modse/rng.hpp"

namespace modse {

namespace {

int to_width(double ratio, int d_model, std::size_t pair) {
  const double width = ratio * d_model;
  const double rounded = std::round(width);
  if (std::abs(width - rounded) > 1e-9 || rounded < 1) {
    std::ostringstream os;
    os << "pair " << pair << ": ratio " << ratio << " times d_model " << d_model
       << " is not a positive integer width";
    throw ConstraintError(os.str());
  }
  return static_cast<int>(rounded);
}

}  // namespace

bool PairedExpertSpec::homogeneous() const {
  for (int s : expert_sizes) {
    if (s != h_base) return false;
  }
  return true;
}

void PairedExpertSpec::validate() const {
  if (d_model < 1 || h_base < 1) throw ConstraintError("d_model and h_base must be positive");
  if (pairs.empty()) throw ConstraintError("expert spec needs at least one pair");
  if (expert_sizes.size() != 2 * pairs.size()) throw ConstraintError("expert_sizes must list two experts per pair");
  long long total = 0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    if (p.large + p.small != 2 * h_base) {
      throw ConstraintError("pair " + std::to_string(k) + " (" + std::to_string(p.large) + ", " +
                            std::to_string(p.small) + ") does not sum to 2*h_base = " + std::to_string(2 * h_base));
    }
    if (p.small < 1 || p.large < p.small) {
      throw ConstraintError("pair " + std::to_string(k) + " must satisfy large >= small >= 1");
    }
    if (expert_sizes[2 * k] != p.large || expert_sizes[2 * k + 1] != p.small) {
      throw ConstraintError("expert_sizes disagree with pair " + std::to_string(k));
    }
    total += p.large + p.small;
  }
  if (total != static_cast<long long>(experts()) * h_base) {
    throw ConstraintError("expert sizes do not sum to N*h_base");
  }
}

std::string PairedExpertSpec::hash() const {
  std::ostringstream os;
  os << d_model << ':' << h_base;
  for (int s : expert_sizes) os << ',' << s;
  std::ostringstream hex;
  hex << std::hex << fnv1a64(os.str());
  return hex.str();
}

PairedExpertSpec build_paired_spec(int d_model, int h_base, std::span<const SizeRatio> ratios) {
  if (d_model < 1 || h_base < 1) throw ConstraintError("d_model and h_base must be positive");
  if (ratios.empty()) throw ConstraintError("at least one ratio pair is required");
  const double target = 2.0 * h_base / d_model;
  PairedExpertSpec spec;
  spec.d_model = d_model;
  spec.h_base = h_base;
  for (std::size_t k = 0; k < ratios.size(); ++k) {
    const auto& r = ratios[k];
    if (std::abs(r.large + r.small - target) > 1e-9) {
      std::ostringstream os;
      os << "pair " << k << " (" << r.large << ", " << r.small << ") sums to " << r.large + r.small
         << ", expected 2*h_base/d_model = " << target;
      throw ConstraintError(os.str());
    }
    if (r.large < r.small) {
      std::ostringstream os;
      os << "pair " << k << " (" << r.large << ", " << r.small << ") must list the larger ratio first";
      throw ConstraintError(os.str());
    }
    ExpertPair p{to_width(r.large, d_model, k), to_width(r.small, d_model, k)};
    spec.pairs.push_back(p);
    spec.expert_sizes.push_back(p.large);
    spec.expert_sizes.push_back(p.small);
  }
  spec.validate();
  return spec;
}

PairedExpertSpec homogeneous_spec(int d_model, int h_base, int experts) {
  if (experts < 2 || experts % 2 != 0) {
    throw ConstraintError("homogeneous spec needs an even expert count >= 2, got " + std::to_string(experts));
  }
  PairedExpertSpec spec;
  spec.d_model = d_model;
  spec.h_base = h_base;
  for (int k = 0; k < experts / 2; ++k) {
    spec.pairs.push_back({h_base, h_base});
    spec.expert_sizes.push_back(h_base);
    spec.expert_sizes.push_back(h_base);
  }
  spec.validate();
  return spec;
}

PairedExpertSpec spec_from_sizes(int d_model, std::span<const int> sizes) {
  if (sizes.empty() || sizes.size() % 2 != 0) throw ConstraintError("expert sizes must come in pairs");
  long long total = 0;
  for (int s : sizes) total += s;
  if (total % static_cast<long long>(sizes.size()) != 0) throw ConstraintError("expert sizes have a fractional mean");
  PairedExpertSpec spec;
  spec.d_model = d_model;
  spec.h_base = static_cast<int>(total / static_cast<long long>(sizes.size()));
  spec.expert_sizes.assign(sizes.begin(), sizes.end());
  for (std::size_t k = 0; k < sizes.size(); k += 2) spec.pairs.push_back({sizes[k], sizes[k + 1]});
  spec.validate();
  return spec;
}

std::vector<SizeRatio> published_ratios() { return {{4.5, 0.5}, {4.0, 1.0}, {3.0, 2.0}, {2.5, 2.5}}; }

std::int64_t count_parameters(const PairedExpertSpec& spec) {
  std::int64_t total = 0;
  for (int s : spec.expert_sizes) total += expert_parameter_count(spec.d_model, s);
  return total;
}

}  // namespace modse
