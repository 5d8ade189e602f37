#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "modse/paired_spec.hpp"
#include "modse/trace.hpp"

namespace modse {

/// Logical devices the experts of every MoE layer are spread over.
struct DeviceModel {
  int device_count = 1;
  std::vector<std::string> labels;

  static DeviceModel uniform(int count);
};

enum class PlacementStrategy { pairwise, naive_contiguous, size_sorted };

// Order in which the baseline strategies walk each layer's experts.
enum class ExpertOrder { spec, size_descending };

std::string to_string(PlacementStrategy s);
PlacementStrategy parse_strategy(const std::string& s);

struct ExpertAssignment {
  int layer = 0;
  int expert = 0;
  int device = 0;
};

struct PlacementPlan {
  PlacementStrategy strategy = PlacementStrategy::pairwise;
  int device_count = 0;
  int layers = 0;
  int experts = 0;
  std::vector<ExpertAssignment> assignment;
  std::vector<std::int64_t> per_device_params;

  int device_of(int layer, int expert) const;
};

/// Expert-pair allocation: both members of a pair share a device and pairs
/// are dealt round-robin, so every device holds the same parameter count.
PlacementPlan plan_pairwise(const PairedExpertSpec& spec, int layers, const DeviceModel& devices);

/// Comparison strategies: contiguous slices of the expert list, or greedy
/// largest-first onto the currently lightest device.
PlacementPlan plan_baselines(const PairedExpertSpec& spec, int layers, const DeviceModel& devices,
                             PlacementStrategy strategy, ExpertOrder order = ExpertOrder::spec);

struct WorkloadReport {
  std::vector<std::int64_t> per_device_tokens;
  // Sum over routed events of the chosen expert's hidden size.
  std::vector<std::int64_t> per_device_flop_proxy;
  // max/min of the flop proxy; +inf when some device received nothing.
  double imbalance_ratio = 1.0;
};

WorkloadReport evaluate_workload(const PlacementPlan& plan, const RoutingTrace& trace, const PairedExpertSpec& spec);

/// Mean hidden size of the expert chosen, over all (token, selected expert) events.
double average_selected_hidden_size(const RoutingTrace& trace, const PairedExpertSpec& spec);

nlohmann::json to_json(const PlacementPlan& plan);

}  // namespace modse
