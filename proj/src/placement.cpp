#include "modse/placement.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "modse/errors.hpp"

namespace modse {

namespace {

void require_devices(const DeviceModel& devices) {
  if (devices.device_count < 1) throw PlanningError("device count must be >= 1");
}

PlacementPlan empty_plan(PlacementStrategy s, const PairedExpertSpec& spec, int layers, const DeviceModel& devices) {
  if (layers < 1) throw PlanningError("layer count must be >= 1");
  spec.validate();
  PlacementPlan plan;
  plan.strategy = s;
  plan.device_count = devices.device_count;
  plan.layers = layers;
  plan.experts = spec.experts();
  plan.per_device_params.assign(static_cast<std::size_t>(devices.device_count), 0);
  return plan;
}

void place(PlacementPlan& plan, const PairedExpertSpec& spec, int layer, int expert, int device) {
  plan.assignment.push_back({layer, expert, device});
  plan.per_device_params[static_cast<std::size_t>(device)] +=
      expert_parameter_count(spec.d_model, spec.expert_sizes[static_cast<std::size_t>(expert)]);
}

void sort_layer_major(PlacementPlan& plan) {
  std::sort(plan.assignment.begin(), plan.assignment.end(), [](const auto& a, const auto& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.expert < b.expert;
  });
}

}  // namespace

DeviceModel DeviceModel::uniform(int count) {
  DeviceModel d;
  d.device_count = count;
  for (int i = 0; i < count; ++i) d.labels.push_back("device" + std::to_string(i));
  return d;
}

std::string to_string(PlacementStrategy s) {
  switch (s) {
    case PlacementStrategy::pairwise:
      return "pairwise";
    case PlacementStrategy::naive_contiguous:
      return "naive_contiguous";
    case PlacementStrategy::size_sorted:
      return "size_sorted";
  }
  return "unknown";
}

PlacementStrategy parse_strategy(const std::string& s) {
  if (s == "pairwise") return PlacementStrategy::pairwise;
  if (s == "naive_contiguous") return PlacementStrategy::naive_contiguous;
  if (s == "size_sorted") return PlacementStrategy::size_sorted;
  throw ConfigError("unknown placement strategy '" + s + "' (pairwise, naive_contiguous, size_sorted)");
}

int PlacementPlan::device_of(int layer, int expert) const {
  if (layer < 0 || layer >= layers || expert < 0 || expert >= experts) return -1;
  // Every plan stores one assignment per (layer, expert), layer-major.
  return assignment[static_cast<std::size_t>(layer * experts + expert)].device;
}

PlacementPlan plan_pairwise(const PairedExpertSpec& spec, int layers, const DeviceModel& devices) {
  require_devices(devices);
  auto plan = empty_plan(PlacementStrategy::pairwise, spec, layers, devices);
  const int pairs = static_cast<int>(spec.pairs.size());
  const long long total_pairs = static_cast<long long>(pairs) * layers;
  if (total_pairs % devices.device_count != 0) {
    throw PlanningError("pairwise placement requires (N/2)*layers = " + std::to_string(total_pairs) +
                        " to be divisible by the device count " + std::to_string(devices.device_count));
  }
  for (int l = 0; l < layers; ++l) {
    for (int p = 0; p < pairs; ++p) {
      const int device = static_cast<int>((static_cast<long long>(l) * pairs + p) % devices.device_count);
      place(plan, spec, l, 2 * p, device);
      place(plan, spec, l, 2 * p + 1, device);
    }
  }
  return plan;
}

PlacementPlan plan_baselines(const PairedExpertSpec& spec, int layers, const DeviceModel& devices,
                             PlacementStrategy strategy, ExpertOrder order) {
  require_devices(devices);
  if (strategy == PlacementStrategy::pairwise) return plan_pairwise(spec, layers, devices);
  auto plan = empty_plan(strategy, spec, layers, devices);
  const int n = spec.experts();
  const long long total = static_cast<long long>(n) * layers;
  if (total % devices.device_count != 0) {
    throw PlanningError("placement requires N*layers = " + std::to_string(total) +
                        " to be divisible by the device count " + std::to_string(devices.device_count));
  }
  std::vector<int> within(static_cast<std::size_t>(n));
  std::iota(within.begin(), within.end(), 0);
  if (order == ExpertOrder::size_descending || strategy == PlacementStrategy::size_sorted) {
    std::stable_sort(within.begin(), within.end(), [&spec](int a, int b) {
      return spec.expert_sizes[static_cast<std::size_t>(a)] > spec.expert_sizes[static_cast<std::size_t>(b)];
    });
  }

  if (strategy == PlacementStrategy::naive_contiguous) {
    const long long per_device = total / devices.device_count;
    long long slot = 0;
    for (int l = 0; l < layers; ++l) {
      for (int e : within) place(plan, spec, l, e, static_cast<int>(slot++ / per_device));
    }
    sort_layer_major(plan);
    return plan;
  }

  // size_sorted: global largest-first, each onto the lightest device (lowest id on ties).
  std::vector<std::pair<int, int>> items;  // (layer, expert)
  for (int l = 0; l < layers; ++l) {
    for (int e : within) items.emplace_back(l, e);
  }
  std::stable_sort(items.begin(), items.end(), [&spec](const auto& a, const auto& b) {
    return spec.expert_sizes[static_cast<std::size_t>(a.second)] > spec.expert_sizes[static_cast<std::size_t>(b.second)];
  });
  for (const auto& [l, e] : items) {
    const auto lightest = std::min_element(plan.per_device_params.begin(), plan.per_device_params.end());
    place(plan, spec, l, e, static_cast<int>(lightest - plan.per_device_params.begin()));
  }
  sort_layer_major(plan);
  return plan;
}

WorkloadReport evaluate_workload(const PlacementPlan& plan, const RoutingTrace& trace, const PairedExpertSpec& spec) {
  std::vector<int> device(static_cast<std::size_t>(plan.layers * plan.experts), -1);
  for (const auto& a : plan.assignment) device[static_cast<std::size_t>(a.layer * plan.experts + a.expert)] = a.device;

  WorkloadReport report;
  report.per_device_tokens.assign(static_cast<std::size_t>(plan.device_count), 0);
  report.per_device_flop_proxy.assign(static_cast<std::size_t>(plan.device_count), 0);
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const auto& r = trace.records[i];
    if (r.expert < 0 || r.expert >= plan.experts || r.expert >= spec.experts()) {
      throw TraceFormatError("trace record " + std::to_string(i) + ": expert " + std::to_string(r.expert) +
                             " out of range");
    }
    if (r.layer < 0 || r.layer >= plan.layers) {
      throw TraceFormatError("trace record " + std::to_string(i) + ": layer " + std::to_string(r.layer) +
                             " not covered by the plan");
    }
    const auto d = static_cast<std::size_t>(device[static_cast<std::size_t>(r.layer * plan.experts + r.expert)]);
    report.per_device_tokens[d] += 1;
    report.per_device_flop_proxy[d] += spec.expert_sizes[static_cast<std::size_t>(r.expert)];
  }
  const auto [lo, hi] = std::minmax_element(report.per_device_flop_proxy.begin(), report.per_device_flop_proxy.end());
  if (*lo == 0) {
    report.imbalance_ratio = *hi == 0 ? 1.0 : std::numeric_limits<double>::infinity();
  } else {
    report.imbalance_ratio = static_cast<double>(*hi) / static_cast<double>(*lo);
  }
  return report;
}

double average_selected_hidden_size(const RoutingTrace& trace, const PairedExpertSpec& spec) {
  if (trace.records.empty()) throw ArgumentError("average hidden size of an empty trace");
  std::int64_t total = 0;
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const int e = trace.records[i].expert;
    if (e < 0 || e >= spec.experts()) {
      throw TraceFormatError("trace record " + std::to_string(i) + ": expert " + std::to_string(e) + " out of range");
    }
    total += spec.expert_sizes[static_cast<std::size_t>(e)];
  }
  return static_cast<double>(total) / static_cast<double>(trace.records.size());
}

nlohmann::json to_json(const PlacementPlan& plan) {
  nlohmann::json assignment = nlohmann::json::array();
  for (const auto& a : plan.assignment) {
    assignment.push_back({{"layer", a.layer}, {"expert", a.expert}, {"device", a.device}});
  }
  return {{"strategy", to_string(plan.strategy)},
          {"device_count", plan.device_count},
          {"assignment", assignment},
          {"per_device_params", plan.per_device_params}};
}

}  // namespace modse
