#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace confit::verify {

/// Outcome of one randomized property check.
struct PropertyResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // worst observed error across all cases
  double limit = 0.0;  // tolerance the property is held to
  bool passed() const { return cases > 0 && failures == 0; }
};

// Post-convolution channel means computed three ways on stride-1,
// padding K-1 layers: directly, through the broadcast of pre-convolution
// means, and through the weight-sum closed form. Includes one fully
// hand-computed case.
PropertyResult check_mean_commutation(std::size_t cases, std::uint64_t seed);

// Broadcast and closed-form recovery paths agree on random layers.
PropertyResult check_recovery_paths(std::size_t cases, std::uint64_t seed);

// Strided convolution equals its phase-sum decomposition, and freshly
// captured phase means equal per-phase pooling exactly.
PropertyResult check_polyphase(std::size_t cases, std::uint64_t seed);

// After converging statistics and then perturbing the weights, recovery
// through the new weights stays exact while the stored post-convolution
// mean goes stale by a large factor. One toy layer per case.
PropertyResult check_recovery_under_drift(std::size_t cases,
                                          std::uint64_t seed);

// Every layer's analytic backward against central finite differences;
// `cases` counts instances per layer type.
PropertyResult check_gradients(std::size_t cases, std::uint64_t seed);

// Accuracy/forgetting against dense brute-force recomputation, plus the
// fixed worked table.
PropertyResult check_metrics(std::size_t cases, std::uint64_t seed);

// All six checks at the same case count.
std::vector<PropertyResult> run_property_suite(std::size_t cases,
                                               std::uint64_t seed);

std::string format_report(const std::vector<PropertyResult>& results);
bool all_passed(const std::vector<PropertyResult>& results);

}  // namespace confit::verify
