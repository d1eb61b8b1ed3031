#pragma once

// Central finite differences against the tape gradients.

#include <cstdint>
#include <string>
#include <vector>

namespace reidmamba {

struct GroupError {
  std::string name;
  int checked = 0;
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::string selector;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::vector<GroupError> groups;

  bool passed() const { return max_rel_error < tolerance; }
};

struct GradcheckOptions {
  std::uint64_t seed = 1;
  double step = 1e-5;
  int max_entries_per_group = 16;  // sampled deterministically when larger
  double abs_floor = 1e-6;         // denominator floor for tiny gradients
};

/// linear, scan, bimb, neck, dktau, ratr, triplet, model.
std::vector<std::string> gradcheck_selectors();

/// Per checked entry: |analytic - numeric| / max(|analytic|, |numeric|,
/// abs_floor), with numeric = (L(p+h) - L(p-h)) / 2h. Throws
/// std::invalid_argument on an unknown selector.
GradcheckReport run_gradcheck(const std::string& selector, double tolerance, const GradcheckOptions& opts = {});

}  // namespace reidmamba
