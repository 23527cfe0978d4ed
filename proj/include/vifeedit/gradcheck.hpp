#pragma once

#include "vifeedit/autograd.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vifeedit {

class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int probes = 0;
  /// Coordinates where one-sided slopes disagree (a kink such as |x| at 0).
  /// They are reported and excluded from max_rel_error.
  std::vector<std::string> skipped;
};

using ScalarFn = std::function<Var<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of `fn` against central differences on
/// `probe_count` randomly drawn coordinates of `params`. The relative error
/// uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckResult finite_diff_check(const ScalarFn& fn, std::span<Param<double>* const> params,
                                  int probe_count, double eps = 1e-4, std::uint64_t seed = 0);

}  // namespace vifeedit
