#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "far/tape.hpp"

namespace far {

enum class Fault { none, skip_permutation };

Fault parse_fault(const std::string& name);

struct VerifyOptions {
  Fault fault = Fault::none;
  std::size_t equivalence_models = 20;
  std::size_t equivalence_batches = 32;
  std::size_t metric_snapshots = 100;
  double gradient_tolerance = 1e-4;
  double equivalence_tolerance = 1e-12;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_passed() const;
  std::vector<std::string> failed() const;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t elements = 0;
  /// "<parameter>[<index>]" of the worst element.
  std::string worst;
};

/// Central finite differences against the tape's gradients for every
/// element of `params`. The relative error of an element is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckResult check_gradients(const std::vector<Parameter<double>*>& params,
                                const std::function<Var<double>(Tape<double>&)>& loss, double step = 1e-5,
                                double floor = 1e-6);

/// Runs every invariant check in 64-bit precision.
VerifyReport run_verification(const VerifyOptions& options = {});

}  // namespace far
