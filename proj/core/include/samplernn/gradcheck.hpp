#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace samplernn {

struct GradcheckOptions {
  std::size_t instances = 100;  // random instances per case
  double step = 1e-5;           // central-difference step
  double tolerance = 1e-4;      // on the relative error
  std::size_t coords_per_tensor = 6;
  std::uint64_t seed = 0;
  bool tanh_fault = false;       // corrupts the tanh derivative for the run
  std::vector<std::string> only;  // case names; empty runs all
};

struct GradcheckCase {
  std::string name;
  std::size_t instances = 0;
  std::size_t checks = 0;
  double max_rel_error = 0.0;
  std::string worst;  // tensor and element of the largest error
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  double seconds = 0.0;
  bool passed() const;
  const GradcheckCase& worst() const;
};

/// |a - n| / max(|a|, |n|, 1e-3).
double gradcheck_relative_error(double analytic, double numeric);

std::vector<std::string> gradcheck_case_names();

/// Float64 finite-difference comparison of every differentiable op, cell,
/// layer, head and micro model against the tape's analytic gradients.
GradcheckReport run_gradcheck(const GradcheckOptions& options = {});

}  // namespace samplernn
