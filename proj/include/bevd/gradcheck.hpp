#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bevd/tensor.hpp"

namespace bevd {

/// One checked operator or loss: fixture count, failures, worst relative
/// error over all gated elements.
struct GradCase {
  std::string name;
  int fixtures = 0;
  int failures = 0;
  int checked = 0;  // elements past the magnitude gate
  double worst_rel = 0.0;
  std::string first_failure;
  bool ok() const { return fixtures > 0 && failures == 0; }
};

struct GradSuiteResult {
  std::vector<GradCase> cases;
  double seconds = 0.0;
  bool ok() const;
  int total_fixtures() const;
};

/// Differentiable function under test: rebuilds the scalar loss from the
/// current contents of the leaf tensors on every call.
struct GradFixture {
  std::function<Tensor()> fn;
  std::vector<Tensor> leaves;
  double h = 1e-3;
};

struct CheckOutcome {
  int failures = 0;
  int checked = 0;
  double worst_rel = 0.0;
  std::string first_failure;
};

/// Central finite differences against the recorded gradients for every
/// requires-grad leaf. Elements with |analytic| + |numeric| <= 1e-8 are
/// skipped. When the two one-sided slopes disagree strongly and the
/// analytic value matches one of them, the element sits on a subgradient
/// boundary and is not counted as a failure.
CheckOutcome check_fixture(const GradFixture& fx, double tol);

/// Seeded fixtures for every differentiable operator and every loss.
GradSuiteResult run_gradient_suite(int fixtures_per_case = 20, uint64_t seed = 17,
                                   double tol = 1e-4);

std::string gradient_suite_report(const GradSuiteResult& r);

}  // namespace bevd
