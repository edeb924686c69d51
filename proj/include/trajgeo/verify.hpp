#pragma once

#include "trajgeo/synthetic.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace trajgeo {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  std::vector<std::string> failures;  // with reproduction seeds
  double seconds = 0.0;
};

struct CloudCheck {
  double closed_form = 0.0;
  double monte_carlo = 0.0;
  double relative_error = 0.0;
  double standard_error = 0.0;  // of the Monte Carlo mean, from 2 Tr((A Sigma)^2)
  double z = 0.0;               // (monte_carlo - closed_form) / standard_error
};

/// One random instance: E[(x - Y)^T A (x - Y)] for Gaussian Y by Monte Carlo
/// (antithetic pairs) against the mean-plus-trace closed form. The query point
/// sits about two units outside the cloud mean.
CloudCheck point_to_cloud_check(int dim, int samples, std::uint64_t seed);

struct VerifyOptions {
  std::string suite = "all";  // all, cpca, cloud, bound, perturbation, agreement, gradient
  std::uint64_t seed = 0;
  int n = 0;                  // instance count override; 0 keeps each suite's default
  bool inject_fault = false;  // flips the sign of M in the cpca suite
  SyntheticConfig bound_config;
  std::vector<double> gamma_over_nu = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
  int bound_n_mc = 2000;
};

std::vector<SuiteResult> run_verify(const VerifyOptions& options);

}  // namespace trajgeo
