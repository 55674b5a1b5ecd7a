#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "muslcat/layers.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat {

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::size_t checked = 0;  // number of scalar derivatives compared
  std::string detail;       // location of the worst entry, or of a non-finite value
};

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric, double floor = 1e-8);

// A function of one tensor with its hand-written vector-Jacobian product.
struct DifferentiableOp {
  std::string name;
  std::function<Tensor(const Tensor&)> forward;
  std::function<Tensor(const Tensor& x, const Tensor& grad_out)> backward;
};

// Compares the analytic gradient of L(x) = <w, op(x)> (w fixed, random) to
// central differences over every input entry.
GradCheckReport finite_diff_check(const DifferentiableOp& op, const Tensor& input,
                                  double eps = 1e-5, double tolerance = 1e-4,
                                  std::uint64_t seed = 7);

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Entries compared per parameter tensor (and for the input); 0 means all.
  std::size_t max_samples = 24;
  std::uint64_t seed = 7;
  bool check_input = true;
  // Denominator floor for the relative error. Deep stacks need more than the
  // default: a structurally zero gradient (a bias feeding batch norm) shows up
  // numerically as roundoff of order 1e-11.
  double abs_floor = 1e-8;
};

// Same projection-loss check for a Module: input gradient plus every
// parameter gradient.
GradCheckReport check_module(const std::string& name, Module& module, const Tensor& input,
                             Mode mode, const GradCheckOptions& options = {});

}  // namespace muslcat
