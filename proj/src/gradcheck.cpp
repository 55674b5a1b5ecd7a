#include "muslcat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "muslcat/random.hpp"

namespace muslcat {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double project(const Tensor& y, const Tensor& w) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<long double>(y[i]) * w[i];
  return static_cast<double>(s);
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t max_samples, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_samples == 0 || n <= max_samples) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_samples);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct Tracker {
  GradCheckReport& report;
  double floor = 1e-8;

  // Returns false when the comparison cannot be made (non-finite values).
  bool add(double analytic, double numeric, const std::string& where) {
    ++report.checked;
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
      std::ostringstream os;
      os << "non-finite gradient at " << where << " (analytic " << analytic << ", numeric "
         << numeric << ")";
      report.detail = os.str();
      report.max_rel_error = std::numeric_limits<double>::infinity();
      return false;
    }
    const double e = relative_error(analytic, numeric, floor);
    if (e >= report.max_rel_error) {
      std::ostringstream os;
      os << "worst at " << where << ": analytic=" << analytic << " numeric=" << numeric;
      report.detail = os.str();
      report.max_rel_error = e;
    }
    return true;
  }
};

}  // namespace

GradCheckReport finite_diff_check(const DifferentiableOp& op, const Tensor& input, double eps,
                                  double tolerance, std::uint64_t seed) {
  GradCheckReport report;
  report.op = op.name;
  report.tolerance = tolerance;
  Rng rng(seed);
  const Tensor y = op.forward(input);
  const Tensor w = random_normal(y.shape(), rng);
  const Tensor analytic = op.backward(input, w);
  Tracker tr{report};
  bool finite = true;
  Tensor x = input;
  for (std::size_t i = 0; i < x.size() && finite; ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double lp = project(op.forward(x), w);
    x[i] = orig - eps;
    const double lm = project(op.forward(x), w);
    x[i] = orig;
    finite = tr.add(analytic[i], (lp - lm) / (2.0 * eps), "input[" + std::to_string(i) + "]");
  }
  report.pass = finite && report.max_rel_error <= tolerance;
  return report;
}

GradCheckReport check_module(const std::string& name, Module& module, const Tensor& input,
                             Mode mode, const GradCheckOptions& options) {
  GradCheckReport report;
  report.op = name;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);

  const Tensor y0 = module.forward(input, mode);
  const Tensor w = random_normal(y0.shape(), rng);
  zero_grads(module);
  module.forward(input, mode);
  const Tensor dx = module.backward(w);

  auto params = parameters_of(module);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.param->grad);

  auto loss_at = [&](const Tensor& x) { return project(module.forward(x, mode), w); };
  const double eps = options.eps;
  Tracker tr{report, options.abs_floor};
  bool finite = true;

  if (options.check_input) {
    Tensor x = input;
    for (std::size_t i : sample_indices(x.size(), options.max_samples, rng)) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double lp = loss_at(x);
      x[i] = orig - eps;
      const double lm = loss_at(x);
      x[i] = orig;
      finite = tr.add(dx[i], (lp - lm) / (2.0 * eps), "input[" + std::to_string(i) + "]");
      if (!finite) break;
    }
  }
  for (std::size_t k = 0; k < params.size() && finite; ++k) {
    Tensor& value = params[k].param->value;
    for (std::size_t i : sample_indices(value.size(), options.max_samples, rng)) {
      const double orig = value[i];
      value[i] = orig + eps;
      const double lp = loss_at(input);
      value[i] = orig - eps;
      const double lm = loss_at(input);
      value[i] = orig;
      finite = tr.add(analytic[k][i], (lp - lm) / (2.0 * eps),
                      params[k].name + "[" + std::to_string(i) + "]");
      if (!finite) break;
    }
  }
  report.pass = finite && report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace muslcat
