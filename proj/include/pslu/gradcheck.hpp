#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pslu/tensor.hpp"

namespace pslu {

struct GradCheckReport {
  std::string op_name;
  double max_relative_error = 0.0;
  bool passed = false;
  std::size_t probe_count = 0;
};

namespace detail {
template <typename S>
constexpr double fd_step() {
  // Central differences: truncation O(h^2) against roundoff eps/h.
  return sizeof(S) == sizeof(double) ? 1e-5 : 1e-2;
}
}  // namespace detail

/// Central-difference verification of reverse-mode gradients.
///
/// `forward` must be a pure function of the listed input tensors and return a
/// tensor whose elements are summed into the checked scalar. Probes are taken
/// at `probes_per_input` random coordinates of every input; the relative
/// error denominator is max(|analytic|, |numeric|, 1e-8). A non-finite
/// analytic gradient yields a failed report rather than an exception.
template <typename S, typename Fn>
GradCheckReport finite_diff_check(std::string op_name, Fn&& forward,
                                  std::vector<Tensor<S>> inputs, std::size_t probes_per_input,
                                  double tolerance, Rng& rng) {
  GradCheckReport report;
  report.op_name = std::move(op_name);

  auto eval_sum = [&]() -> double {
    Tensor<S> out = forward();
    double acc = 0.0;
    for (S v : out.values()) acc += static_cast<double>(v);
    return acc;
  };

  for (auto& in : inputs) in.zero_grad();
  {
    Tensor<S> out = forward();
    GradTape<S> tape(out);
    tape.backward();
  }

  std::vector<std::vector<S>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    check_arg(in.requires_grad(), "finite_diff_check: input without gradient state");
    analytic.emplace_back(in.grad().begin(), in.grad().end());
    for (S g : analytic.back())
      if (!std::isfinite(static_cast<double>(g))) {
        report.max_relative_error = std::numeric_limits<double>::infinity();
        report.passed = false;
        return report;
      }
  }

  const double base_h = detail::fd_step<S>();
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    for (std::size_t p = 0; p < probes_per_input; ++p) {
      const std::size_t idx = rng.uniform_below(in.numel());
      const S orig = in.at(idx);
      const S h = static_cast<S>(base_h * std::max(1.0, std::abs(static_cast<double>(orig))));
      in.at(idx) = orig + h;
      const double f_plus = eval_sum();
      in.at(idx) = orig - h;
      const double f_minus = eval_sum();
      in.at(idx) = orig;

      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[t][idx]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(a - numeric) / denom);
      ++report.probe_count;
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace pslu
