#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "comad/tape.hpp"
#include "comad/tensor.hpp"

namespace comad {

struct GradCheckFailure {
  std::string tensor_name;
  std::int64_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  std::int64_t checked = 0;
  double max_rel_err = 0;
  std::vector<GradCheckFailure> failures;
  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// One (tensor, element) coordinate to probe.
struct GradCheckEntry {
  std::size_t tensor = 0;
  std::int64_t index = 0;
};

namespace detail {

// Central-difference check of d(loss)/d(x) for the listed coordinates against
// the tape gradient. Step h = eps * (1 + |x|); error is
// |a - n| / max(|a|, |n|, floor), so tiny gradients are judged absolutely.
template <typename T>
GradCheckReport grad_check_impl(
    const std::function<Tensor<T>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<T>>>& inputs,
    const std::vector<GradCheckEntry>& entries, double eps, double floor,
    double record_tol) {
  GradCheckReport report;

  std::vector<std::vector<T>> analytic(inputs.size());
  {
    for (const auto& [name, t] : inputs) {
      Tensor<T> alias = t;
      alias.zero_grad();
    }
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = loss_fn();
    tape.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto& g = inputs[i].second.grad_or_empty();
      if (g.empty())
        analytic[i].assign(static_cast<std::size_t>(inputs[i].second.numel()),
                           T(0));
      else
        analytic[i].assign(g.begin(), g.end());
    }
  }

  auto eval = [&]() {
    Tensor<T> loss = loss_fn();
    return static_cast<double>(loss.item());
  };

  for (const GradCheckEntry& e : entries) {
    Tensor<T> t = inputs[e.tensor].second;
    const std::int64_t j = e.index;
    const T saved = t.data()[j];
    const double h = eps * (1.0 + std::abs(static_cast<double>(saved)));
    t.data()[j] = static_cast<T>(static_cast<double>(saved) + h);
    const double up = eval();
    t.data()[j] = static_cast<T>(static_cast<double>(saved) - h);
    const double down = eval();
    t.data()[j] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = static_cast<double>(analytic[e.tensor][j]);
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_err) report.max_rel_err = rel;
    if (rel > record_tol)
      report.failures.push_back({inputs[e.tensor].first, j, a, numeric, rel});
  }
  return report;
}

}  // namespace detail

// Checks every element of every listed tensor.
template <typename T>
GradCheckReport grad_check(
    const std::function<Tensor<T>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<T>>>& inputs,
    double eps = 1e-5, double floor = 0.01, double record_tol = 1e-4) {
  std::vector<GradCheckEntry> entries;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::int64_t j = 0; j < inputs[i].second.numel(); ++j)
      entries.push_back({i, j});
  return detail::grad_check_impl(loss_fn, inputs, entries, eps, floor,
                                 record_tol);
}

// Checks only the given coordinates; used when a full sweep is too expensive.
template <typename T>
GradCheckReport grad_check_entries(
    const std::function<Tensor<T>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<T>>>& inputs,
    const std::vector<GradCheckEntry>& entries, double eps = 1e-5,
    double floor = 0.01, double record_tol = 1e-4) {
  return detail::grad_check_impl(loss_fn, inputs, entries, eps, floor,
                                 record_tol);
}

}  // namespace comad
