#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "metadiff/nn/tensor.hpp"

namespace metadiff::nn {

/// Result for one checked array. rel_error compares the analytic and
/// numeric gradient vectors as a whole; the worst element is the one with the
/// largest absolute disagreement.
struct GradEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradReport {
  std::string block;
  std::vector<GradEntry> entries;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  const GradEntry* worst() const {
    const GradEntry* w = nullptr;
    for (const auto& e : entries)
      if (!w || e.rel_error > w->rel_error) w = &e;
    return w;
  }
  bool passed(double tol) const { return max_rel_error() < tol; }

  std::string summary() const {
    std::ostringstream os;
    os << block << ": max rel err " << max_rel_error();
    if (const auto* w = worst())
      os << " (worst " << w->name << "[" << w->worst_index << "] analytic " << w->analytic << " numeric " << w->numeric << ")";
    return os.str();
  }
};

/// ||a - n|| / max(||a||, ||n||, floor). Elementwise ratios are meaningless for
/// entries whose true gradient is ~0 (finite-difference rounding dominates),
/// so arrays are compared as vectors.
inline double relative_error(std::span<const double> a, std::span<const double> n, double floor = 1e-6) {
  double d2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d2 += (a[i] - n[i]) * (a[i] - n[i]);
    a2 += a[i] * a[i];
    n2 += n[i] * n[i];
  }
  return std::sqrt(d2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
}

/// A tensor under test together with its analytic gradient.
struct GradTarget {
  std::string name;
  Tensor<double>* value;
  const Tensor<double>* analytic;
};

/// Central differences with step h_rel * max(1, |x|) on every element of every
/// target (or an evenly strided subset of at most max_per_target elements).
/// loss() must recompute the scalar probe from the current values.
template <typename LossFn>
GradReport gradient_check(const std::string& block, const std::vector<GradTarget>& targets, LossFn&& loss,
                          double h_rel = 1e-6, std::size_t max_per_target = 0, double floor = 1e-6) {
  GradReport report{block, {}};
  for (const auto& tg : targets) {
    GradEntry e{tg.name};
    auto& x = *tg.value;
    if (!tg.analytic->same_shape(x)) throw std::invalid_argument("gradient_check: gradient shape mismatch for " + tg.name);
    const std::size_t n = x.numel();
    const std::size_t stride = (max_per_target == 0 || n <= max_per_target) ? 1 : (n + max_per_target - 1) / max_per_target;
    std::vector<double> ana, num;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = x[i];
      const double h = h_rel * std::max(1.0, std::abs(orig));
      x[i] = orig + h;
      const double lp = loss();
      x[i] = orig - h;
      const double lm = loss();
      x[i] = orig;
      const double g = (lp - lm) / (2.0 * h);
      const double a = (*tg.analytic)[i];
      if (ana.empty() || std::abs(a - g) > std::abs(e.analytic - e.numeric)) {
        e.worst_index = i;
        e.analytic = a;
        e.numeric = g;
      }
      ana.push_back(a);
      num.push_back(g);
    }
    e.checked = ana.size();
    e.rel_error = relative_error(ana, num, floor);
    report.entries.push_back(e);
  }
  return report;
}

/// Adds every parameter of the list as a target (value vs accumulated grad).
inline void add_parameter_targets(std::vector<GradTarget>& targets, const ParameterList<double>& params) {
  for (auto* p : params) targets.push_back({p->name, &p->value, &p->grad});
}

/// Fixed random weights r for the probe loss sum(r * y).
inline Tensor<double> probe_weights(const std::vector<int>& shape, InitRng& rng) {
  Tensor<double> r(shape);
  init_uniform(r, 1.0, rng);
  return r;
}

inline double probe_loss(const Tensor<double>& y, const Tensor<double>& r) {
  y.require_same_shape(r, "probe_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r[i];
  return s;
}

}  // namespace metadiff::nn
