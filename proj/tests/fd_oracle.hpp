#pragma once

// Central finite-difference oracle shared by the gradient tests. The oracle
// evaluates double-precision reference forward passes (reference_ops.hpp)
// and never touches the reverse pass it is checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "circuitlab/random.hpp"
#include "reference_ops.hpp"

namespace circuitlab::testing {

using Fn = std::function<double(const std::vector<double>&)>;

struct FdResult {
  std::vector<double> numeric;  // NaN where skipped
  std::size_t skipped = 0;
};

/// Central differences over every coordinate of `x`. A coordinate is skipped
/// when a reference ReLU / max-pool decision differs between x-h, x and x+h,
/// or when a kink input sits within `kink_margin` of its switch point.
inline FdResult central_differences(const Fn& f, std::vector<double> x, double h,
                                    double kink_margin = 1e-4) {
  auto run = [&](reference::KinkProbe& p) {
    reference::active_probe = &p;
    const double v = f(x);
    reference::active_probe = nullptr;
    return v;
  };
  FdResult r;
  r.numeric.assign(x.size(), std::nan(""));
  reference::KinkProbe base;
  run(base);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    reference::KinkProbe up, down;
    x[i] = orig + h;
    const double fu = run(up);
    x[i] = orig - h;
    const double fd = run(down);
    x[i] = orig;
    if (up.digest != base.digest || down.digest != base.digest ||
        base.min_margin < kink_margin) {
      ++r.skipped;
      continue;
    }
    r.numeric[i] = (fu - fd) / (2.0 * h);
  }
  return r;
}

/// Largest elementwise relative error over non-skipped coordinates. The
/// denominator is floored at `floor_fraction` of the largest numeric
/// magnitude so exactly-zero components are judged on the gradient's scale.
inline double max_relative_error(std::span<const float> analytic,
                                 const std::vector<double>& numeric,
                                 double floor_fraction = 1e-6) {
  double scale = 0.0;
  for (double v : numeric) {
    if (!std::isnan(v)) scale = std::max(scale, std::fabs(v));
  }
  const double floor = std::max(scale * floor_fraction, 1e-30);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    if (std::isnan(numeric[i])) continue;
    const double a = analytic[i];
    const double n = numeric[i];
    const double denom = std::max({std::fabs(a), std::fabs(n), floor});
    worst = std::max(worst, std::fabs(a - n) / denom);
  }
  return worst;
}

inline std::vector<float> random_vector(Rng& rng, std::size_t n, double lo = -1.0,
                                        double hi = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

inline std::vector<double> widen(const std::vector<float>& v) { return {v.begin(), v.end()}; }

inline std::vector<float> to_vector(std::span<const float> s) {
  return std::vector<float>(s.begin(), s.end());
}

}  // namespace circuitlab::testing
