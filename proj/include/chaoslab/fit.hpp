#pragma once

// Least-squares power-law fits on log-log data.

#include <chaoslab/core.hpp>

#include <cmath>
#include <vector>

namespace chaoslab {

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;  // log(value) at log(x) = 0
  double r2 = 0.0;
  double slope_stderr = 0.0;
  std::size_t used = 0;
  std::size_t dropped = 0;  // non-positive or non-finite pairs
};

/// Fits log y = intercept + slope log x over pairs with x, y > 0.
inline RateFit fit_rate(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InputError("x and y differ in length");
  std::vector<double> lx, ly;
  RateFit fit;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(x[i]) && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    } else {
      ++fit.dropped;
    }
  }
  const std::size_t n = lx.size();
  fit.used = n;
  if (n < 2) throw DegenerateInputError("need at least two positive points to fit a rate");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw DegenerateInputError("all x values coincide");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - fit.intercept - fit.slope * lx[i];
    sse += r * r;
  }
  fit.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  fit.slope_stderr = n > 2 ? std::sqrt(sse / double(n - 2) / sxx) : 0.0;
  return fit;
}

}  // namespace chaoslab
