#pragma once

// Law-of-large-numbers deviation statistics and their tail frequencies.

#include <chaoslab/core.hpp>
#include <chaoslab/fit.hpp>
#include <chaoslab/parallel.hpp>
#include <chaoslab/random.hpp>

#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

namespace chaoslab {

/// Rows of `dim` doubles, M = data.size() / dim.
struct PointSet {
  std::size_t dim = 1;
  std::vector<double> data;
  std::size_t size() const { return data.size() / dim; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
};

using Observable = std::function<double(std::span<const double>)>;
/// n-body observable: receives n rows concatenated.
using NObservable = std::function<double(std::span<const double>)>;
using Sampler = std::function<void(Rng&, std::span<double>)>;

/// |M^-1 sum_j h(x_j) - expectation|; `expectation` is E_g[h].
inline double deviation_stat(const PointSet& x, const Observable& h, double expectation) {
  const std::size_t m = x.size();
  if (m == 0) throw InputError("need at least one sample");
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) s += h(x.row(j)) - expectation;
  return std::abs(s / double(m));
}

/// Cap on n-subsets enumerated for the U-statistic; beyond it subsets are
/// drawn uniformly at random.
inline constexpr std::size_t kSubsetCap = 100000;

/// |C(M,n)^-1 sum_{j_1 < ... < j_n} h_n(x_{j_1}, ..., x_{j_n}) - expectation|.
inline double ustat_deviation(const PointSet& x, std::size_t n, const NObservable& h,
                              double expectation, Rng& rng) {
  const std::size_t m = x.size();
  if (n == 0) throw InputError("n must be >= 1");
  if (n > m) throw InputError("n exceeds the number of samples");
  std::vector<double> buf(n * x.dim);
  std::vector<std::size_t> idx(n);
  auto eval = [&] {
    for (std::size_t a = 0; a < n; ++a) {
      const auto r = x.row(idx[a]);
      std::copy(r.begin(), r.end(), buf.begin() + std::ptrdiff_t(a * x.dim));
    }
    return h(buf);
  };
  double sum = 0.0, count = 0.0;
  if (binomial(m, n) <= double(kSubsetCap)) {
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
      sum += eval() - expectation;
      count += 1.0;
      std::size_t a = n;
      while (a > 0 && idx[a - 1] == m - n + (a - 1)) --a;
      if (a == 0) break;
      ++idx[a - 1];
      for (std::size_t b = a; b < n; ++b) idx[b] = idx[b - 1] + 1;
    }
  } else {
    std::vector<std::size_t> chosen;
    for (std::size_t s = 0; s < kSubsetCap; ++s) {
      // Floyd's algorithm for a uniform n-subset
      chosen.clear();
      for (std::size_t j = m - n; j < m; ++j) {
        std::uniform_int_distribution<std::size_t> u(0, j);
        const std::size_t t = u(rng);
        if (std::find(chosen.begin(), chosen.end(), t) == chosen.end())
          chosen.push_back(t);
        else
          chosen.push_back(j);
      }
      std::copy(chosen.begin(), chosen.end(), idx.begin());
      sum += eval() - expectation;
      count += 1.0;
    }
  }
  return std::abs(sum / count);
}

struct WilsonInterval {
  double lo = 0.0, hi = 1.0;
};

inline WilsonInterval wilson_interval(double successes, double trials, double z = 1.959963984540054) {
  if (!(trials > 0.0)) throw InputError("trials must be positive");
  const double p = successes / trials, z2 = z * z;
  const double denom = 1.0 + z2 / trials;
  const double centre = (p + z2 / (2.0 * trials)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / trials + z2 / (4.0 * trials * trials)) / denom;
  return {successes <= 0.0 ? 0.0 : std::max(0.0, centre - half),
          successes >= trials ? 1.0 : std::min(1.0, centre + half)};
}

struct DeviationExperiment {
  Sampler sampler;         // fills one point of dimension `dim`
  std::size_t dim = 1;
  Observable h;            // one-body observable (n = 1)
  NObservable h_n;         // n-body observable for U-statistic sweeps
  std::size_t n = 1;
  double h_sup = 1.0;      // declared sup |h|
  double expectation = 0.0;
  std::vector<std::size_t> Ms;
  double kappa = 0.1;
  std::size_t reps = 100;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct SweepRow {
  std::size_t M = 0;
  double kappa = 0.0;
  double threshold = 0.0;
  double tail_freq = 0.0;
  double ci_lo = 0.0, ci_hi = 1.0;
  double median_d = 0.0;
  std::size_t reps = 0;
  std::uint64_t seed = 0;
  std::vector<double> stats;  // per-repetition statistic, repetition order
};

struct SweepResult {
  std::vector<SweepRow> rows;
  RateFit median_fit;  // log median(d) against log M
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline SweepResult run_sweep(const DeviationExperiment& e, bool ustat) {
  if (!std::isfinite(e.h_sup)) throw InputError("observable must be bounded");
  if (!(e.kappa > 0.0)) throw InputError("kappa must be positive");
  if (e.reps < 1 || e.Ms.empty()) throw InputError("empty sweep");
  if (!e.sampler || (ustat ? !e.h_n : !e.h)) throw InputError("sampler and observable required");
  SweepResult res;
  std::vector<double> xs, ys;
  for (std::size_t M : e.Ms) {
    if (M < 1) throw InputError("M must be >= 1");
    if (ustat && e.n > M) throw InputError("n exceeds M");
    SweepRow row;
    row.M = M;
    row.kappa = e.kappa;
    row.threshold = 2.0 * std::pow(double(M), -0.5 + e.kappa);
    row.reps = e.reps;
    row.seed = e.seed;
    row.stats.assign(e.reps, 0.0);
    parallel_for(e.reps, e.workers, [&](std::size_t r) {
      Rng rng = make_rng(e.seed, M, r, ustat ? "ustat" : "lln");
      PointSet x;
      x.dim = e.dim;
      x.data.resize(M * e.dim);
      for (std::size_t j = 0; j < M; ++j)
        e.sampler(rng, std::span<double>(x.data.data() + j * e.dim, e.dim));
      row.stats[r] = ustat ? ustat_deviation(x, e.n, e.h_n, e.expectation, rng)
                           : deviation_stat(x, e.h, e.expectation);
    });
    const auto hits = std::count_if(row.stats.begin(), row.stats.end(),
                                    [&](double d) { return d >= row.threshold; });
    row.tail_freq = double(hits) / double(e.reps);
    const auto ci = wilson_interval(double(hits), double(e.reps));
    row.ci_lo = ci.lo;
    row.ci_hi = ci.hi;
    row.median_d = median(row.stats);
    xs.push_back(double(M));
    ys.push_back(row.median_d);
    res.rows.push_back(std::move(row));
  }
  if (xs.size() >= 2) res.median_fit = fit_rate(xs, ys);
  return res;
}

}  // namespace detail

/// Empirical P(d >= 2 M^{-1/2 + kappa}) per M with Wilson intervals, and the
/// log-log slope of median(d) against M.
inline SweepResult tail_probability_sweep(const DeviationExperiment& e) {
  return detail::run_sweep(e, false);
}

/// Same sweep for the normalized n-body U-statistic.
inline SweepResult ustat_deviation_sweep(const DeviationExperiment& e) {
  return detail::run_sweep(e, true);
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
  os << "M,kappa,threshold,tail_freq,ci_lo,ci_hi,median_d,reps,seed\n";
  char buf[512];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%llu\n", row.M,
                  row.kappa, row.threshold, row.tail_freq, row.ci_lo, row.ci_hi, row.median_d,
                  row.reps, static_cast<unsigned long long>(row.seed));
    os << buf;
  }
}

}  // namespace chaoslab
