#pragma once

// One-particle densities: cell-centred grids over a phase-space box and
// weighted sample clouds, plus time-indexed sequences of either.

#include <chaoslab/core.hpp>
#include <chaoslab/random.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <variant>
#include <vector>

namespace chaoslab {

inline constexpr double kMassTolerance = 1e-8;

template <int D>
struct GridDensity {
  static constexpr std::size_t dims = 2 * D;
  std::array<double, dims> lo{};
  std::array<double, dims> hi{};
  std::array<std::size_t, dims> shape{};
  std::vector<double> values;  // row-major, last axis fastest

  GridDensity() = default;
  GridDensity(const std::array<double, dims>& l, const std::array<double, dims>& h,
              const std::array<std::size_t, dims>& s)
      : lo(l), hi(h), shape(s) {
    std::size_t n = 1;
    for (std::size_t a = 0; a < dims; ++a) {
      if (!(hi[a] > lo[a]) || shape[a] == 0) throw InputError("degenerate grid axis");
      n *= shape[a];
    }
    values.assign(n, 0.0);
  }

  std::size_t size() const { return values.size(); }
  double spacing(std::size_t a) const { return (hi[a] - lo[a]) / double(shape[a]); }
  double cell_volume() const {
    double v = 1.0;
    for (std::size_t a = 0; a < dims; ++a) v *= spacing(a);
    return v;
  }
  std::array<std::size_t, dims> unflatten(std::size_t flat) const {
    std::array<std::size_t, dims> idx{};
    for (std::size_t a = dims; a-- > 0;) {
      idx[a] = flat % shape[a];
      flat /= shape[a];
    }
    return idx;
  }
  std::size_t flatten(const std::array<std::size_t, dims>& idx) const {
    std::size_t f = 0;
    for (std::size_t a = 0; a < dims; ++a) f = f * shape[a] + idx[a];
    return f;
  }
  double axis_center(std::size_t a, std::size_t i) const {
    return lo[a] + (double(i) + 0.5) * spacing(a);
  }
  PhasePoint<D> center(std::size_t flat) const {
    const auto idx = unflatten(flat);
    PhasePoint<D> x;
    for (std::size_t a = 0; a < dims; ++a) x.x[a] = axis_center(a, idx[a]);
    return x;
  }
  double mass() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s * cell_volume();
  }
  bool same_layout(const GridDensity& o) const {
    return lo == o.lo && hi == o.hi && shape == o.shape;
  }
  bool contains(const PhasePoint<D>& x, double margin = 0.0) const {
    for (std::size_t a = 0; a < dims; ++a)
      if (x.x[a] < lo[a] - margin || x.x[a] > hi[a] + margin) return false;
    return true;
  }

  /// Multilinear interpolation between cell centres; constant extension up to
  /// the box faces and zero outside the box.
  double evaluate(const PhasePoint<D>& x) const {
    std::array<std::size_t, dims> base{};
    std::array<double, dims> frac{};
    for (std::size_t a = 0; a < dims; ++a) {
      if (!(x.x[a] >= lo[a] && x.x[a] <= hi[a])) return 0.0;
      double u = (x.x[a] - lo[a]) / spacing(a) - 0.5;
      if (u <= 0.0) {
        base[a] = 0;
        frac[a] = 0.0;
      } else if (u >= double(shape[a] - 1)) {
        base[a] = shape[a] - 1;
        frac[a] = 0.0;
      } else {
        base[a] = static_cast<std::size_t>(u);
        frac[a] = u - double(base[a]);
      }
    }
    double out = 0.0;
    for (std::size_t corner = 0; corner < (std::size_t{1} << dims); ++corner) {
      double w = 1.0;
      std::array<std::size_t, dims> idx = base;
      for (std::size_t a = 0; a < dims; ++a) {
        if (corner >> a & 1U) {
          if (frac[a] == 0.0) {
            w = 0.0;
            break;
          }
          w *= frac[a];
          idx[a] += 1;
        } else {
          w *= 1.0 - frac[a];
        }
      }
      if (w != 0.0) out += w * values[flatten(idx)];
    }
    return out;
  }
};

template <int D>
struct CloudDensity {
  std::vector<PhasePoint<D>> points;
  std::vector<double> weights;

  std::size_t size() const { return points.size(); }
  double mass() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }
  static CloudDensity uniform(std::vector<PhasePoint<D>> pts) {
    CloudDensity c;
    c.weights.assign(pts.size(), pts.empty() ? 0.0 : 1.0 / double(pts.size()));
    c.points = std::move(pts);
    return c;
  }
};

template <int D>
using DensityRep = std::variant<GridDensity<D>, CloudDensity<D>>;

template <int D>
void validate(const GridDensity<D>& g) {
  for (double v : g.values)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("grid density has negative or non-finite cell");
  if (std::abs(g.mass() - 1.0) > kMassTolerance) throw InputError("grid density is not normalized");
}

template <int D>
void validate(const CloudDensity<D>& c) {
  if (c.points.empty()) throw InputError("empty cloud");
  if (c.points.size() != c.weights.size()) throw InputError("cloud weights/points size mismatch");
  for (double w : c.weights)
    if (!(w >= 0.0)) throw InputError("negative cloud weight");
  if (std::abs(c.mass() - 1.0) > kMassTolerance) throw InputError("cloud is not normalized");
}

template <int D>
void validate(const DensityRep<D>& f) {
  std::visit([](const auto& r) { validate(r); }, f);
}

/// Rescales to unit mass; returns the mass before rescaling.
template <int D>
double normalize(GridDensity<D>& g) {
  const double m = g.mass();
  if (!(m > 0.0)) throw DegenerateInputError("grid density has zero mass");
  for (double& v : g.values) v /= m;
  return m;
}

/// Bracketing index i and weight lambda with t = (1-lambda) t_i + lambda t_{i+1}.
inline std::pair<std::size_t, double> locate_time(const std::vector<double>& times, double t) {
  if (times.empty()) throw InputError("empty time grid");
  const double eps = 1e-12 * (1.0 + std::abs(times.back()));
  if (t < times.front() - eps || t > times.back() + eps) throw RangeError("time outside density range");
  if (times.size() == 1) return {0, 0.0};
  auto it = std::upper_bound(times.begin(), times.end(), t);
  std::size_t i = it == times.begin() ? 0 : std::size_t(it - times.begin()) - 1;
  if (i >= times.size() - 1) i = times.size() - 2;
  const double lam = (t - times[i]) / (times[i + 1] - times[i]);
  return {i, std::clamp(lam, 0.0, 1.0)};
}

template <class Slice>
struct TimeDensity {
  std::vector<double> times;
  std::vector<Slice> slices;

  double t_min() const { return times.front(); }
  double t_max() const { return times.back(); }
  std::pair<std::size_t, double> locate(double t) const { return locate_time(times, t); }
};

/// Cell-centre values of prod_k N(mean_k, sigma_k^2) on the given box, then
/// renormalized to unit Riemann mass.
template <int D>
GridDensity<D> gaussian_grid(const std::array<double, 2 * D>& lo,
                             const std::array<double, 2 * D>& hi,
                             const std::array<std::size_t, 2 * D>& shape,
                             const std::array<double, 2 * D>& mean,
                             const std::array<double, 2 * D>& sigma) {
  GridDensity<D> g(lo, hi, shape);
  for (std::size_t f = 0; f < g.size(); ++f) {
    const auto x = g.center(f);
    double v = 1.0;
    for (std::size_t a = 0; a < 2 * D; ++a) {
      const double z = (x.x[a] - mean[a]) / sigma[a];
      v *= std::exp(-0.5 * z * z) / (sigma[a] * std::sqrt(2.0 * std::numbers::pi));
    }
    g.values[f] = v;
  }
  normalize(g);
  return g;
}

/// Grid from a pointwise density, renormalized.
template <int D>
GridDensity<D> tabulate(const std::function<double(const PhasePoint<D>&)>& f,
                        const std::array<double, 2 * D>& lo,
                        const std::array<double, 2 * D>& hi,
                        const std::array<std::size_t, 2 * D>& shape) {
  GridDensity<D> g(lo, hi, shape);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = f(g.center(i));
  normalize(g);
  return g;
}

/// M i.i.d. draws with independent N(0, sigma_q^2) position and N(0, sigma_p^2)
/// momentum components.
template <int D>
std::vector<PhasePoint<D>> sample_gaussian(std::size_t m, double sigma_q, double sigma_p,
                                           Rng& rng) {
  std::normal_distribution<double> n01;
  std::vector<PhasePoint<D>> pts(m);
  for (auto& x : pts) {
    for (int c = 0; c < D; ++c) x.q(c) = sigma_q * n01(rng);
    for (int c = 0; c < D; ++c) x.p(c) = sigma_p * n01(rng);
  }
  return pts;
}

// Binary layout of a gridded time density (little-endian):
// "CLTDN001", u64 dims, dims x f64 lo, dims x f64 hi, dims x u64 shape,
// u64 slices, slices x f64 times, then the slices' cell values back to back.
template <int D>
void write_time_density(std::ostream& os, const TimeDensity<GridDensity<D>>& f) {
  static_assert(std::endian::native == std::endian::little);
  if (f.slices.empty()) throw InputError("empty time density");
  const auto& g = f.slices.front();
  auto put = [&](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  os.write("CLTDN001", 8);
  put(std::uint64_t{2 * D});
  for (double v : g.lo) put(v);
  for (double v : g.hi) put(v);
  for (std::size_t v : g.shape) put(std::uint64_t{v});
  put(std::uint64_t{f.slices.size()});
  for (double t : f.times) put(t);
  for (const auto& s : f.slices) {
    if (!s.same_layout(g)) throw InputError("slices have different layouts");
    os.write(reinterpret_cast<const char*>(s.values.data()),
             std::streamsize(sizeof(double) * s.values.size()));
  }
  if (!os) throw IoError("failed writing time density");
}

template <int D>
TimeDensity<GridDensity<D>> read_time_density(std::istream& is) {
  auto get = [&](auto& v) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated time density");
  };
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "CLTDN001", 8) != 0)
    throw IoError("not a time density file");
  std::uint64_t dims = 0, n = 0;
  get(dims);
  if (dims != 2 * D) throw IoError("time density dimension mismatch");
  std::array<double, 2 * D> lo, hi;
  std::array<std::size_t, 2 * D> shape;
  for (auto& v : lo) get(v);
  for (auto& v : hi) get(v);
  for (auto& v : shape) {
    std::uint64_t s;
    get(s);
    v = s;
  }
  get(n);
  TimeDensity<GridDensity<D>> f;
  f.times.resize(n);
  for (auto& t : f.times) get(t);
  for (std::uint64_t i = 0; i < n; ++i) {
    GridDensity<D> g(lo, hi, shape);
    if (!is.read(reinterpret_cast<char*>(g.values.data()),
                 std::streamsize(sizeof(double) * g.values.size())))
      throw IoError("truncated time density");
    f.slices.push_back(std::move(g));
  }
  return f;
}

}  // namespace chaoslab
