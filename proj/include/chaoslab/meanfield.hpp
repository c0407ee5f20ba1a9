#pragma once

// Mean-field force v_t *^{d-1} f_t, the effective one-particle flow and
// fixed-point solvers for the self-consistent density f_t = f_0 o phi_{0,t}.

#include <chaoslab/density.hpp>
#include <chaoslab/dynamics.hpp>
#include <chaoslab/kernels.hpp>
#include <chaoslab/parallel.hpp>
#include <chaoslab/random.hpp>

#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace chaoslab {

/// Weighted point set used as a quadrature rule.
template <int D>
struct Atoms {
  std::vector<PhasePoint<D>> points;
  std::vector<double> weights;
};

template <int D>
Atoms<D> atoms_of(const GridDensity<D>& g) {
  Atoms<D> a;
  const double vol = g.cell_volume();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.values[i] > 0.0) {
      a.points.push_back(g.center(i));
      a.weights.push_back(g.values[i] * vol);
    }
  return a;
}

template <int D>
Atoms<D> atoms_of(const CloudDensity<D>& c) {
  return Atoms<D>{c.points, c.weights};
}

/// A fixed multiset of (d-1)-tuples of atom indices with multiplicities.
struct TupleSample {
  std::size_t width = 1;
  std::vector<std::uint32_t> indices;  // width entries per distinct tuple
  std::vector<double> counts;
  double total = 0.0;
};

/// Draws `samples` tuples with replacement, each entry independently from the
/// weights, then merges duplicates.
inline TupleSample draw_tuples(const std::vector<double>& weights, std::size_t width,
                               std::size_t samples, std::uint64_t seed) {
  if (weights.empty()) throw InputError("empty cloud");
  Rng rng(splitmix64(seed));
  std::discrete_distribution<std::uint32_t> pick(weights.begin(), weights.end());
  std::vector<std::vector<std::uint32_t>> raw(samples, std::vector<std::uint32_t>(width));
  for (auto& tup : raw)
    for (auto& i : tup) i = pick(rng);
  std::sort(raw.begin(), raw.end());
  TupleSample s;
  s.width = width;
  s.total = double(samples);
  for (std::size_t i = 0; i < raw.size();) {
    std::size_t j = i;
    while (j < raw.size() && raw[j] == raw[i]) ++j;
    s.indices.insert(s.indices.end(), raw[i].begin(), raw[i].end());
    s.counts.push_back(double(j - i));
    i = j;
  }
  return s;
}

namespace detail {

template <int D, InteractionKernel K>
PhasePoint<D> exhaustive_force(const PhasePoint<D>& x, const Atoms<D>& a, const K& k, double t) {
  using Point = PhasePoint<D>;
  const std::size_t m = a.points.size();
  if (m == 0) throw InputError("empty quadrature rule");
  if constexpr (PairForceKernel<K>) {
    Point r;
    std::array<double, D> dq;
    double wsum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (int c = 0; c < D; ++c) dq[c] = x.q(c) - a.points[i].q(c);
      const auto f = k.pair_force(dq);
      for (int c = 0; c < D; ++c) r.p(c) += a.weights[i] * f[c];
      wsum += a.weights[i];
    }
    for (int c = 0; c < D; ++c) r.q(c) = x.p(c) * wsum;
    return r;
  } else {
    const std::size_t w = static_cast<std::size_t>(k.arity() - 1);
    std::vector<std::size_t> idx(w, 0);
    std::vector<Point> args(w + 1);
    args[0] = x;
    Point r;
    while (true) {
      double weight = 1.0;
      for (std::size_t s = 0; s < w; ++s) {
        args[s + 1] = a.points[idx[s]];
        weight *= a.weights[idx[s]];
      }
      if (weight != 0.0) r += weight * k(t, std::span<const Point>(args));
      std::size_t s = w;
      while (s > 0 && idx[s - 1] == m - 1) idx[--s] = 0;
      if (s == 0) break;
      ++idx[s - 1];
    }
    return r;
  }
}

template <int D, InteractionKernel K>
PhasePoint<D> sampled_force(const PhasePoint<D>& x, const Atoms<D>& a, const TupleSample& s,
                            const K& k, double t) {
  using Point = PhasePoint<D>;
  std::vector<Point> args(s.width + 1);
  args[0] = x;
  Point r;
  for (std::size_t n = 0; n < s.counts.size(); ++n) {
    for (std::size_t j = 0; j < s.width; ++j) args[j + 1] = a.points[s.indices[n * s.width + j]];
    r += s.counts[n] * k(t, std::span<const Point>(args));
  }
  return r * (1.0 / s.total);
}

}  // namespace detail

/// Tensorized cell quadrature of the mean-field force over a grid density.
template <int D, InteractionKernel K>
PhasePoint<D> mean_field_force(const PhasePoint<D>& x, const GridDensity<D>& f, const K& k,
                               double t) {
  if (f.values.empty()) throw InputError("empty grid");
  return detail::exhaustive_force<D>(x, atoms_of(f), k, t);
}

struct CloudQuadrature {
  /// Number of (d-1)-tuples drawn with replacement; 0 averages over all tuples.
  std::size_t samples = 4096;
  std::uint64_t seed = 0;
};

template <int D, InteractionKernel K>
PhasePoint<D> mean_field_force(const PhasePoint<D>& x, const CloudDensity<D>& f, const K& k,
                               double t, const CloudQuadrature& quad = {}) {
  if (f.points.empty()) throw InputError("empty cloud");
  const auto a = atoms_of(f);
  if (quad.samples == 0) return detail::exhaustive_force<D>(x, a, k, t);
  const auto s = draw_tuples(a.weights, std::size_t(k.arity() - 1), quad.samples, quad.seed);
  return detail::sampled_force<D>(x, a, s, k, t);
}

// ---------------------------------------------------------------------------
// Velocity fields of the effective flow. A field exposes
//   PhasePoint<D> velocity(const PhasePoint<D>&, double t) const;
//   double t_min() const; double t_max() const;

template <class F, int D>
concept EffectiveField = requires(const F& f, const PhasePoint<D>& x, double t) {
  { f.velocity(x, t) } -> std::same_as<PhasePoint<D>>;
  { f.t_min() } -> std::convertible_to<double>;
  { f.t_max() } -> std::convertible_to<double>;
};

/// Mean-field velocity of a time-sliced density; values between slices are
/// linear in t. Clouds use a fixed tuple sample per slice.
template <int D, InteractionKernel K>
class SlicedField {
 public:
  SlicedField(const TimeDensity<GridDensity<D>>& f, K k) : k_(std::move(k)), times_(f.times) {
    if (f.slices.empty()) throw InputError("empty time density");
    for (const auto& g : f.slices) atoms_.push_back(reduce(atoms_of(g)));
  }
  SlicedField(const TimeDensity<CloudDensity<D>>& f, K k, CloudQuadrature quad = {})
      : k_(std::move(k)), times_(f.times) {
    if (f.slices.empty()) throw InputError("empty time density");
    for (std::size_t i = 0; i < f.slices.size(); ++i) {
      if (f.slices[i].points.empty()) throw InputError("empty cloud");
      atoms_.push_back(atoms_of(f.slices[i]));
      if (quad.samples > 0)
        tuples_.push_back(draw_tuples(atoms_.back().weights, std::size_t(k_.arity() - 1),
                                      quad.samples, hash_mix(quad.seed, i)));
    }
  }
  /// Time-independent field of a single density.
  SlicedField(const GridDensity<D>& g, K k)
      : SlicedField(TimeDensity<GridDensity<D>>{{0.0}, {g}}, std::move(k)) {
    stationary_ = true;
  }

  double t_min() const { return stationary_ ? -INFINITY : times_.front(); }
  double t_max() const { return stationary_ ? INFINITY : times_.back(); }

  PhasePoint<D> velocity(const PhasePoint<D>& x, double t) const {
    if (stationary_ || times_.size() == 1) return force(0, x, t);
    const auto [i, lam] = locate_time(times_, t);
    if (lam == 0.0) return force(i, x, t);
    if (lam == 1.0) return force(i + 1, x, t);
    return (1.0 - lam) * force(i, x, t) + lam * force(i + 1, x, t);
  }

 private:
  // Pair forces only see positions: collapse atoms onto their spatial marginal.
  Atoms<D> reduce(Atoms<D> a) const {
    if constexpr (PairForceKernel<K>) {
      std::vector<std::size_t> order(a.points.size());
      std::iota(order.begin(), order.end(), 0);
      auto qkey = [&](std::size_t i) {
        std::array<double, D> q;
        for (int c = 0; c < D; ++c) q[c] = a.points[i].q(c);
        return q;
      };
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return qkey(x) < qkey(y); });
      Atoms<D> r;
      for (std::size_t n = 0; n < order.size();) {
        std::size_t m = n;
        double w = 0.0;
        while (m < order.size() && qkey(order[m]) == qkey(order[n])) w += a.weights[order[m++]];
        PhasePoint<D> p;
        for (int c = 0; c < D; ++c) p.q(c) = a.points[order[n]].q(c);
        r.points.push_back(p);
        r.weights.push_back(w);
        n = m;
      }
      return r;
    } else {
      return a;
    }
  }

  PhasePoint<D> force(std::size_t i, const PhasePoint<D>& x, double t) const {
    if (!tuples_.empty()) return detail::sampled_force<D>(x, atoms_[i], tuples_[i], k_, t);
    return detail::exhaustive_force<D>(x, atoms_[i], k_, t);
  }

  K k_;
  std::vector<double> times_;
  std::vector<Atoms<D>> atoms_;
  std::vector<TupleSample> tuples_;
  bool stationary_ = false;
};

/// Field with no interaction: velocity (p, 0) at all times.
template <int D>
struct FreeField {
  double t_min() const { return -INFINITY; }
  double t_max() const { return INFINITY; }
  PhasePoint<D> velocity(const PhasePoint<D>& x, double) const {
    PhasePoint<D> r;
    for (int c = 0; c < D; ++c) r.q(c) = x.p(c);
    return r;
  }
};

/// Exact mean field of the rotation average of a 3-D cloud under the Newtonian
/// kernel of amplitude * exp(-|q|^2 / width^2). For rotation-invariant
/// densities this is the same force as the cloud's, with the angular noise
/// integrated out. Sources at radius r contribute the sphere average
///   exp(-Q^2 - r^2) sinh(2 Q r) / (2 Q r)
/// (in width units), whose Q-derivative is tabulated per slice.
class RadialGaussianField {
 public:
  struct Options {
    std::size_t table_size = 2048;
    std::size_t max_sources = 4096;  // 0 uses every point
  };

  RadialGaussianField(const TimeDensity<CloudDensity<3>>& f, GaussianBump<3> a, Options opt)
      : a_(a), times_(f.times) {
    if (f.slices.empty()) throw InputError("empty time density");
    for (const auto& c : f.slices) {
      if (c.points.empty()) throw InputError("empty cloud");
      const std::size_t m = opt.max_sources == 0 ? c.size() : std::min(c.size(), opt.max_sources);
      std::vector<double> r(m), w(m);
      double wsum = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (int d = 0; d < 3; ++d) s += c.points[i].q(d) * c.points[i].q(d);
        r[i] = std::sqrt(s) / a_.width;
        w[i] = c.weights[i];
        wsum += w[i];
      }
      for (double& v : w) v /= wsum;
      radii_.push_back(std::move(r));
      rweights_.push_back(std::move(w));
    }
    double rmax = 0.0;
    for (const auto& r : radii_)
      for (double v : r) rmax = std::max(rmax, v);
    qmax_ = rmax + 7.0;
    const std::size_t n = std::max<std::size_t>(opt.table_size, 16);
    h_ = qmax_ / double(n - 1);
    for (std::size_t s = 0; s < radii_.size(); ++s) {
      std::vector<double> tab(n);
      for (std::size_t i = 0; i < n; ++i) tab[i] = derivative(s, h_ * double(i));
      tables_.push_back(std::move(tab));
    }
  }

  double t_min() const { return times_.front(); }
  double t_max() const { return times_.back(); }

  /// d/dQ of the mean potential (in width units) of slice s.
  double derivative(std::size_t s, double Q) const {
    double acc = 0.0;
    const auto& r = radii_[s];
    const auto& w = rweights_[s];
    for (std::size_t i = 0; i < r.size(); ++i) acc += w[i] * shell_derivative(Q, r[i]);
    return acc;
  }

  static double shell_derivative(double Q, double r) {
    const double z = 2.0 * Q * r;
    if (z < 1e-3) {
      const double e = std::exp(-Q * Q - r * r);
      return e * (-2.0 * Q * (1.0 + z * z / 6.0) + 2.0 * r * (z / 3.0 + z * z * z / 30.0));
    }
    const double em = std::exp(-(Q - r) * (Q - r));
    const double ep = std::exp(-(Q + r) * (Q + r));
    const double g = (em - ep) / (2.0 * z);
    return (-2.0 * (Q - r) * em + 2.0 * (Q + r) * ep) / (2.0 * z) - g / Q;
  }

  PhasePoint<3> velocity(const PhasePoint<3>& x, double t) const {
    PhasePoint<3> v;
    for (int c = 0; c < 3; ++c) v.q(c) = x.p(c);
    const double Qphys = std::sqrt(x.q(0) * x.q(0) + x.q(1) * x.q(1) + x.q(2) * x.q(2));
    if (Qphys == 0.0) return v;
    const double Q = Qphys / a_.width;
    double du;
    if (times_.size() == 1) {
      du = lookup(0, Q);
    } else {
      const auto [i, lam] = locate_time(times_, t);
      du = lam == 0.0 ? lookup(i, Q) : (1.0 - lam) * lookup(i, Q) + lam * lookup(i + 1, Q);
    }
    // force = -grad U = -(amplitude / width) U'(Q) q / |q|
    const double s = -a_.amplitude / a_.width * du / Qphys;
    for (int c = 0; c < 3; ++c) v.p(c) = s * x.q(c);
    return v;
  }

 private:
  double lookup(std::size_t s, double Q) const {
    if (Q >= qmax_) return derivative(s, Q);
    const double u = Q / h_;
    const auto i = static_cast<std::size_t>(u);
    const double f = u - double(i);
    const auto& tab = tables_[s];
    if (i + 1 >= tab.size()) return tab.back();
    return (1.0 - f) * tab[i] + f * tab[i + 1];
  }

  GaussianBump<3> a_;
  std::vector<double> times_;
  std::vector<std::vector<double>> radii_, rweights_, tables_;
  double qmax_ = 0.0, h_ = 1.0;
};

// ---------------------------------------------------------------------------
// Characteristics.

template <int D, class Field>
PhasePoint<D> rk4_field_step(const Field& f, const PhasePoint<D>& x, double t, double h) {
  const auto k1 = f.velocity(x, t);
  const auto k2 = f.velocity(x + (0.5 * h) * k1, t + 0.5 * h);
  const auto k3 = f.velocity(x + (0.5 * h) * k2, t + 0.5 * h);
  const auto k4 = f.velocity(x + h * k3, t + h);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// phi_{t1,t0}(x): RK4 from t0 to t1 (either direction) with steps of at most dt.
template <int D, class Field>
  requires EffectiveField<Field, D>
PhasePoint<D> effective_flow(const PhasePoint<D>& x, const Field& f, double t0, double t1,
                             double dt) {
  if (!(dt > 0.0)) throw InputError("dt must be positive");
  const double tol = 1e-12 * (1.0 + std::abs(f.t_max()) + std::abs(f.t_min()));
  for (double t : {t0, t1})
    if (t < f.t_min() - tol || t > f.t_max() + tol) throw RangeError("time outside field range");
  const auto steps = static_cast<std::size_t>(std::ceil(std::abs(t1 - t0) / dt - 1e-9));
  PhasePoint<D> y = x;
  double t = t0;
  for (std::size_t s = 0; s < steps; ++s) {
    const double tn = s + 1 == steps ? t1 : t0 + (t1 - t0) * double(s + 1) / double(steps);
    y = rk4_field_step<D>(f, y, t, tn - t);
    t = tn;
  }
  if (!y.finite()) throw NumericError("non-finite characteristic");
  return y;
}

template <int D>
struct EffectivePath {
  std::vector<double> times;
  std::vector<PhasePoint<D>> points;
};

template <int D, class Field>
  requires EffectiveField<Field, D>
EffectivePath<D> evolve_effective(const PhasePoint<D>& x0, const Field& f, double t_end,
                                  double dt, double t_start = 0.0) {
  if (!(dt > 0.0)) throw InputError("dt must be positive");
  const double tol = 1e-12 * (1.0 + std::abs(f.t_max()));
  if (t_start < f.t_min() - tol || t_end > f.t_max() + tol || t_end < t_start)
    throw RangeError("time outside field range");
  const auto steps = static_cast<std::size_t>(std::ceil((t_end - t_start) / dt - 1e-9));
  EffectivePath<D> path;
  path.times.push_back(t_start);
  path.points.push_back(x0);
  PhasePoint<D> y = x0;
  double t = t_start;
  for (std::size_t s = 0; s < steps; ++s) {
    const double tn = s + 1 == steps ? t_end : t_start + dt * double(s + 1);
    y = rk4_field_step<D>(f, y, t, tn - t);
    if (!y.finite()) throw NumericError("non-finite characteristic", {}, t);
    t = tn;
    path.times.push_back(t);
    path.points.push_back(y);
  }
  return path;
}

// ---------------------------------------------------------------------------
// Push-forward of a density along backward characteristics.

struct PushforwardOptions {
  double dt = 0.01;
  /// Feet further than this outside the initial box count as exits.
  double margin = 0.0;
  std::size_t workers = 1;
};

template <int D>
struct PushforwardResult {
  GridDensity<D> density;
  double raw_mass = 1.0;
  double defect = 0.0;  // |raw_mass - 1| removed by renormalization
  std::size_t exited = 0;
  bool coverage_warning = false;
  double mass_loss_estimate = 0.0;
  std::string warning;
};

/// f_t(x) = f_0(phi_{0,t}(x)) evaluated at cell centres of `layout`.
/// `support` is the box outside which f_0 is treated as zero.
template <int D, class Field>
  requires EffectiveField<Field, D>
PushforwardResult<D> pushforward_density(const std::function<double(const PhasePoint<D>&)>& f0,
                                         const GridDensity<D>& support, const Field& field,
                                         double t, const GridDensity<D>& layout,
                                         const PushforwardOptions& opt = {}) {
  PushforwardResult<D> res;
  res.density = GridDensity<D>(layout.lo, layout.hi, layout.shape);
  std::vector<unsigned char> out(layout.size(), 0);
  parallel_for(layout.size(), opt.workers, [&](std::size_t i) {
    const auto foot = effective_flow<D>(layout.center(i), field, t, 0.0, opt.dt);
    if (!support.contains(foot, opt.margin)) out[i] = 1;
    res.density.values[i] = std::max(0.0, f0(foot));
  });
  res.exited = static_cast<std::size_t>(std::count(out.begin(), out.end(), 1));
  res.raw_mass = res.density.mass();
  res.defect = std::abs(res.raw_mass - 1.0);
  res.mass_loss_estimate = std::max(0.0, 1.0 - res.raw_mass);
  if (res.exited > 0) {
    res.coverage_warning = true;
    res.warning = std::to_string(res.exited) + " characteristics left the box; estimated mass loss " +
                  std::to_string(res.mass_loss_estimate);
  }
  normalize(res.density);
  return res;
}

template <int D, class Field>
  requires EffectiveField<Field, D>
PushforwardResult<D> pushforward_density(const GridDensity<D>& f0, const Field& field, double t,
                                         const PushforwardOptions& opt = {}) {
  return pushforward_density<D>([&](const PhasePoint<D>& x) { return f0.evaluate(x); }, f0,
                                field, t, f0, opt);
}

// ---------------------------------------------------------------------------
// Picard iteration for the self-consistent density.

struct PicardOptions {
  double T = 1.0;
  std::size_t slices = 10;  // time intervals; slice k sits at k T / slices
  double dt = 0.01;
  double tol = 1e-4;
  std::size_t max_iter = 20;
  double margin = 0.0;
  std::size_t workers = 1;
};

template <int D>
struct PicardResult {
  TimeDensity<GridDensity<D>> density;
  std::vector<double> residuals;  // sup over slices of the L1 change per iteration
  double max_defect = 0.0;
  std::size_t coverage_warnings = 0;
};

template <int D>
double l1_grid(const GridDensity<D>& a, const GridDensity<D>& b) {
  if (!a.same_layout(b)) throw InputError("grid layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return s * a.cell_volume();
}

/// f^(0)_t = f_0, f^(m+1)_t = f_0 o phi^{f^(m)}_{0,t}. `f0` is evaluated
/// pointwise at characteristic feet; `layout` fixes the grid of every slice.
template <int D, InteractionKernel K>
PicardResult<D> picard_vlasov_solve(const std::function<double(const PhasePoint<D>&)>& f0,
                                    const GridDensity<D>& layout, const K& k,
                                    const PicardOptions& opt) {
  if (!(opt.tol > 0.0)) throw InputError("tol must be positive");
  if (!(opt.T > 0.0) || opt.slices == 0) throw InputError("bad time grid");
  PicardResult<D> res;
  auto& cur = res.density;
  GridDensity<D> initial = layout;
  for (std::size_t i = 0; i < initial.size(); ++i) initial.values[i] = f0(initial.center(i));
  normalize(initial);
  for (std::size_t s = 0; s <= opt.slices; ++s) {
    cur.times.push_back(opt.T * double(s) / double(opt.slices));
    cur.slices.push_back(initial);
  }
  PushforwardOptions po{opt.dt, opt.margin, opt.workers};
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    SlicedField<D, K> field(cur, k);
    TimeDensity<GridDensity<D>> next;
    next.times = cur.times;
    next.slices.push_back(initial);
    double resid = 0.0;
    for (std::size_t s = 1; s <= opt.slices; ++s) {
      auto pf = pushforward_density<D>(f0, layout, field, cur.times[s], layout, po);
      res.max_defect = std::max(res.max_defect, pf.defect);
      res.coverage_warnings += pf.coverage_warning ? 1 : 0;
      resid = std::max(resid, l1_grid(pf.density, cur.slices[s]));
      next.slices.push_back(std::move(pf.density));
    }
    cur = std::move(next);
    res.residuals.push_back(resid);
    if (resid < opt.tol) return res;
  }
  throw NonConvergenceError("Picard iteration did not reach tolerance", res.residuals);
}

template <int D, InteractionKernel K>
PicardResult<D> picard_vlasov_solve(const GridDensity<D>& f0, const K& k,
                                    const PicardOptions& opt) {
  return picard_vlasov_solve<D>([&](const PhasePoint<D>& x) { return f0.evaluate(x); }, f0, k,
                                opt);
}

struct CloudPicardOptions {
  double T = 1.0;
  std::size_t slices = 10;
  double dt = 0.01;
  double tol = 1e-4;
  std::size_t max_iter = 20;
  std::size_t workers = 1;
};

template <int D>
struct CloudPicardResult {
  TimeDensity<CloudDensity<D>> density;
  std::vector<double> residuals;  // sup over slices of the mean particle displacement
};

/// Lagrangian Picard iteration: every cloud point is carried forward by the
/// field of the previous iterate. `build_field` maps a TimeDensity of clouds
/// to an EffectiveField.
template <int D, class Builder>
CloudPicardResult<D> cloud_picard_solve(const std::vector<PhasePoint<D>>& x0,
                                        Builder&& build_field, const CloudPicardOptions& opt) {
  if (x0.empty()) throw InputError("empty cloud");
  if (!(opt.tol > 0.0)) throw InputError("tol must be positive");
  if (!(opt.T > 0.0) || opt.slices == 0) throw InputError("bad time grid");
  CloudPicardResult<D> res;
  auto& cur = res.density;
  const auto initial = CloudDensity<D>::uniform(x0);
  for (std::size_t s = 0; s <= opt.slices; ++s) {
    cur.times.push_back(opt.T * double(s) / double(opt.slices));
    cur.slices.push_back(initial);
  }
  const std::size_t m = x0.size();
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    const auto field = build_field(cur);
    std::vector<std::vector<PhasePoint<D>>> paths(opt.slices + 1, std::vector<PhasePoint<D>>(m));
    parallel_for(m, opt.workers, [&](std::size_t i) {
      PhasePoint<D> y = x0[i];
      paths[0][i] = y;
      for (std::size_t s = 1; s <= opt.slices; ++s) {
        y = effective_flow<D>(y, field, cur.times[s - 1], cur.times[s], opt.dt);
        paths[s][i] = y;
      }
    });
    double resid = 0.0;
    for (std::size_t s = 1; s <= opt.slices; ++s) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += (paths[s][i] - cur.slices[s].points[i]).norm();
      resid = std::max(resid, acc / double(m));
      cur.slices[s].points = std::move(paths[s]);
    }
    res.residuals.push_back(resid);
    if (resid < opt.tol) return res;
  }
  throw NonConvergenceError("cloud Picard iteration did not reach tolerance", res.residuals);
}

// ---------------------------------------------------------------------------
// Discrete residual of the Vlasov equation
//   d_t f + p . grad_q f - grad_p f . (grad A * rho) = 0,  rho = spatial marginal.

template <int D, class K>
double vlasov_pde_residual(const TimeDensity<GridDensity<D>>&, const K&) {
  throw CapabilityError("Vlasov residual requires a Newtonian pair kernel");
}

template <int D, class Potential>
double vlasov_pde_residual(const TimeDensity<GridDensity<D>>& f,
                           const NewtonianPairKernel<D, Potential>& k) {
  const std::size_t nt = f.slices.size();
  if (nt < 3) throw InputError("need at least three time slices");
  const auto& g0 = f.slices.front();
  for (const auto& g : f.slices)
    if (!g.same_layout(g0)) throw InputError("slices have different layouts");
  for (std::size_t a = 0; a < 2 * D; ++a)
    if (g0.shape[a] < 3) throw InputError("grid too coarse for central differences");
  const auto& a = k.potential();

  // spatial marginal: cells of the q-axes with their mass
  std::array<std::size_t, D> qshape;
  std::size_t nq = 1, np = 1;
  for (int c = 0; c < D; ++c) {
    qshape[c] = g0.shape[c];
    nq *= g0.shape[c];
    np *= g0.shape[D + c];
  }
  auto q_of = [&](std::size_t qflat) {
    std::array<double, D> q;
    for (int c = D; c-- > 0;) {
      q[c] = g0.axis_center(c, qflat % qshape[c]);
      qflat /= qshape[c];
    }
    return q;
  };

  double total = 0.0;
  const double vol = g0.cell_volume();
  for (std::size_t s = 1; s + 1 < nt; ++s) {
    const auto& g = f.slices[s];
    std::vector<double> rho(nq, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) rho[i / np] += g.values[i] * vol;
    // grad A * rho at every spatial cell
    std::vector<std::array<double, D>> field(nq);
    for (std::size_t i = 0; i < nq; ++i) {
      const auto qi = q_of(i);
      std::array<double, D> acc{};
      for (std::size_t j = 0; j < nq; ++j) {
        if (rho[j] == 0.0) continue;
        const auto qj = q_of(j);
        std::array<double, D> dq;
        for (int c = 0; c < D; ++c) dq[c] = qi[c] - qj[c];
        const auto grad = a.gradient(dq);
        for (int c = 0; c < D; ++c) acc[c] += rho[j] * grad[c];
      }
      field[i] = acc;
    }
    const double dtc = f.times[s + 1] - f.times[s - 1];
    const double dt_cell = 0.5 * dtc;
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto idx = g.unflatten(i);
      bool interior = true;
      for (std::size_t ax = 0; ax < 2 * D; ++ax)
        if (idx[ax] == 0 || idx[ax] + 1 == g.shape[ax]) interior = false;
      if (!interior) continue;
      double r = (f.slices[s + 1].values[i] - f.slices[s - 1].values[i]) / dtc;
      const auto x = g.center(i);
      for (std::size_t ax = 0; ax < 2 * D; ++ax) {
        auto up = idx, dn = idx;
        ++up[ax];
        --dn[ax];
        const double deriv = (g.values[g.flatten(up)] - g.values[g.flatten(dn)]) / (2.0 * g.spacing(ax));
        if (ax < D)
          r += x.x[D + ax] * deriv;
        else
          r -= deriv * field[i / np][ax - D];
      }
      total += std::abs(r) * vol * dt_cell;
    }
  }
  return total;
}

}  // namespace chaoslab
