#pragma once

// Distances and functionals on one-particle densities: L1 on grids and
// histograms, bounded-Lipschitz brackets for empirical measures, the weighted
// Lipschitz norm, the shake operator and s-marginal estimation.

#include <chaoslab/core.hpp>
#include <chaoslab/density.hpp>
#include <chaoslab/random.hpp>

#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <vector>

namespace chaoslab {

template <int D>
double l1_distance(const GridDensity<D>& a, const GridDensity<D>& b) {
  if (!a.same_layout(b)) throw InputError("grid layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return s * a.cell_volume();
}

// ---------------------------------------------------------------------------
// Histograms over selected coordinates of sample vectors.

/// Flat sample matrix: size() rows of `dim` doubles.
struct SampleSet {
  std::size_t dim = 0;
  std::vector<double> data;

  std::size_t size() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  void push(std::span<const double> x) {
    if (dim == 0) dim = x.size();
    if (x.size() != dim) throw InputError("sample dimension mismatch");
    data.insert(data.end(), x.begin(), x.end());
  }
  template <int D>
  static SampleSet of(std::span<const PhasePoint<D>> pts) {
    SampleSet s;
    s.dim = 2 * D;
    for (const auto& p : pts) s.data.insert(s.data.end(), p.x.begin(), p.x.end());
    return s;
  }
};

struct HistogramSpec {
  std::vector<std::size_t> axes;  // coordinates of a sample row that are binned
  std::vector<double> lo, hi;
  std::vector<std::size_t> bins;

  /// Same box and bin count on each listed axis.
  static HistogramSpec uniform(std::vector<std::size_t> axes, double lo, double hi,
                               std::size_t bins) {
    HistogramSpec s;
    s.lo.assign(axes.size(), lo);
    s.hi.assign(axes.size(), hi);
    s.bins.assign(axes.size(), bins);
    s.axes = std::move(axes);
    return s;
  }
  /// Bins of width `width` covering [lo, hi] on each listed axis.
  static HistogramSpec with_width(std::vector<std::size_t> axes, double lo, double hi,
                                  double width) {
    return uniform(std::move(axes), lo, hi,
                   static_cast<std::size_t>(std::ceil((hi - lo) / width - 1e-9)));
  }
  void check() const {
    if (axes.empty() || lo.size() != axes.size() || hi.size() != axes.size() ||
        bins.size() != axes.size())
      throw InputError("inconsistent histogram spec");
    for (std::size_t a = 0; a < axes.size(); ++a)
      if (!(hi[a] > lo[a]) || bins[a] == 0) throw InputError("degenerate histogram axis");
  }
  std::size_t cells() const {
    std::size_t n = 1;
    for (auto b : bins) n *= b;
    return n;
  }
  bool operator==(const HistogramSpec&) const = default;
};

/// Counts per cell plus one trailing overflow cell for out-of-box samples.
class Histogram {
 public:
  Histogram() = default;
  explicit Histogram(HistogramSpec spec) : spec_(std::move(spec)) {
    spec_.check();
    counts_.assign(spec_.cells() + 1, 0.0);
  }

  const HistogramSpec& spec() const { return spec_; }
  const std::vector<double>& counts() const { return counts_; }
  double total() const { return total_; }
  std::size_t overflow_index() const { return counts_.size() - 1; }

  std::size_t cell_of(std::span<const double> row) const {
    std::size_t flat = 0;
    for (std::size_t a = 0; a < spec_.axes.size(); ++a) {
      const std::size_t ax = spec_.axes[a];
      if (ax >= row.size()) throw InputError("histogram axis out of range");
      const double u = (row[ax] - spec_.lo[a]) / (spec_.hi[a] - spec_.lo[a]);
      if (!(u >= 0.0 && u < 1.0)) return overflow_index();
      const auto i = std::min(spec_.bins[a] - 1,
                              static_cast<std::size_t>(u * double(spec_.bins[a])));
      flat = flat * spec_.bins[a] + i;
    }
    return flat;
  }
  void add(std::span<const double> row, double w = 1.0) {
    counts_[cell_of(row)] += w;
    total_ += w;
  }
  void add_all(const SampleSet& s) {
    for (std::size_t i = 0; i < s.size(); ++i) add(s.row(i));
  }
  void merge(const Histogram& o) {
    if (!(o.spec_ == spec_)) throw InputError("histogram specs differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    total_ += o.total_;
  }
  /// Cell probabilities, overflow last.
  std::vector<double> masses() const {
    if (!(total_ > 0.0)) throw InputError("empty histogram");
    std::vector<double> m(counts_);
    for (double& v : m) v /= total_;
    return m;
  }

  void write(std::ostream& os) const {
    os.write("CLHST001", 8);
    auto put = [&](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
    put(std::uint64_t{spec_.axes.size()});
    for (std::size_t a = 0; a < spec_.axes.size(); ++a) {
      put(std::uint64_t{spec_.axes[a]});
      put(spec_.lo[a]);
      put(spec_.hi[a]);
      put(std::uint64_t{spec_.bins[a]});
    }
    put(total_);
    os.write(reinterpret_cast<const char*>(counts_.data()),
             std::streamsize(sizeof(double) * counts_.size()));
    if (!os) throw IoError("failed writing histogram");
  }

 private:
  HistogramSpec spec_;
  std::vector<double> counts_;
  double total_ = 0.0;
};

/// Expected L1 distance between two independent empirical histograms of
/// n and m draws from cell probabilities p (m = 0 means the second side is
/// exact): sqrt(2/pi) sum_c sqrt(p_c (1-p_c)(1/n + 1/m)) to leading order.
/// `jensen` is the upper bound sum_c sqrt(var_c).
struct FluctuationFloor {
  double expected = 0.0;
  double jensen = 0.0;
};

inline FluctuationFloor multinomial_floor(const std::vector<double>& p, double n, double m) {
  if (!(n > 0.0)) throw InputError("sample count must be positive");
  const double inv = 1.0 / n + (m > 0.0 ? 1.0 / m : 0.0);
  FluctuationFloor f;
  for (double pc : p) f.jensen += std::sqrt(std::max(0.0, pc * (1.0 - pc)) * inv);
  f.expected = std::sqrt(2.0 / std::numbers::pi) * f.jensen;
  return f;
}

struct L1Estimate {
  double value = 0.0;
  FluctuationFloor floor;  // from pooled cell frequencies
  double excess() const { return value - floor.expected; }
};

inline L1Estimate l1_histograms(const Histogram& a, const Histogram& b) {
  if (!(a.spec() == b.spec())) throw InputError("histogram specs differ");
  const auto pa = a.masses(), pb = b.masses();
  L1Estimate r;
  std::vector<double> pooled(pa.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    r.value += std::abs(pa[i] - pb[i]);
    pooled[i] = (a.counts()[i] + b.counts()[i]) / (a.total() + b.total());
  }
  r.floor = multinomial_floor(pooled, a.total(), b.total());
  return r;
}

inline L1Estimate l1_from_samples(const SampleSet& sa, const SampleSet& sb,
                                  const HistogramSpec& spec) {
  if (sa.size() == 0 || sb.size() == 0) throw InputError("empty sample set");
  Histogram ha(spec), hb(spec);
  ha.add_all(sa);
  hb.add_all(sb);
  return l1_histograms(ha, hb);
}

// ---------------------------------------------------------------------------
// Bounded-Lipschitz distance between an empirical measure and a density,
// over test functions with max(sup|g|, Lip g) <= 1.

/// The density side as weighted atoms; `quantization` bounds |g(x) - g(atom)|
/// for x in the atom's cell (zero for clouds).
template <int D>
struct BLReference {
  std::vector<PhasePoint<D>> points;
  std::vector<double> weights;
  double quantization = 0.0;
};

template <int D>
BLReference<D> bl_reference(const GridDensity<D>& g) {
  BLReference<D> r;
  const double vol = g.cell_volume();
  double diag = 0.0;
  for (std::size_t a = 0; a < 2 * D; ++a) diag += g.spacing(a) * g.spacing(a);
  r.quantization = 0.5 * std::sqrt(diag);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.values[i] > 0.0) {
      r.points.push_back(g.center(i));
      r.weights.push_back(g.values[i] * vol);
    }
  return r;
}

template <int D>
BLReference<D> bl_reference(const CloudDensity<D>& c) {
  if (c.points.empty()) throw InputError("empty cloud");
  return BLReference<D>{c.points, c.weights, 0.0};
}

struct BLOptions {
  std::size_t dictionary_size = 1024;
  std::uint64_t seed = 0;
  /// Adds radial ramps centred at every atom of the empirical measure.
  bool atom_centered = false;
  std::size_t coupling_directions = 8;
};

struct BLBounds {
  double lower = 0.0;
  double upper = 0.0;
};

inline double clamp1(double v) { return std::clamp(v, -1.0, 1.0); }

/// Seeded dictionary of 1-Lipschitz test functions bounded by 1: directional
/// ramps clamp(<u, x> - b) and radial ramps clamp(|x - c| - r). Expectations
/// under the reference are computed once.
template <int D>
class BLDictionary {
 public:
  static constexpr std::size_t n = 2 * D;

  BLDictionary(BLReference<D> ref, const BLOptions& opt) : ref_(std::move(ref)), opt_(opt) {
    if (ref_.points.empty()) throw InputError("empty reference");
    Rng rng(splitmix64(hash_mix(opt.seed, 0xB1)));
    std::discrete_distribution<std::size_t> pick(ref_.weights.begin(), ref_.weights.end());
    std::normal_distribution<double> gauss;
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (std::size_t e = 0; e < opt.dictionary_size; ++e) {
      Entry en;
      en.radial = e % 2 == 1;
      const auto& anchor = ref_.points[pick(rng)];
      if (!en.radial) {
        double nn = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          en.v[c] = gauss(rng);
          nn += en.v[c] * en.v[c];
        }
        nn = std::sqrt(nn);
        double proj = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          en.v[c] /= nn;
          proj += en.v[c] * anchor.x[c];
        }
        en.s = proj + unit(rng);
      } else {
        const auto& other = ref_.points[pick(rng)];
        double dist = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          en.v[c] = anchor.x[c] + 0.25 * gauss(rng);
          dist += (other.x[c] - en.v[c]) * (other.x[c] - en.v[c]);
        }
        en.s = std::sqrt(dist);
      }
      en.expectation = reference_expectation(en);
      entries_.push_back(en);
    }
  }

  const BLReference<D>& reference() const { return ref_; }

  /// max over the dictionary of |mean_mu g - E_ref g|, minus the reference's
  /// quantization error, floored at 0.
  double lower(std::span<const PhasePoint<D>> mu) const {
    if (mu.empty()) throw InputError("empty empirical measure");
    double best = 0.0;
    for (const auto& en : entries_) {
      double s = 0.0;
      for (const auto& x : mu) s += eval(en, x);
      best = std::max(best, std::abs(s / double(mu.size()) - en.expectation));
    }
    if (opt_.atom_centered) {
      for (const auto& a : mu) {
        Entry en;
        en.radial = true;
        en.v = a.x;
        en.s = 1.0;
        const double e = reference_expectation(en);
        double s = 0.0;
        for (const auto& x : mu) s += eval(en, x);
        best = std::max(best, std::abs(s / double(mu.size()) - e));
      }
    }
    return std::max(0.0, best - ref_.quantization);
  }

  /// Transport cost sum pi_ij min(|x_i - y_j|, 2) of monotone couplings along
  /// projection directions, minimum over directions, plus quantization.
  double upper(std::span<const PhasePoint<D>> mu) const {
    if (mu.empty()) throw InputError("empty empirical measure");
    Rng rng(splitmix64(hash_mix(opt_.seed, 0xC0)));
    std::normal_distribution<double> gauss;
    double best = std::numeric_limits<double>::infinity();
    const std::size_t ndir = std::max<std::size_t>(1, opt_.coupling_directions);
    for (std::size_t d = 0; d < ndir; ++d) {
      std::array<double, n> u{};
      if (d < n) {
        u[d] = 1.0;
      } else {
        double nn = 0.0;
        for (auto& c : u) {
          c = gauss(rng);
          nn += c * c;
        }
        for (auto& c : u) c /= std::sqrt(nn);
      }
      best = std::min(best, coupling_cost(mu, u));
    }
    return std::min(2.0, best + ref_.quantization);
  }

  BLBounds bounds(std::span<const PhasePoint<D>> mu) const {
    BLBounds b{lower(mu), upper(mu)};
    return b;
  }

 private:
  struct Entry {
    bool radial = false;
    std::array<double, n> v{};  // direction or centre
    double s = 0.0;             // offset or radius
    double expectation = 0.0;
  };

  static double eval(const Entry& en, const PhasePoint<D>& x) {
    if (!en.radial) {
      double p = 0.0;
      for (std::size_t c = 0; c < n; ++c) p += en.v[c] * x.x[c];
      return clamp1(p - en.s);
    }
    double d2 = 0.0;
    for (std::size_t c = 0; c < n; ++c) d2 += (x.x[c] - en.v[c]) * (x.x[c] - en.v[c]);
    return clamp1(std::sqrt(d2) - en.s);
  }

  double reference_expectation(const Entry& en) const {
    double s = 0.0, w = 0.0;
    for (std::size_t i = 0; i < ref_.points.size(); ++i) {
      s += ref_.weights[i] * eval(en, ref_.points[i]);
      w += ref_.weights[i];
    }
    return s / w;
  }

  double coupling_cost(std::span<const PhasePoint<D>> mu, const std::array<double, n>& u) const {
    auto proj = [&](const PhasePoint<D>& x) {
      double p = 0.0;
      for (std::size_t c = 0; c < n; ++c) p += u[c] * x.x[c];
      return p;
    };
    std::vector<std::pair<double, std::size_t>> a(mu.size()), b(ref_.points.size());
    for (std::size_t i = 0; i < mu.size(); ++i) a[i] = {proj(mu[i]), i};
    double wtot = 0.0;
    for (std::size_t j = 0; j < b.size(); ++j) {
      b[j] = {proj(ref_.points[j]), j};
      wtot += ref_.weights[j];
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double ma = 1.0 / double(mu.size());
    std::size_t i = 0, j = 0;
    double ra = ma, rb = ref_.weights[b[0].second] / wtot, cost = 0.0;
    while (i < a.size() && j < b.size()) {
      const double m = std::min(ra, rb);
      if (m > 0.0) {
        const auto& x = mu[a[i].second];
        const auto& y = ref_.points[b[j].second];
        cost += m * std::min(2.0, (x - y).norm());
      }
      ra -= m;
      rb -= m;
      if (ra <= 1e-15 && i < a.size()) {
        if (++i < a.size()) ra = ma;
      }
      if (rb <= 1e-15 && j < b.size()) {
        if (++j < b.size()) rb = ref_.weights[b[j].second] / wtot;
      }
    }
    return cost;
  }

  BLReference<D> ref_;
  BLOptions opt_;
  std::vector<Entry> entries_;
};

template <int D>
BLBounds bounded_lipschitz_distance(std::span<const PhasePoint<D>> mu, const DensityRep<D>& f,
                                    const BLOptions& opt = {}) {
  auto ref = std::visit([](const auto& r) { return bl_reference<D>(r); }, f);
  BLDictionary<D> dict(std::move(ref), opt);
  return dict.bounds(mu);
}

// ---------------------------------------------------------------------------
// Weighted Lipschitz norm
//   sup_{|a| <= |b|} (1 + |a|)^10 |g(a) - g(b)| / |a - b|.

using Evaluable = std::function<double(std::span<const double>)>;

struct WeightedNormOptions {
  double box = 8.0;               // search box [-box, box]^n
  std::size_t base_points = 4096; // low-discrepancy anchors at the finest level
  std::size_t pairs_per_point = 6;
  std::size_t refine_pairs = 8;   // best pairs handed to compass search
  std::size_t refine_iters = 400;
  std::uint64_t seed = 0;
};

struct WeightedNormEstimate {
  double value = 0.0;   // lower estimate of the supremum
  double coarse = 0.0;  // same search at a quarter of the anchors
  bool converged = false;
  std::vector<double> a, b;
};

namespace detail {

inline double vnorm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double weighted_quotient(const Evaluable& g, std::span<const double> a,
                                std::span<const double> b) {
  double d = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
  d = std::sqrt(d);
  if (!(d > 1e-13)) return 0.0;
  const double w = std::pow(1.0 + std::min(vnorm(a), vnorm(b)), 10);
  return w * std::abs(g(a) - g(b)) / d;
}

struct PairCandidate {
  double value;
  std::vector<double> a, b;
};

inline std::vector<PairCandidate> wln_search(const Evaluable& g, std::size_t dim,
                                             std::size_t points, const WeightedNormOptions& opt) {
  Rng rng(splitmix64(hash_mix(opt.seed, points)));
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double spacing = 2.0 * opt.box / std::pow(double(points), 1.0 / double(dim));
  std::vector<PairCandidate> best;
  auto consider = [&](const std::vector<double>& a, const std::vector<double>& b) {
    const double v = weighted_quotient(g, a, b);
    if (best.size() < opt.refine_pairs || v > best.back().value) {
      best.push_back({v, a, b});
      std::sort(best.begin(), best.end(),
                [](const auto& x, const auto& y) { return x.value > y.value; });
      if (best.size() > opt.refine_pairs) best.pop_back();
    }
  };
  std::vector<double> a(dim), b(dim), u(dim);
  for (std::size_t i = 0; i <= points; ++i) {
    if (i == 0) {
      std::fill(a.begin(), a.end(), 0.0);
    } else {
      for (std::size_t c = 0; c < dim; ++c) a[c] = opt.box * (2.0 * halton(i, c) - 1.0);
    }
    const double na = vnorm(a);
    for (std::size_t k = 0; k < opt.pairs_per_point; ++k) {
      // alternate radial-outward, random local and random far partners
      if (k == 0 && na > 0.0) {
        for (std::size_t c = 0; c < dim; ++c) u[c] = a[c] / na;
      } else {
        double nu = 0.0;
        for (auto& c : u) {
          c = gauss(rng);
          nu += c * c;
        }
        for (auto& c : u) c /= std::sqrt(nu);
      }
      const double step = k + 1 == opt.pairs_per_point ? opt.box * unit(rng)
                                                       : spacing * std::pow(0.25, double(k % 3));
      for (std::size_t c = 0; c < dim; ++c) b[c] = a[c] + step * u[c];
      consider(a, b);
    }
  }
  return best;
}

inline PairCandidate compass_refine(const Evaluable& g, PairCandidate p, double step,
                                    std::size_t iters) {
  const std::size_t dim = p.a.size();
  std::vector<double> z(2 * dim);
  std::copy(p.a.begin(), p.a.end(), z.begin());
  std::copy(p.b.begin(), p.b.end(), z.begin() + std::ptrdiff_t(dim));
  auto obj = [&](const std::vector<double>& v) {
    return weighted_quotient(g, std::span<const double>(v.data(), dim),
                             std::span<const double>(v.data() + dim, dim));
  };
  double cur = obj(z);
  for (std::size_t it = 0; it < iters && step > 1e-9; ++it) {
    bool improved = false;
    for (std::size_t c = 0; c < z.size(); ++c) {
      for (double sgn : {1.0, -1.0}) {
        z[c] += sgn * step;
        const double v = obj(z);
        if (v > cur) {
          cur = v;
          improved = true;
          break;
        }
        z[c] -= sgn * step;
      }
    }
    if (!improved) step *= 0.5;
  }
  p.value = cur;
  p.a.assign(z.begin(), z.begin() + std::ptrdiff_t(dim));
  p.b.assign(z.begin() + std::ptrdiff_t(dim), z.end());
  if (vnorm(p.a) > vnorm(p.b)) std::swap(p.a, p.b);
  return p;
}

inline PairCandidate wln_level(const Evaluable& g, std::size_t dim, std::size_t points,
                               const WeightedNormOptions& opt) {
  auto cands = wln_search(g, dim, points, opt);
  const double spacing = 2.0 * opt.box / std::pow(double(points), 1.0 / double(dim));
  PairCandidate best{0.0, std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
  for (auto& c : cands) {
    auto r = compass_refine(g, c, 0.25 * spacing, opt.refine_iters);
    if (r.value > best.value) best = std::move(r);
  }
  return best;
}

}  // namespace detail

/// Lower estimate of the weighted Lipschitz norm of g on R^dim. `converged`
/// reports agreement within 5% between the full search and a search with a
/// quarter of the anchors.
inline WeightedNormEstimate weighted_lipschitz_norm(const Evaluable& g, std::size_t dim,
                                                    const WeightedNormOptions& opt = {}) {
  if (dim == 0) throw InputError("dimension must be positive");
  WeightedNormEstimate est;
  const auto coarse = detail::wln_level(g, dim, std::max<std::size_t>(4, opt.base_points / 4), opt);
  const auto fine = detail::wln_level(g, dim, std::max<std::size_t>(4, opt.base_points), opt);
  const auto& best = fine.value >= coarse.value ? fine : coarse;
  est.value = best.value;
  est.coarse = coarse.value;
  est.a = best.a;
  est.b = best.b;
  est.converged = std::abs(fine.value - coarse.value) <= 0.05 * std::max(fine.value, 1e-300) ||
                  (fine.value == 0.0 && coarse.value == 0.0);
  return est;
}

template <int D>
Evaluable evaluable(const GridDensity<D>& g) {
  return [&g](std::span<const double> x) {
    PhasePoint<D> p;
    std::copy(x.begin(), x.end(), p.x.begin());
    return g.evaluate(p);
  };
}

// ---------------------------------------------------------------------------
// Shake: inf over |e| <= 1 of g(x + eps e (1 + |x|)).

struct ShakeOptions {
  std::size_t directions = 48;
  std::size_t radii = 3;  // sampled shells |e| = 1, 2/3, 1/3 (plus e = 0)
  std::size_t descent_iters = 60;
  std::uint64_t seed = 0;
};

/// Upper estimate of the infimum.
inline double shake_value(const Evaluable& g, std::span<const double> x, double eps,
                          const ShakeOptions& opt = {}) {
  if (!(eps >= 0.0)) throw InputError("eps must be >= 0");
  const std::size_t n = x.size();
  const double g0 = g(x);
  if (eps == 0.0) return g0;
  const double scale = eps * (1.0 + detail::vnorm(x));
  std::vector<double> y(n), e(n), best_e(n, 0.0);
  auto at = [&](const std::vector<double>& ee) {
    for (std::size_t c = 0; c < n; ++c) y[c] = x[c] + scale * ee[c];
    return g(y);
  };
  double best = g0;
  Rng rng(splitmix64(opt.seed));
  std::normal_distribution<double> gauss;
  const double nx = detail::vnorm(x);
  for (std::size_t d = 0; d < opt.directions + 2 * n + 2; ++d) {
    if (d < 2 * n) {
      std::fill(e.begin(), e.end(), 0.0);
      e[d / 2] = d % 2 ? -1.0 : 1.0;
    } else if (d < 2 * n + 2 && nx > 0.0) {
      for (std::size_t c = 0; c < n; ++c) e[c] = (d % 2 ? -1.0 : 1.0) * x[c] / nx;
    } else {
      double ne = 0.0;
      for (auto& c : e) {
        c = gauss(rng);
        ne += c * c;
      }
      for (auto& c : e) c /= std::sqrt(ne);
    }
    for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.radii); ++r) {
      const double rad = 1.0 - double(r) / double(std::max<std::size_t>(1, opt.radii));
      std::vector<double> er(e);
      for (auto& c : er) c *= rad;
      const double v = at(er);
      if (v < best) {
        best = v;
        best_e = er;
      }
    }
  }
  // compass descent on e, projected onto the unit ball
  double step = 0.25;
  std::vector<double> cur = best_e;
  for (std::size_t it = 0; it < opt.descent_iters && step > 1e-6; ++it) {
    bool improved = false;
    for (std::size_t c = 0; c < n && !improved; ++c)
      for (double sgn : {1.0, -1.0}) {
        std::vector<double> t(cur);
        t[c] += sgn * step;
        const double nt = detail::vnorm(t);
        if (nt > 1.0)
          for (auto& v : t) v /= nt;
        const double v = at(t);
        if (v < best) {
          best = v;
          cur = t;
          improved = true;
          break;
        }
      }
    if (!improved) step *= 0.5;
  }
  return best;
}

inline Evaluable shake(Evaluable g, double eps, ShakeOptions opt = {}) {
  if (!(eps >= 0.0)) throw InputError("eps must be >= 0");
  return [g = std::move(g), eps, opt](std::span<const double> x) {
    return shake_value(g, x, eps, opt);
  };
}

/// Shaken g sampled at the cell centres of `layout` and divided by its mass.
template <int D>
GridDensity<D> shake_normalized(const Evaluable& g, double eps, const GridDensity<D>& layout,
                                const ShakeOptions& opt = {}) {
  GridDensity<D> out(layout.lo, layout.hi, layout.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto c = layout.center(i);
    out.values[i] = shake_value(g, c.x, eps, opt);
  }
  const double m = out.mass();
  if (!(m > 0.0)) throw DegenerateInputError("shaken density has zero mass");
  for (double& v : out.values) v /= m;
  return out;
}

/// 2^10 times the integral of (1 + |x|)^-9 over R^n, n < 9: the constant
/// relating the L1 effect of a shake to the weighted Lipschitz norm.
inline double shake_constant(std::size_t n) {
  if (n == 0 || n >= 9) throw InputError("dimension must lie in 1..8");
  const double dn = double(n);
  const double sphere = 2.0 * std::pow(std::numbers::pi, dn / 2.0) / std::tgamma(dn / 2.0);
  const double beta = std::tgamma(dn) * std::tgamma(9.0 - dn) / std::tgamma(9.0);
  return 1024.0 * sphere * beta;
}

// ---------------------------------------------------------------------------
// s-marginals of pooled microscopic runs.

struct MarginalOptions {
  /// Pool every ordering of each s-subset (true) or only increasing index
  /// tuples (false).
  bool symmetrize = true;
  /// Cap on tuples taken per run; beyond it tuples are drawn at random.
  std::size_t max_tuples_per_run = 200000;
  std::uint64_t seed = 0;
};

struct MarginalEstimate {
  std::size_t s = 1;
  Histogram histogram;
  std::size_t samples = 0;
};

template <int D>
MarginalEstimate estimate_marginal(const std::vector<Configuration<D>>& runs, std::size_t s,
                                   const HistogramSpec& spec, const MarginalOptions& opt = {}) {
  if (runs.empty()) throw InputError("no runs");
  const std::size_t n = runs.front().size();
  for (const auto& r : runs)
    if (r.size() != n) throw InputError("runs differ in particle number");
  if (s == 0 || s > n) throw InputError("marginal order must satisfy 1 <= s <= N");
  for (auto ax : spec.axes)
    if (ax >= s * 2 * D) throw InputError("histogram axis exceeds marginal dimension");

  MarginalEstimate est{s, Histogram(spec), 0};
  // number of tuples per run
  double count = 1.0;
  for (std::size_t i = 0; i < s; ++i) count *= double(n - i);
  if (!opt.symmetrize) {
    for (std::size_t i = 1; i <= s; ++i) count /= double(i);
  }
  const bool exhaustive = count <= double(opt.max_tuples_per_run);
  std::vector<double> row(s * 2 * D);
  std::vector<std::size_t> idx(s);
  auto emit = [&](const Configuration<D>& X) {
    for (std::size_t a = 0; a < s; ++a)
      std::copy(X[idx[a]].x.begin(), X[idx[a]].x.end(), row.begin() + std::ptrdiff_t(a * 2 * D));
    est.histogram.add(row);
    ++est.samples;
  };
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& X = runs[r];
    if (exhaustive) {
      // odometer over injective tuples (ordered) or increasing tuples
      std::vector<std::size_t> t(s, 0);
      std::function<void(std::size_t)> rec = [&](std::size_t pos) {
        if (pos == s) {
          idx = t;
          emit(X);
          return;
        }
        const std::size_t start = (!opt.symmetrize && pos > 0) ? t[pos - 1] + 1 : 0;
        for (std::size_t i = start; i < n; ++i) {
          if (opt.symmetrize &&
              std::find(t.begin(), t.begin() + std::ptrdiff_t(pos), i) != t.begin() + std::ptrdiff_t(pos))
            continue;
          t[pos] = i;
          rec(pos + 1);
        }
      };
      rec(0);
    } else {
      Rng rng(splitmix64(hash_mix(opt.seed, r)));
      std::vector<std::size_t> perm(n), swapped(s);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t k = 0; k < opt.max_tuples_per_run; ++k) {
        for (std::size_t a = 0; a < s; ++a) {
          std::uniform_int_distribution<std::size_t> u(a, n - 1);
          swapped[a] = u(rng);
          std::swap(perm[a], perm[swapped[a]]);
        }
        std::copy(perm.begin(), perm.begin() + std::ptrdiff_t(s), idx.begin());
        for (std::size_t a = s; a-- > 0;) std::swap(perm[a], perm[swapped[a]]);
        if (!opt.symmetrize) std::sort(idx.begin(), idx.end());
        emit(X);
      }
    }
  }
  return est;
}

}  // namespace chaoslab
