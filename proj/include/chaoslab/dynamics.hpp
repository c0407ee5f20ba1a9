#pragma once

// Microscopic N-particle dynamics: the vector field V_t assembled from a
// d-body kernel, the explicit one-step map Psi, a classical RK4 reference
// integrator and trajectory serialization.

#include <chaoslab/core.hpp>
#include <chaoslab/kernels.hpp>
#include <chaoslab/random.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace chaoslab {

/// Prefactor convention for V_t. `Binomial` divides by C(N-1, d-1) and sums
/// over partner subsets excluding the particle itself. `IncludeSelf` (pair
/// kernels only) divides by N and sums over all partners including j = i.
enum class Normalization { Binomial, IncludeSelf };

enum class Method : std::uint32_t { Psi = 0, RK4 = 1 };

inline const char* method_name(Method m) { return m == Method::Psi ? "psi" : "rk4"; }

namespace detail {

template <int D, class K>
void check_arity(std::size_t n, const K& k, Normalization norm) {
  if (k.arity() < 2) throw ArityError("kernel arity must be >= 2");
  if (n < static_cast<std::size_t>(k.arity()))
    throw ArityError("configuration has " + std::to_string(n) +
                     " particles, kernel arity is " + std::to_string(k.arity()));
  if (norm == Normalization::IncludeSelf && k.arity() != 2)
    throw ConfigError("IncludeSelf normalization is defined for pair kernels only");
}

template <int D, class K>
std::vector<PhasePoint<D>> assemble_generic(std::span<const PhasePoint<D>> X,
                                            const K& k, double t,
                                            Normalization norm) {
  using Point = PhasePoint<D>;
  const std::size_t n = X.size();
  const int d = k.arity();
  std::vector<Point> out(n);
  std::vector<Point> args(static_cast<std::size_t>(d));

  if (norm == Normalization::IncludeSelf) {
    for (std::size_t j = 0; j < n; ++j) {
      Point acc;
      args[0] = X[j];
      for (std::size_t i = 0; i < n; ++i) {
        args[1] = X[i];
        const Point v = k(t, std::span<const Point>(args));
        if (!v.finite())
          throw NumericError("non-finite kernel output", {j, i});
        acc += v;
      }
      out[j] = acc * (1.0 / static_cast<double>(n));
    }
    return out;
  }

  const std::size_t m = static_cast<std::size_t>(d - 1);
  const double scale = 1.0 / binomial(n - 1, m);
  std::vector<std::size_t> comb(m);
  for (std::size_t j = 0; j < n; ++j) {
    Point acc;
    args[0] = X[j];
    for (std::size_t a = 0; a < m; ++a) comb[a] = a;
    while (true) {
      for (std::size_t a = 0; a < m; ++a) {
        const std::size_t idx = comb[a] < j ? comb[a] : comb[a] + 1;
        args[a + 1] = X[idx];
      }
      const Point v = k(t, std::span<const Point>(args));
      if (!v.finite()) {
        std::vector<std::size_t> ids{j};
        for (std::size_t a = 0; a < m; ++a) ids.push_back(comb[a] < j ? comb[a] : comb[a] + 1);
        throw NumericError("non-finite kernel output", ids);
      }
      acc += v;
      // next (d-1)-subset of {0..n-2}
      std::size_t a = m;
      while (a > 0 && comb[a - 1] == n - 1 - m + (a - 1)) --a;
      if (a == 0) break;
      ++comb[a - 1];
      for (std::size_t b = a; b < m; ++b) comb[b] = comb[b - 1] + 1;
    }
    out[j] = acc * scale;
  }
  return out;
}

template <int D, class K>
std::vector<PhasePoint<D>> assemble_pair(std::span<const PhasePoint<D>> X, const K& k,
                                         Normalization norm) {
  using Point = PhasePoint<D>;
  const std::size_t n = X.size();
  std::vector<std::array<double, D>> force(n);
  std::array<double, D> dq;
  if (k.odd_pair_force()) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        for (int c = 0; c < D; ++c) dq[c] = X[i].q(c) - X[j].q(c);
        const auto f = k.pair_force(dq);
        for (int c = 0; c < D; ++c) {
          force[i][c] += f[c];
          force[j][c] -= f[c];
        }
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        for (int c = 0; c < D; ++c) dq[c] = X[i].q(c) - X[j].q(c);
        const auto f = k.pair_force(dq);
        for (int c = 0; c < D; ++c) force[i][c] += f[c];
      }
    }
  }
  double scale = 1.0 / static_cast<double>(n - 1);
  std::array<double, D> self{};
  if (norm == Normalization::IncludeSelf) {
    scale = 1.0 / static_cast<double>(n);
    self = k.pair_force(std::array<double, D>{});
  }
  std::vector<Point> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < D; ++c) {
      out[i].q(c) = X[i].p(c);
      out[i].p(c) = (force[i][c] + self[c]) * scale;
    }
    if (!out[i].finite()) throw NumericError("non-finite kernel output", {i});
  }
  return out;
}

}  // namespace detail

/// (V_t(X))_j: the normalized sum of v_t(x_j, x_{j_2}, ..., x_{j_d}) over the
/// (d-1)-subsets of the other particles. Pair-force kernels take a faster
/// route through `pair_force` that yields the same field up to rounding.
template <int D, InteractionKernel K>
std::vector<PhasePoint<D>> assemble_vector_field(std::span<const PhasePoint<D>> X,
                                                 const K& k, double t,
                                                 Normalization norm = Normalization::Binomial) {
  detail::check_arity<D>(X.size(), k, norm);
  if constexpr (PairForceKernel<K>) {
    return detail::assemble_pair<D>(X, k, norm);
  } else {
    return detail::assemble_generic<D>(X, k, t, norm);
  }
}

/// Same field through the direct subset enumeration, bypassing any fast path.
template <int D, InteractionKernel K>
std::vector<PhasePoint<D>> assemble_vector_field_direct(
    std::span<const PhasePoint<D>> X, const K& k, double t,
    Normalization norm = Normalization::Binomial) {
  detail::check_arity<D>(X.size(), k, norm);
  return detail::assemble_generic<D>(X, k, t, norm);
}

/// Psi_{t+dt,t}(X) = X + dt * V_t(X).
template <int D, InteractionKernel K>
Configuration<D> step_psi(std::span<const PhasePoint<D>> X, const K& k, double t,
                          double dt, Normalization norm = Normalization::Binomial) {
  if (!std::isfinite(dt)) throw InputError("step size must be finite");
  if (dt == 0.0) {
    detail::check_arity<D>(X.size(), k, norm);
    return Configuration<D>(X.begin(), X.end());
  }
  auto V = assemble_vector_field<D>(X, k, t, norm);
  Configuration<D> out(X.begin(), X.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += dt * V[i];
  return out;
}

template <int D, InteractionKernel K>
Configuration<D> step_rk4(std::span<const PhasePoint<D>> X, const K& k, double t,
                          double dt, Normalization norm = Normalization::Binomial) {
  if (!std::isfinite(dt)) throw InputError("step size must be finite");
  const std::size_t n = X.size();
  Configuration<D> tmp(n);
  auto k1 = assemble_vector_field<D>(X, k, t, norm);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = X[i] + (0.5 * dt) * k1[i];
  auto k2 = assemble_vector_field<D>(std::span<const PhasePoint<D>>(tmp), k, t + 0.5 * dt, norm);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = X[i] + (0.5 * dt) * k2[i];
  auto k3 = assemble_vector_field<D>(std::span<const PhasePoint<D>>(tmp), k, t + 0.5 * dt, norm);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = X[i] + dt * k3[i];
  auto k4 = assemble_vector_field<D>(std::span<const PhasePoint<D>>(tmp), k, t + dt, norm);
  Configuration<D> out(X.begin(), X.end());
  for (std::size_t i = 0; i < n; ++i)
    out[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

struct SolverSettings {
  double dt = 1e-2;
  Method method = Method::RK4;
  Normalization normalization = Normalization::Binomial;
  double t_start = 0.0;
  /// Record every n-th step; the final state is always recorded.
  std::size_t record_every = 1;
};

template <int D>
struct Trajectory {
  std::vector<double> times;
  std::vector<Configuration<D>> states;
  Method method = Method::RK4;
  double dt = 0.0;
  int arity = 2;
};

/// Composes one-step maps from settings.t_start to t_end (either direction).
/// The last step is shortened when (t_end - t_start) is not a multiple of dt.
template <int D, InteractionKernel K>
Trajectory<D> evolve_micro(const Configuration<D>& X0, const K& k, double t_end,
                           const SolverSettings& cfg) {
  if (!(cfg.dt > 0.0) || !std::isfinite(cfg.dt)) throw InputError("dt must be positive");
  if (!std::isfinite(t_end)) throw InputError("t_end must be finite");
  for (const auto& x : X0)
    if (!x.finite()) throw NumericError("non-finite initial state", {}, cfg.t_start);
  const double span_t = t_end - cfg.t_start;
  const double dir = span_t >= 0 ? 1.0 : -1.0;
  const auto steps = static_cast<std::size_t>(std::ceil(std::abs(span_t) / cfg.dt - 1e-9));
  const std::size_t every = std::max<std::size_t>(1, cfg.record_every);

  Trajectory<D> tr;
  tr.method = cfg.method;
  tr.dt = cfg.dt;
  tr.arity = k.arity();
  tr.times.push_back(cfg.t_start);
  tr.states.push_back(X0);

  Configuration<D> X = X0;
  double t = cfg.t_start;
  for (std::size_t s = 0; s < steps; ++s) {
    const double t_next = (s + 1 == steps) ? t_end : cfg.t_start + dir * cfg.dt * double(s + 1);
    const double h = t_next - t;
    Configuration<D> Y;
    try {
      Y = cfg.method == Method::Psi
              ? step_psi<D>(std::span<const PhasePoint<D>>(X), k, t, h, cfg.normalization)
              : step_rk4<D>(std::span<const PhasePoint<D>>(X), k, t, h, cfg.normalization);
    } catch (const NumericError& e) {
      throw NumericError(e.what(), e.indices, t);
    }
    for (const auto& y : Y)
      if (!y.finite()) throw NumericError("non-finite state", {}, t);
    X = std::move(Y);
    t = t_next;
    if ((s + 1) % every == 0 || s + 1 == steps) {
      tr.times.push_back(t);
      tr.states.push_back(X);
    }
  }
  return tr;
}

/// RK4 flow map from t0 to t1 with step at most dt; the stand-in for the exact
/// flow Phi^N in tests and experiments.
template <int D, InteractionKernel K>
Configuration<D> flow_rk4(const Configuration<D>& X, const K& k, double t0, double t1,
                          double dt, Normalization norm = Normalization::Binomial) {
  SolverSettings cfg;
  cfg.dt = dt;
  cfg.t_start = t0;
  cfg.normalization = norm;
  cfg.record_every = std::numeric_limits<std::size_t>::max();
  auto tr = evolve_micro<D>(X, k, t1, cfg);
  return tr.states.back();
}

/// Sum p^2/2 + (c/2) sum_{i,j} A(q_i - q_j) with c matching the normalization
/// (pairs i != j for Binomial, all pairs for IncludeSelf).
template <int D, class Potential>
double newtonian_energy(const Configuration<D>& X, const Potential& a,
                        Normalization norm = Normalization::Binomial) {
  const std::size_t n = X.size();
  double kin = 0.0, pot = 0.0;
  std::array<double, D> dq;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < D; ++c) kin += 0.5 * X[i].p(c) * X[i].p(c);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j && norm == Normalization::Binomial) continue;
      for (int c = 0; c < D; ++c) dq[c] = X[i].q(c) - X[j].q(c);
      pot += a.value(dq);
    }
  }
  const double c = norm == Normalization::Binomial ? 1.0 / double(n - 1) : 1.0 / double(n);
  return kin + 0.5 * c * pot;
}

struct LipschitzReport {
  double declared = 0.0;
  double max_lipschitz_ratio = 0.0;  // |v_t(X) - v_s(Y)| / (|X - Y| + |t - s|)
  double max_growth_ratio = 0.0;     // |v_t(X)| / (1 + |x_1|)
  std::size_t probes = 0;
  bool violated = false;
};

/// Samples probe pairs in [lo, hi]^{2Dd} x [0, 1]. Half of the pairs are far
/// apart, half are close (log-uniform separation in [1e-4, 1]) to resolve the
/// local difference quotient.
template <int D, InteractionKernel K>
LipschitzReport check_kernel_lipschitz(const K& k, std::size_t probes, std::uint64_t seed,
                                       double lo = -5.0, double hi = 5.0) {
  if (probes < 1) throw InputError("probes must be >= 1");
  using Point = PhasePoint<D>;
  const auto d = static_cast<std::size_t>(k.arity());
  Rng rng(splitmix64(seed));
  std::uniform_real_distribution<double> box(lo, hi), unit(0.0, 1.0), logsep(-4.0, 0.0);
  std::normal_distribution<double> gauss;
  std::vector<Point> X(d), Y(d);

  LipschitzReport rep;
  rep.declared = k.lipschitz();
  rep.probes = probes;
  for (std::size_t n = 0; n < probes; ++n) {
    for (auto& x : X)
      for (auto& c : x.x) c = box(rng);
    double t = unit(rng), s = t;
    if (n % 2 == 0) {
      for (auto& y : Y)
        for (auto& c : y.x) c = box(rng);
      s = unit(rng);
    } else {
      const double sep = std::pow(10.0, logsep(rng));
      double nn = 0.0;
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t c = 0; c < Point::size; ++c) {
          Y[a].x[c] = gauss(rng);
          nn += Y[a].x[c] * Y[a].x[c];
        }
      nn = std::sqrt(nn);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t c = 0; c < Point::size; ++c)
          Y[a].x[c] = X[a].x[c] + sep * Y[a].x[c] / nn;
      if (n % 4 == 3) s = t + sep * (unit(rng) - 0.5);
    }
    const Point vx = k(t, std::span<const Point>(X));
    const Point vy = k(s, std::span<const Point>(Y));
    double dx = 0.0;
    for (std::size_t a = 0; a < d; ++a) dx += (X[a] - Y[a]).squared_norm();
    const double denom = std::sqrt(dx) + std::abs(t - s);
    if (denom > 0.0)
      rep.max_lipschitz_ratio = std::max(rep.max_lipschitz_ratio, (vx - vy).norm() / denom);
    rep.max_growth_ratio = std::max(rep.max_growth_ratio, vx.norm() / (1.0 + X[0].norm()));
  }
  rep.violated = rep.max_lipschitz_ratio > rep.declared || rep.max_growth_ratio > rep.declared;
  return rep;
}

// ---------------------------------------------------------------------------
// Trajectory serialization.
//
// CSV: a comment header "# N=..,d=..,D=..,dt=..,method=.." then a column
// header and one row per time stamp: t followed by the 2DN coordinates
// (particle-major, q before p).
//
// Binary (little-endian): "CLTRJ001", u64 N, u64 d, u64 D, f64 dt, u32 method,
// u32 reserved, u64 rows, then rows of (t, 2DN doubles).

template <int D>
void write_trajectory_csv(std::ostream& os, const Trajectory<D>& tr) {
  const std::size_t n = tr.states.empty() ? 0 : tr.states.front().size();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", tr.dt);
  os << "# N=" << n << ",d=" << tr.arity << ",D=" << D << ",dt=" << buf
     << ",method=" << method_name(tr.method) << "\n";
  os << "t";
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 2 * D; ++c)
      os << ',' << (c < D ? "q" : "p") << (c % D) << '_' << i;
  os << "\n";
  for (std::size_t r = 0; r < tr.times.size(); ++r) {
    std::snprintf(buf, sizeof buf, "%.17g", tr.times[r]);
    os << buf;
    for (const auto& x : tr.states[r])
      for (double v : x.x) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << ',' << buf;
      }
    os << "\n";
  }
}

namespace detail {
static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated stream");
  return v;
}
}  // namespace detail

template <int D>
void write_trajectory_binary(std::ostream& os, const Trajectory<D>& tr) {
  const std::uint64_t n = tr.states.empty() ? 0 : tr.states.front().size();
  os.write("CLTRJ001", 8);
  detail::put<std::uint64_t>(os, n);
  detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(tr.arity));
  detail::put<std::uint64_t>(os, D);
  detail::put<double>(os, tr.dt);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tr.method));
  detail::put<std::uint32_t>(os, 0);
  detail::put<std::uint64_t>(os, tr.times.size());
  for (std::size_t r = 0; r < tr.times.size(); ++r) {
    detail::put<double>(os, tr.times[r]);
    for (const auto& x : tr.states[r])
      os.write(reinterpret_cast<const char*>(x.x.data()), sizeof(double) * 2 * D);
  }
  if (!os) throw IoError("failed writing trajectory");
}

template <int D>
Trajectory<D> read_trajectory_binary(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "CLTRJ001", 8) != 0)
    throw IoError("not a trajectory file");
  Trajectory<D> tr;
  const auto n = detail::get<std::uint64_t>(is);
  tr.arity = static_cast<int>(detail::get<std::uint64_t>(is));
  if (detail::get<std::uint64_t>(is) != static_cast<std::uint64_t>(D))
    throw IoError("trajectory spatial dimension mismatch");
  tr.dt = detail::get<double>(is);
  tr.method = static_cast<Method>(detail::get<std::uint32_t>(is));
  detail::get<std::uint32_t>(is);
  const auto rows = detail::get<std::uint64_t>(is);
  for (std::uint64_t r = 0; r < rows; ++r) {
    tr.times.push_back(detail::get<double>(is));
    Configuration<D> X(n);
    for (auto& x : X)
      if (!is.read(reinterpret_cast<char*>(x.x.data()), sizeof(double) * 2 * D))
        throw IoError("truncated trajectory");
    tr.states.push_back(std::move(X));
  }
  return tr;
}

}  // namespace chaoslab
