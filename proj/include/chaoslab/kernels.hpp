#pragma once

// d-body interaction kernels v_t(x_1, ..., x_d) and pair potentials.
//
// A kernel type K provides
//   using Point = PhasePoint<D>;
//   int arity() const;            // d >= 2
//   double lipschitz() const;     // declared constant L
//   bool symmetric_tail() const;  // symmetric in arguments 2..d
//   Point operator()(double t, std::span<const Point> args) const;
// Newtonian pair kernels additionally expose `pair_force(dq)` so callers can
// work with the force alone.

#include <chaoslab/core.hpp>

#include <cmath>
#include <concepts>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>

namespace chaoslab {

template <class K>
concept InteractionKernel = requires(const K& k, double t,
                                     std::span<const typename K::Point> args) {
  { k.arity() } -> std::convertible_to<int>;
  { k.lipschitz() } -> std::convertible_to<double>;
  { k.symmetric_tail() } -> std::convertible_to<bool>;
  { k(t, args) } -> std::same_as<typename K::Point>;
};

template <class K>
concept PairForceKernel = InteractionKernel<K> && requires(
    const K& k, const std::array<double, K::Point::spatial_dim>& dq) {
  { k.pair_force(dq) } -> std::same_as<std::array<double, K::Point::spatial_dim>>;
  { k.odd_pair_force() } -> std::convertible_to<bool>;
};

/// v = (p_1, 0): free streaming, no interaction.
template <int D>
struct FreeKernel {
  using Point = PhasePoint<D>;
  int d = 2;

  int arity() const { return d; }
  double lipschitz() const { return 1.0; }
  bool symmetric_tail() const { return true; }
  bool odd_pair_force() const { return true; }
  std::array<double, D> pair_force(const std::array<double, D>&) const { return {}; }
  Point operator()(double, std::span<const Point> args) const {
    Point r;
    for (int i = 0; i < D; ++i) r.q(i) = args[0].p(i);
    return r;
  }
};

/// v = 0.
template <int D>
struct ZeroKernel {
  using Point = PhasePoint<D>;
  int d = 2;

  int arity() const { return d; }
  double lipschitz() const { return 1.0; }
  bool symmetric_tail() const { return true; }
  Point operator()(double, std::span<const Point>) const { return Point{}; }
};

/// A(q) = amplitude * exp(-|q|^2 / width^2).
template <int D>
struct GaussianBump {
  double amplitude = 1.0;
  double width = 1.0;

  double value(const std::array<double, D>& q) const {
    double r2 = 0.0;
    for (double v : q) r2 += v * v;
    return amplitude * std::exp(-r2 / (width * width));
  }
  std::array<double, D> gradient(const std::array<double, D>& q) const {
    double r2 = 0.0;
    for (double v : q) r2 += v * v;
    const double w2 = width * width;
    const double s = -2.0 * amplitude / w2 * std::exp(-r2 / w2);
    std::array<double, D> g;
    for (int i = 0; i < D; ++i) g[i] = s * q[i];
    return g;
  }
  // sup |grad A| is attained at |q| = width / sqrt(2).
  std::optional<double> gradient_bound() const {
    return std::abs(amplitude) * std::sqrt(2.0) / width * std::exp(-0.5);
  }
  // Largest Hessian eigenvalue magnitude, attained at the origin.
  std::optional<double> gradient_lipschitz() const {
    return 2.0 * std::abs(amplitude) / (width * width);
  }
  bool even() const { return true; }
};

template <int D>
struct ConstantPotential {
  double level = 0.0;

  double value(const std::array<double, D>&) const { return level; }
  std::array<double, D> gradient(const std::array<double, D>&) const { return {}; }
  std::optional<double> gradient_bound() const { return 0.0; }
  std::optional<double> gradient_lipschitz() const { return 0.0; }
  bool even() const { return true; }
};

/// Potential given by callables. Bounds are optional metadata; a kernel
/// cannot be built without them.
template <int D>
struct CustomPotential {
  std::function<double(const std::array<double, D>&)> value_fn;
  std::function<std::array<double, D>(const std::array<double, D>&)> gradient_fn;
  std::optional<double> grad_bound;
  std::optional<double> grad_lipschitz;
  bool is_even = false;

  double value(const std::array<double, D>& q) const { return value_fn(q); }
  std::array<double, D> gradient(const std::array<double, D>& q) const {
    return gradient_fn(q);
  }
  std::optional<double> gradient_bound() const { return grad_bound; }
  std::optional<double> gradient_lipschitz() const { return grad_lipschitz; }
  bool even() const { return is_even; }
};

/// v((q1,p1),(q2,p2)) = (p1, -grad A(q1 - q2)).
template <int D, class Potential>
class NewtonianPairKernel {
 public:
  using Point = PhasePoint<D>;

  NewtonianPairKernel(Potential a, double lipschitz)
      : potential_(std::move(a)), lipschitz_(lipschitz) {}

  int arity() const { return 2; }
  double lipschitz() const { return lipschitz_; }
  bool symmetric_tail() const { return true; }
  const Potential& potential() const { return potential_; }
  bool odd_pair_force() const { return potential_.even(); }

  std::array<double, D> pair_force(const std::array<double, D>& dq) const {
    auto g = potential_.gradient(dq);
    for (double& v : g) v = -v;
    return g;
  }

  Point operator()(double, std::span<const Point> args) const {
    std::array<double, D> dq;
    for (int i = 0; i < D; ++i) dq[i] = args[0].q(i) - args[1].q(i);
    const auto f = pair_force(dq);
    Point r;
    for (int i = 0; i < D; ++i) {
      r.q(i) = args[0].p(i);
      r.p(i) = f[i];
    }
    return r;
  }

 private:
  Potential potential_;
  double lipschitz_;
};

/// Builds the Newtonian kernel of a pair potential. The declared constant is
/// L = max(1, sqrt(2) * Lip(grad A), sup |grad A|): the first bound covers the
/// difference quotient, the second the linear growth condition.
template <int D, class Potential>
NewtonianPairKernel<D, Potential> newtonian_pair_kernel(Potential a) {
  const auto g = a.gradient_bound();
  const auto h = a.gradient_lipschitz();
  if (!g || !h)
    throw ConfigError("potential lacks gradient bound / gradient Lipschitz metadata");
  const double L = std::max({1.0, std::sqrt(2.0) * *h, *g});
  return NewtonianPairKernel<D, Potential>(std::move(a), L);
}

/// Kernel given by a callable; used for non-Newtonian and higher-arity tests.
template <int D>
struct FunctionKernel {
  using Point = PhasePoint<D>;
  std::function<Point(double, std::span<const Point>)> fn;
  int d = 2;
  double L = 1.0;
  bool symmetric = true;

  int arity() const { return d; }
  double lipschitz() const { return L; }
  bool symmetric_tail() const { return symmetric; }
  Point operator()(double t, std::span<const Point> args) const { return fn(t, args); }
};

}  // namespace chaoslab
