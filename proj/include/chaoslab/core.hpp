#pragma once

// Phase-space points, configurations and the error hierarchy shared by every
// chaoslab module.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace chaoslab {

enum class ErrorKind {
  Input,
  Arity,
  Numeric,
  Range,
  Config,
  Capability,
  NonConvergence,
  DegenerateInput,
  Io,
  PlanValidation,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InputError : Error {
  explicit InputError(const std::string& w) : Error(ErrorKind::Input, w) {}
};
struct ArityError : Error {
  explicit ArityError(const std::string& w) : Error(ErrorKind::Arity, w) {}
};
struct RangeError : Error {
  explicit RangeError(const std::string& w) : Error(ErrorKind::Range, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct CapabilityError : Error {
  explicit CapabilityError(const std::string& w)
      : Error(ErrorKind::Capability, w) {}
};
struct DegenerateInputError : Error {
  explicit DegenerateInputError(const std::string& w)
      : Error(ErrorKind::DegenerateInput, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};
struct PlanError : Error {
  explicit PlanError(const std::string& w)
      : Error(ErrorKind::PlanValidation, w) {}
};

/// A non-finite value appeared. `indices` names the particle set involved
/// (empty when not applicable); `last_valid_time` is NaN unless raised by a
/// time integrator.
struct NumericError : Error {
  NumericError(const std::string& w, std::vector<std::size_t> idx = {},
               double last_valid = std::nan(""))
      : Error(ErrorKind::Numeric, w),
        indices(std::move(idx)),
        last_valid_time(last_valid) {}
  std::vector<std::size_t> indices;
  double last_valid_time;
};

struct NonConvergenceError : Error {
  NonConvergenceError(const std::string& w, std::vector<double> history)
      : Error(ErrorKind::NonConvergence, w), residuals(std::move(history)) {}
  std::vector<double> residuals;
};

/// A point x = (q, p) of the one-particle phase space R^{2D}. D = 3 is the
/// physical case; D = 1 is the reduced configuration used by grid solvers.
template <int D>
struct PhasePoint {
  static_assert(D >= 1);
  static constexpr int spatial_dim = D;
  static constexpr std::size_t size = 2 * D;

  std::array<double, 2 * D> x{};

  double& q(int i) { return x[i]; }
  double q(int i) const { return x[i]; }
  double& p(int i) { return x[D + i]; }
  double p(int i) const { return x[D + i]; }

  double& operator[](std::size_t i) { return x[i]; }
  double operator[](std::size_t i) const { return x[i]; }

  double squared_norm() const {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
  }
  double norm() const { return std::sqrt(squared_norm()); }
  bool finite() const {
    for (double v : x)
      if (!std::isfinite(v)) return false;
    return true;
  }

  PhasePoint& operator+=(const PhasePoint& o) {
    for (std::size_t i = 0; i < size; ++i) x[i] += o.x[i];
    return *this;
  }
  PhasePoint& operator-=(const PhasePoint& o) {
    for (std::size_t i = 0; i < size; ++i) x[i] -= o.x[i];
    return *this;
  }
  PhasePoint& operator*=(double a) {
    for (double& v : x) v *= a;
    return *this;
  }
  friend PhasePoint operator+(PhasePoint a, const PhasePoint& b) { return a += b; }
  friend PhasePoint operator-(PhasePoint a, const PhasePoint& b) { return a -= b; }
  friend PhasePoint operator*(double s, PhasePoint a) { return a *= s; }
  friend PhasePoint operator*(PhasePoint a, double s) { return a *= s; }
  friend bool operator==(const PhasePoint&, const PhasePoint&) = default;

  static PhasePoint from_qp(const std::array<double, D>& q,
                            const std::array<double, D>& p) {
    PhasePoint r;
    for (int i = 0; i < D; ++i) {
      r.x[i] = q[i];
      r.x[D + i] = p[i];
    }
    return r;
  }
};

template <int D>
using Configuration = std::vector<PhasePoint<D>>;

using Phase3 = PhasePoint<3>;
using Phase1 = PhasePoint<1>;

/// Euclidean norm of the concatenated 2DN-vector.
template <int D>
double norm(std::span<const PhasePoint<D>> X) {
  double s = 0.0;
  for (const auto& x : X) s += x.squared_norm();
  return std::sqrt(s);
}

template <int D>
double distance(std::span<const PhasePoint<D>> X, std::span<const PhasePoint<D>> Y) {
  if (X.size() != Y.size()) throw InputError("configuration sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) s += (X[i] - Y[i]).squared_norm();
  return std::sqrt(s);
}

template <int D>
double norm(const Configuration<D>& X) {
  return norm<D>(std::span<const PhasePoint<D>>(X));
}
template <int D>
double distance(const Configuration<D>& X, const Configuration<D>& Y) {
  return distance<D>(std::span<const PhasePoint<D>>(X),
                     std::span<const PhasePoint<D>>(Y));
}

/// Binomial coefficient as a double; exact for the sizes used here.
inline double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i)
    r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(r);
}

}  // namespace chaoslab
