#include <chaoslab/dynamics.hpp>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

using namespace chaoslab;

namespace {

Configuration<3> random_config(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Configuration<3> X(n);
  for (auto& x : X)
    for (auto& c : x.x) c = u(rng);
  return X;
}

auto gaussian_kernel() { return newtonian_pair_kernel<3>(GaussianBump<3>{}); }

using Span3 = std::span<const Phase3>;

}  // namespace

TEST(AssembleField, FreeKernelStreamsMomenta) {
  auto X = random_config(2, 1);
  auto V = assemble_vector_field<3>(Span3(X), FreeKernel<3>{}, 0.0);
  for (std::size_t j = 0; j < 2; ++j)
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(V[j].q(c), X[j].p(c));
      EXPECT_EQ(V[j].p(c), 0.0);
    }
}

TEST(AssembleField, PairFastPathMatchesNaiveDoubleLoop) {
  auto k = gaussian_kernel();
  auto X = random_config(3, 2);
  auto V = assemble_vector_field<3>(Span3(X), k, 0.0);
  for (std::size_t j = 0; j < 3; ++j) {
    double f[3] = {0, 0, 0};
    for (std::size_t i = 0; i < 3; ++i) {
      if (i == j) continue;
      double r2 = 0;
      for (int c = 0; c < 3; ++c) r2 += std::pow(X[j].q(c) - X[i].q(c), 2);
      for (int c = 0; c < 3; ++c) f[c] += 2.0 * (X[j].q(c) - X[i].q(c)) * std::exp(-r2);
    }
    for (int c = 0; c < 3; ++c) {
      EXPECT_DOUBLE_EQ(V[j].q(c), X[j].p(c));
      EXPECT_NEAR(V[j].p(c), f[c] / 2.0, 1e-15);
    }
  }
  auto W = assemble_vector_field_direct<3>(Span3(X), k, 0.0);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(V[j][c], W[j][c], 1e-15);
}

TEST(AssembleField, ThreeBodyGenericMatchesNaive) {
  FunctionKernel<3> k;
  k.d = 3;
  k.L = 10.0;
  k.fn = [](double t, std::span<const Phase3> a) {
    Phase3 r;
    for (int c = 0; c < 3; ++c) {
      r.q(c) = a[0].p(c);
      r.p(c) = std::sin(a[1].q(c) + a[2].q(c) - 2 * a[0].q(c)) + t;
    }
    return r;
  };
  auto X = random_config(5, 3);
  auto V = assemble_vector_field<3>(Span3(X), k, 0.25);
  for (std::size_t j = 0; j < 5; ++j) {
    Phase3 acc;
    int count = 0;
    for (std::size_t a = 0; a < 5; ++a)
      for (std::size_t b = a + 1; b < 5; ++b) {
        if (a == j || b == j) continue;
        std::array<Phase3, 3> args{X[j], X[a], X[b]};
        acc += k(0.25, std::span<const Phase3>(args));
        ++count;
      }
    ASSERT_EQ(count, 6);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(V[j][c], acc[c] / 6.0, 1e-14);
  }
}

TEST(AssembleField, CoincidentPositionsGiveZeroForce) {
  auto X = random_config(4, 4);
  for (auto& x : X)
    for (int c = 0; c < 3; ++c) x.q(c) = 0.3;
  auto V = assemble_vector_field<3>(Span3(X), gaussian_kernel(), 0.0);
  for (const auto& v : V)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(v.p(c), 0.0);
}

TEST(AssembleField, PermutationEquivariance) {
  auto k = gaussian_kernel();
  auto X = random_config(7, 5);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(9);
  std::shuffle(perm.begin(), perm.end(), rng);
  Configuration<3> Y(7);
  for (std::size_t i = 0; i < 7; ++i) Y[i] = X[perm[i]];
  auto VX = assemble_vector_field<3>(Span3(X), k, 0.0);
  auto VY = assemble_vector_field<3>(Span3(Y), k, 0.0);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 6; ++c)
      EXPECT_NEAR(VY[i][c], VX[perm[i]][c], 1e-13 * (1 + std::abs(VX[perm[i]][c])));
}

TEST(AssembleField, IncludeSelfScalesPairSum) {
  auto k = gaussian_kernel();
  auto X = random_config(6, 6);
  auto a = assemble_vector_field<3>(Span3(X), k, 0.0, Normalization::Binomial);
  auto b = assemble_vector_field<3>(Span3(X), k, 0.0, Normalization::IncludeSelf);
  for (std::size_t j = 0; j < 6; ++j)
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(b[j].p(c), a[j].p(c) * 5.0 / 6.0, 1e-15);
      EXPECT_EQ(b[j].q(c), a[j].q(c));
    }
  FunctionKernel<3> k3;
  k3.d = 3;
  k3.fn = [](double, std::span<const Phase3>) { return Phase3{}; };
  EXPECT_THROW(assemble_vector_field<3>(Span3(X), k3, 0.0, Normalization::IncludeSelf),
               ConfigError);
}

TEST(AssembleField, Errors) {
  auto X = random_config(2, 7);
  FunctionKernel<3> k3;
  k3.d = 3;
  k3.fn = [](double, std::span<const Phase3>) { return Phase3{}; };
  EXPECT_THROW(assemble_vector_field<3>(Span3(X), k3, 0.0), ArityError);

  auto Y = random_config(4, 8);
  FunctionKernel<3> bad;
  bad.fn = [](double, std::span<const Phase3> a) {
    Phase3 r;
    r.p(0) = a[0].q(0) > 0.9 && a[1].q(0) < -0.9 ? NAN : 0.0;
    return r;
  };
  Y[1].q(0) = 0.95;
  Y[3].q(0) = -0.95;
  Y[0].q(0) = Y[2].q(0) = 0.0;
  try {
    assemble_vector_field<3>(Span3(Y), bad, 0.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(e.indices, (std::vector<std::size_t>{1, 3}));
  }
}

TEST(StepPsi, ZeroStepIsBitIdentical) {
  auto X = random_config(5, 10);
  auto Y = step_psi<3>(Span3(X), gaussian_kernel(), 0.0, 0.0);
  EXPECT_EQ(X, Y);
}

TEST(StepPsi, FreeStep) {
  auto X = random_config(4, 11);
  auto Y = step_psi<3>(Span3(X), FreeKernel<3>{}, 0.0, 0.3);
  for (std::size_t j = 0; j < 4; ++j)
    for (int c = 0; c < 3; ++c) {
      EXPECT_DOUBLE_EQ(Y[j].q(c), X[j].q(c) + 0.3 * X[j].p(c));
      EXPECT_EQ(Y[j].p(c), X[j].p(c));
    }
}

TEST(StepPsi, LinearInStep) {
  auto k = gaussian_kernel();
  auto X = random_config(5, 12);
  auto a = step_psi<3>(Span3(X), k, 0.0, 0.01);
  auto b = step_psi<3>(Span3(X), k, 0.0, -0.035);
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t c = 0; c < 6; ++c)
      EXPECT_NEAR(b[j][c] - X[j][c], -3.5 * (a[j][c] - X[j][c]), 1e-15);
}

TEST(StepPsi, LocalErrorIsQuadraticInStep) {
  auto k = gaussian_kernel();
  std::vector<double> ratio;
  for (double dt : {0.04, 0.02, 0.01}) {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto X = random_config(6, 100 + s, 0.5);
      auto psi = step_psi<3>(Span3(X), k, 0.0, dt);
      auto phi = flow_rk4<3>(X, k, 0.0, dt, dt / 100);
      worst = std::max(worst, distance<3>(psi, phi) / ((1 + norm<3>(X)) * dt * dt));
    }
    ratio.push_back(worst);
  }
  EXPECT_GT(ratio[0], 0.0);
  EXPECT_NEAR(ratio[1] / ratio[0], 1.0, 0.1);
  EXPECT_NEAR(ratio[2] / ratio[1], 1.0, 0.1);
}

TEST(StepRk4, ZeroAndFreeFieldsExact) {
  auto X = random_config(3, 13);
  EXPECT_EQ(step_rk4<3>(Span3(X), ZeroKernel<3>{}, 0.0, 7.0), X);
  auto Y = step_rk4<3>(Span3(X), FreeKernel<3>{}, 0.0, 2.5);
  for (std::size_t j = 0; j < 3; ++j)
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(Y[j].q(c), X[j].q(c) + 2.5 * X[j].p(c), 1e-14);
      EXPECT_EQ(Y[j].p(c), X[j].p(c));
    }
}

TEST(StepRk4, FifthOrderLocalError) {
  // Harmonic-like bounded kernel: A(q) = 4 exp(-|q|^2 / 4).
  auto k = newtonian_pair_kernel<3>(GaussianBump<3>{4.0, 2.0});
  auto X = random_config(4, 14);
  auto err = [&](double dt) {
    auto a = step_rk4<3>(Span3(X), k, 0.0, dt);
    auto ref = flow_rk4<3>(X, k, 0.0, dt, dt / 100);
    return distance<3>(a, ref);
  };
  const double r = err(0.2) / err(0.1);
  EXPECT_GT(r, 32.0 * 0.7);
  EXPECT_LT(r, 32.0 * 1.3);
}

TEST(EvolveMicro, FreeTransportUnderPsi) {
  auto X = random_config(5, 15);
  SolverSettings cfg;
  cfg.dt = 0.1;
  cfg.method = Method::Psi;
  auto tr = evolve_micro<3>(X, FreeKernel<3>{}, 1.0, cfg);
  ASSERT_EQ(tr.times.size(), 11u);
  EXPECT_EQ(tr.times.back(), 1.0);
  for (std::size_t j = 0; j < 5; ++j)
    for (int c = 0; c < 3; ++c)
      EXPECT_NEAR(tr.states.back()[j].q(c), X[j].q(c) + X[j].p(c), 1e-14);
  for (std::size_t i = 1; i < tr.times.size(); ++i) EXPECT_GT(tr.times[i], tr.times[i - 1]);
}

TEST(EvolveMicro, ForwardBackwardRecoversStart) {
  auto k = gaussian_kernel();
  auto X = random_config(6, 16, 2.0);
  auto Y = flow_rk4<3>(X, k, 0.0, 1.0, 1e-3);
  auto Z = flow_rk4<3>(Y, k, 1.0, 0.0, 1e-3);
  EXPECT_LT(distance<3>(X, Z), 1e-6 * (1 + norm<3>(X)));
}

TEST(EvolveMicro, EnergyConserved) {
  GaussianBump<3> a;
  auto k = newtonian_pair_kernel<3>(a);
  auto X = random_config(8, 17, 1.5);
  for (auto norm_mode : {Normalization::Binomial, Normalization::IncludeSelf}) {
    const double e0 = newtonian_energy<3>(X, a, norm_mode);
    auto Y = flow_rk4<3>(X, k, 0.0, 1.0, 1e-3, norm_mode);
    const double e1 = newtonian_energy<3>(Y, a, norm_mode);
    EXPECT_LT(std::abs(e1 - e0) / std::abs(e0), 1e-6);
  }
}

TEST(EvolveMicro, NonFiniteReportsLastValidTime) {
  FunctionKernel<3> blow;
  blow.fn = [](double t, std::span<const Phase3> a) {
    Phase3 r = a[0];
    if (t > 0.25) r.p(0) = INFINITY;
    return r;
  };
  SolverSettings cfg;
  cfg.dt = 0.1;
  cfg.method = Method::Psi;
  try {
    evolve_micro<3>(random_config(3, 18), blow, 1.0, cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NEAR(e.last_valid_time, 0.3, 1e-12);
  }
  cfg.dt = -1.0;
  EXPECT_THROW(evolve_micro<3>(random_config(3, 18), blow, 1.0, cfg), InputError);
}

TEST(NewtonianKernel, ConstantPotentialIsFree) {
  auto k = newtonian_pair_kernel<3>(ConstantPotential<3>{2.0});
  auto X = random_config(2, 19);
  auto a = k(0.0, Span3(X));
  auto b = FreeKernel<3>{}(0.0, Span3(X));
  EXPECT_EQ(a, b);
}

TEST(NewtonianKernel, GaussianForceValues) {
  auto k = gaussian_kernel();
  Configuration<3> X(2);
  auto v0 = k(0.0, Span3(X));
  for (int c = 0; c < 3; ++c) EXPECT_EQ(v0.p(c), 0.0);
  X[0].q(0) = 1.0;
  auto v = k(0.0, Span3(X));
  EXPECT_NEAR(v.p(0), 2.0 * std::exp(-1.0), 1e-15);
  EXPECT_EQ(v.p(1), 0.0);
  // central finite differences of A
  GaussianBump<3> a;
  const double h = 1e-6;
  const double fd = (a.value({1 + h, 0, 0}) - a.value({1 - h, 0, 0})) / (2 * h);
  EXPECT_NEAR(v.p(0), -fd, 1e-9);
  EXPECT_NEAR(k.lipschitz(), 2.0 * std::sqrt(2.0), 1e-15);
}

TEST(NewtonianKernel, MissingMetadataRejected) {
  CustomPotential<3> a;
  a.value_fn = [](const std::array<double, 3>&) { return 0.0; };
  a.gradient_fn = [](const std::array<double, 3>&) { return std::array<double, 3>{}; };
  a.grad_bound = 1.0;
  EXPECT_THROW(newtonian_pair_kernel<3>(a), ConfigError);
  a.grad_lipschitz = 1.0;
  EXPECT_NO_THROW(newtonian_pair_kernel<3>(a));
}

TEST(KernelLipschitz, FreeKernel) {
  auto r = check_kernel_lipschitz<3>(FreeKernel<3>{}, 2000, 1);
  EXPECT_LE(r.max_lipschitz_ratio, 1.0 + 1e-12);
  EXPECT_LE(r.max_growth_ratio, 1.0);
  EXPECT_FALSE(r.violated);
}

TEST(KernelLipschitz, GaussianDeclaredBoundHolds) {
  auto r = check_kernel_lipschitz<3>(gaussian_kernel(), 100000, 2);
  EXPECT_FALSE(r.violated);
  EXPECT_EQ(r.probes, 100000u);
}

TEST(KernelLipschitz, UnderstatedBoundFlagged) {
  auto k = gaussian_kernel();
  NewtonianPairKernel<3, GaussianBump<3>> weak(k.potential(), k.lipschitz() / 2);
  EXPECT_TRUE(check_kernel_lipschitz<3>(weak, 20000, 3).violated);
  EXPECT_THROW(check_kernel_lipschitz<3>(weak, 0, 3), InputError);
}

TEST(FlowProperties, GronwallGrowth) {
  auto k = gaussian_kernel();
  const double L = k.lipschitz();
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto X = random_config(4, 200 + s);
    auto Y = random_config(4, 300 + s);
    const double dt = 0.2;
    auto fx = flow_rk4<3>(X, k, 0.0, dt, 1e-3);
    auto fy = flow_rk4<3>(Y, k, 0.0, dt, 1e-3);
    EXPECT_LE(distance<3>(fx, fy), 1.05 * std::exp(4 * L * dt) * distance<3>(X, Y));
  }
}

TEST(FlowProperties, VolumePreserved) {
  auto k = gaussian_kernel();
  auto X = random_config(3, 20);
  const int n = 18;
  const double h = 1e-5;
  Eigen::MatrixXd J(n, n);
  for (int c = 0; c < n; ++c) {
    auto Xp = X, Xm = X;
    Xp[c / 6][c % 6] += h;
    Xm[c / 6][c % 6] -= h;
    auto Yp = flow_rk4<3>(Xp, k, 0.0, 1.0, 1e-2);
    auto Ym = flow_rk4<3>(Xm, k, 0.0, 1.0, 1e-2);
    for (int r = 0; r < n; ++r) J(r, c) = (Yp[r / 6][r % 6] - Ym[r / 6][r % 6]) / (2 * h);
  }
  EXPECT_NEAR(J.determinant(), 1.0, 1e-4);
}

TEST(TrajectoryIo, BinaryRoundTripAndCsvHeader) {
  SolverSettings cfg;
  cfg.dt = 0.05;
  auto tr = evolve_micro<3>(random_config(3, 21), gaussian_kernel(), 0.2, cfg);
  std::stringstream ss;
  write_trajectory_binary<3>(ss, tr);
  auto back = read_trajectory_binary<3>(ss);
  EXPECT_EQ(back.times, tr.times);
  EXPECT_EQ(back.states, tr.states);
  EXPECT_EQ(back.dt, tr.dt);
  EXPECT_EQ(back.method, Method::RK4);

  std::ostringstream csv;
  write_trajectory_csv<3>(csv, tr);
  const std::string s = csv.str();
  EXPECT_EQ(s.rfind("# N=3,d=2,D=3,dt=0.050000000000000003,method=rk4\n", 0), 0u);
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 2 + 5);

  std::stringstream junk("garbage!");
  EXPECT_THROW(read_trajectory_binary<3>(junk), IoError);
}
