#include <chaoslab/alpha.hpp>

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace chaoslab;

namespace {

std::vector<double> product_classes2(double p0) {
  // S = 2, N = 2 classes ordered (2,0), (1,1), (0,2)
  const double p1 = 1.0 - p0;
  return {p0 * p0, 2 * p0 * p1, p1 * p1};
}

// Solve a 4x4 system by Gaussian elimination with partial pivoting; false if
// singular.
bool solve4(std::array<std::array<double, 5>, 4> a, std::array<double, 4>& x) {
  for (int c = 0; c < 4; ++c) {
    int p = c;
    for (int r = c + 1; r < 4; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    if (std::abs(a[p][c]) < 1e-10) return false;
    std::swap(a[p], a[c]);
    for (int r = 0; r < 4; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (int k = c; k < 5; ++k) a[r][k] -= f * a[c][k];
    }
  }
  for (int c = 0; c < 4; ++c) x[c] = a[c][4] / a[c][c];
  return true;
}

// Exhaustive oracle for S = 2, N = 2 with embedding {0, step}: enumerate every
// column of the finite family and every basic solution of the standard-form
// program with rows (3 classes, total weight).
double oracle_s2n2(const std::vector<double>& F, double f0, double K, double step, double gamma,
                   const std::vector<double>& extra_g0) {
  const double knee = std::pow(2.0, gamma);
  const double m[3] = {0.0, 1.0 / knee <= 1.0 ? 1.0 / knee : 1.0, 1.0};
  std::vector<double> g0s;
  for (int i = 0; i <= 10; ++i) g0s.push_back(i / 10.0);
  for (double e : extra_g0) g0s.push_back(e);
  struct Col {
    std::array<double, 4> a;
    double cost;
  };
  std::vector<Col> cols;
  for (int c = 0; c < 3; ++c) {
    Col plus{{0, 0, 0, 0}, 1.0}, minus{{0, 0, 0, 0}, 1.0};
    plus.a[c] = -1;
    minus.a[c] = 1;
    cols.push_back(plus);
    cols.push_back(minus);
  }
  double best_all_bad = 1e300;
  for (double g0 : g0s) {
    const double g1 = 1 - g0;
    if (std::abs(g0 - g1) / step > K) continue;
    const double d = std::abs(f0 - g0) * 2;
    best_all_bad = std::min(best_all_bad, d);
    cols.push_back({{g0 * g0, 2 * g0 * g1, g1 * g1, 1}, m[0] + d});
    // k = 1: good particle in state 0 (prob g0) or 1 (prob g1); bad particle
    // chooses its state as a function of the good one
    for (int b0 = 0; b0 < 2; ++b0)
      for (int b1 = 0; b1 < 2; ++b1) {
        std::array<double, 4> a{0, 0, 0, 1};
        a[b0 == 0 ? 0 : 1] += g0;  // good 0 + bad b0
        a[b1 == 0 ? 1 : 2] += g1;  // good 1 + bad b1
        cols.push_back({a, m[1] + d});
      }
  }
  for (int c = 0; c < 3; ++c) {
    std::array<double, 4> a{0, 0, 0, 1};
    a[c] = 1;
    cols.push_back({a, m[2] + best_all_bad});
  }
  double best = 1e300;
  const std::size_t n = cols.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      for (std::size_t k = j + 1; k < n; ++k)
        for (std::size_t l = k + 1; l < n; ++l) {
          std::array<std::array<double, 5>, 4> a;
          const std::size_t idx[4] = {i, j, k, l};
          for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) a[r][c] = cols[idx[c]].a[r];
            a[r][4] = r < 3 ? F[r] : 1.0;
          }
          std::array<double, 4> x;
          if (!solve4(a, x)) continue;
          if (*std::min_element(x.begin(), x.end()) < -1e-12) continue;
          double v = 0;
          for (int c = 0; c < 4; ++c) v += x[c] * cols[idx[c]].cost;
          best = std::min(best, v);
        }
  return best;
}

DiscreteInstance random_symmetric(std::size_t S, std::size_t N, std::mt19937_64& rng) {
  const auto occs = occupations(S, N);
  std::exponential_distribution<double> ex(1.0);
  std::vector<double> w(occs.size());
  double s = 0;
  for (double& v : w) s += (v = ex(rng));
  for (double& v : w) v /= s;
  return DiscreteInstance::from_class_masses(S, N, line_embedding(S, 0.5), w);
}

std::vector<double> random_prob(std::size_t S, std::mt19937_64& rng) {
  std::exponential_distribution<double> ex(1.0);
  std::vector<double> p(S);
  double s = 0;
  for (double& v : p) s += (v = ex(rng));
  for (double& v : p) v /= s;
  return p;
}

DiscreteInstance mix(const DiscreteInstance& a, const DiscreteInstance& b, double t) {
  DiscreteInstance r = a;
  for (std::size_t i = 0; i < r.tensor.size(); ++i)
    r.tensor[i] = (1 - t) * a.tensor[i] + t * b.tensor[i];
  return r;
}

}  // namespace

TEST(Weight, Examples) {
  WeightSpec w{0.6, 100};
  EXPECT_EQ(weight_m_gamma(0, w), 0.0);
  EXPECT_EQ(weight_m_gamma(100, w), 1.0);
  const double knee = std::pow(100.0, 0.6);  // 15.85
  EXPECT_NEAR(weight_m_gamma(15, w), 15 / knee, 1e-15);
  EXPECT_EQ(weight_m_gamma(16, w), 1.0);
  double prev = 0;
  for (std::size_t k = 0; k <= 100; ++k) {
    EXPECT_GE(weight_m_gamma(k, w), prev);
    prev = weight_m_gamma(k, w);
  }
  EXPECT_THROW(weight_m_gamma(101, w), InputError);
  EXPECT_THROW(weight_m_gamma(1, WeightSpec{0.5, 10}), InputError);
  // branches agree at an integer knee: N = 16, gamma = 0.75 gives knee 8
  WeightSpec w16{0.75, 16};
  EXPECT_NEAR(weight_m_gamma(8, w16), 1.0, 1e-12);
  EXPECT_EQ(weight_m_gamma(9, w16), 1.0);
}

TEST(Occupations, CountAndOrder) {
  for (std::size_t S = 1; S <= 6; ++S)
    for (std::size_t N = 0; N <= 4; ++N)
      EXPECT_EQ(double(occupations(S, N).size()), binomial(N + S - 1, S - 1));
  const auto o = occupations(2, 2);
  EXPECT_EQ(o[0], (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(o[2], (std::vector<std::size_t>{0, 2}));
}

TEST(Instance, Validation) {
  auto inst = DiscreteInstance::product(std::vector<double>{0.3, 0.7}, 2, line_embedding(2));
  EXPECT_NO_THROW(inst.validate());
  auto bad = inst;
  bad.tensor[1] += 0.05;
  bad.tensor[2] -= 0.05;
  EXPECT_THROW(bad.validate(), InputError);
  bad = inst;
  bad.tensor[0] += 0.1;
  EXPECT_THROW(bad.validate(), InputError);
  bad = inst;
  bad.embedding[1] = bad.embedding[0];
  EXPECT_THROW(bad.validate(), InputError);
  auto big = DiscreteInstance::product(std::vector<double>(7, 1.0 / 7), 2, line_embedding(7));
  EXPECT_THROW(alpha_exact_discrete(big, std::vector<double>(7, 1.0 / 7), 1e9, {0.75, 2}),
               CapabilityError);
}

TEST(Instance, ClassMassesAndRoundTrip) {
  std::mt19937_64 rng(3);
  auto inst = random_symmetric(3, 3, rng);
  auto back = DiscreteInstance::from_class_masses(3, 3, inst.embedding, inst.class_masses());
  for (std::size_t i = 0; i < inst.tensor.size(); ++i)
    EXPECT_NEAR(back.tensor[i], inst.tensor[i], 1e-15);
  InstanceFile file{inst, std::vector<double>{0.2, 0.3, 0.5}, 0.7, 4.0};
  std::stringstream ss;
  write_instance(ss, file);
  auto r = read_instance(ss);
  EXPECT_EQ(r.instance.tensor, inst.tensor);
  EXPECT_EQ(r.instance.embedding, inst.embedding);
  EXPECT_EQ(*r.f, *file.f);
  EXPECT_EQ(*r.gamma, 0.7);
  EXPECT_EQ(*r.K, 4.0);
  std::stringstream broken("S 2\nN 2\nbogus 1\n");
  EXPECT_THROW(read_instance(broken), InputError);
}

TEST(ProxyNorm, TwoStates) {
  // embedding {0, 0.5}: norm = |g0 - g1| / 0.5
  EXPECT_NEAR(proxy_norm(std::vector<double>{0.7, 0.3}, line_embedding(2, 0.5)), 0.8, 1e-15);
  // weight (1 + |a|)^10 with the smaller-norm point first
  EXPECT_NEAR(proxy_norm(std::vector<double>{0.5, 0.3, 0.2}, line_embedding(3, 1.0)),
              std::max({0.2, 0.3 / 2, 1024 * 0.1}), 1e-12);
}

TEST(AlphaExact, ProductInNetIsZero) {
  std::vector<double> f{0.3, 0.7};
  auto inst = DiscreteInstance::product(f, 3, line_embedding(2, 0.5));
  auto r = alpha_exact_discrete(inst, f, 10.0, {0.75, 3});
  EXPECT_NEAR(r.value, 0.0, 1e-12);
  std::vector<double> f3{0.2, 0.5, 0.3};
  auto inst3 = DiscreteInstance::product(f3, 4, line_embedding(3, 0.5));
  EXPECT_NEAR(alpha_exact_discrete(inst3, f3, 1e9, {0.75, 4}).value, 0.0, 1e-12);
}

TEST(AlphaExact, MatchesEnumerationOracle) {
  // mixture (1 - mu) f^2 + mu h^2, with f off the lattice
  const double f0 = 0.63, h0 = 0.05, mu = 0.1, step = 0.5, gamma = 0.75;
  std::vector<double> F(3);
  for (int c = 0; c < 3; ++c)
    F[c] = (1 - mu) * product_classes2(f0)[c] + mu * product_classes2(h0)[c];
  auto inst = DiscreteInstance::from_class_masses(2, 2, line_embedding(2, step), F);
  std::vector<double> f{f0, 1 - f0};
  AlphaOptions opt;
  opt.include_target = false;
  for (double K : {10.0, 1.0, 0.5}) {
    const double exact = alpha_exact_discrete(inst, f, K, {gamma, 2}, opt).value;
    const double oracle = oracle_s2n2(F, f0, K, step, gamma, {});
    EXPECT_NEAR(exact, oracle, 1e-9) << "K=" << K;
  }
  // value bounded by mu times the all-bad cost of the h part, and positive
  const double exact = alpha_exact_discrete(inst, f, 10.0, {gamma, 2}, opt).value;
  EXPECT_GT(exact, 0.0);
  const double f_dist = 2 * std::abs(f0 - 0.6);
  EXPECT_LE(exact, (1 - mu) * f_dist + mu * (1.0 + f_dist) + 1e-12);

  // random symmetric instances, target included as an extra column
  std::mt19937_64 rng(11);
  for (int t = 0; t < 6; ++t) {
    auto r = random_symmetric(2, 2, rng);
    const double g0 = std::uniform_real_distribution<double>(0, 1)(rng);
    std::vector<double> fr{g0, 1 - g0};
    const double K = 0.5 + 2.0 * t / 5.0;
    AlphaOptions o2;
    o2.include_target = true;
    const double ex = alpha_exact_discrete(r, fr, K, {0.8, 2}, o2).value;
    const double oc = oracle_s2n2(r.class_masses(), g0, K, 0.5, 0.8,
                                  std::abs(2 * g0 - 1) / 0.5 <= K ? std::vector<double>{g0}
                                                                  : std::vector<double>{});
    EXPECT_NEAR(ex, oc, 1e-9) << "trial " << t;
  }
}

TEST(AlphaExact, ConvexityOnRandomPairs) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 4; ++t) {
    auto a = random_symmetric(3, 3, rng), b = random_symmetric(3, 3, rng);
    auto f = random_prob(3, rng);
    WeightSpec w{0.75, 3};
    const double va = alpha_exact_discrete(a, f, 50.0, w).value;
    const double vb = alpha_exact_discrete(b, f, 50.0, w).value;
    const double vm = alpha_exact_discrete(mix(a, b, 0.5), f, 50.0, w).value;
    EXPECT_LE(vm, 0.5 * va + 0.5 * vb + 1e-10);
  }
}

TEST(AlphaExact, ContinuityAndMonotoneInK) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 4; ++t) {
    auto F = random_symmetric(3, 2, rng), H = random_symmetric(3, 2, rng);
    auto f = random_prob(3, rng), h = random_prob(3, rng);
    AlphaOptions opt;
    opt.include_target = false;
    opt.extra_candidates = {f, h};
    WeightSpec w{0.75, 2};
    const double aF = alpha_exact_discrete(F, f, 30.0, w, opt).value;
    const double aH = alpha_exact_discrete(H, h, 30.0, w, opt).value;
    EXPECT_LE(aF, aH + l1_vec(f, h) + l1_vec(F.tensor, H.tensor) + 1e-10);
    double prev = 1e300;
    for (double K : {0.2, 0.5, 1.0, 3.0, 30.0}) {
      const double v = alpha_exact_discrete(F, f, K, w, opt).value;
      EXPECT_LE(v, prev + 1e-10);
      prev = v;
    }
  }
}

TEST(AlphaExact, ParallelPricingIsDeterministic) {
  std::mt19937_64 rng(2);
  auto F = random_symmetric(4, 3, rng);
  auto f = random_prob(4, rng);
  AlphaOptions one, three;
  three.workers = 3;
  auto a = alpha_exact_discrete(F, f, 20.0, {0.75, 3}, one);
  auto b = alpha_exact_discrete(F, f, 20.0, {0.75, 3}, three);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(AlphaUpper, DiscreteExamplesAndSoundness) {
  std::vector<double> f{0.3, 0.7}, g{0.5, 0.5};
  auto emb = line_embedding(2, 0.5);
  WeightSpec w{0.75, 3};
  auto Ff = DiscreteInstance::product(f, 3, emb);
  DiscreteMixture exact{{1.0, 0, f, {1.0}}};
  EXPECT_NEAR(alpha_upper_bound(Ff, f, 10.0, w, {exact}).value, 0.0, 1e-15);
  auto Fg = DiscreteInstance::product(g, 3, emb);
  DiscreteMixture single{{1.0, 0, g, {1.0}}};
  EXPECT_NEAR(alpha_upper_bound(Fg, f, 10.0, w, {single}).value, l1_vec(f, g), 1e-15);
  EXPECT_THROW(alpha_upper_bound(Ff, f, 0.1, w, {exact}), InputError);

  // random in-family candidates never beat the exact value
  std::mt19937_64 rng(4);
  auto F = random_symmetric(2, 3, rng);
  const double exact_v = alpha_exact_discrete(F, f, 10.0, w).value;
  std::vector<DiscreteMixture> cands;
  for (int c = 0; c < 40; ++c) {
    DiscreteMixture m;
    const int parts = 1 + c % 3;
    auto lam = random_prob(parts, rng);
    for (int p = 0; p < parts; ++p) {
      const std::size_t k = std::size_t(rng() % 4);
      const double g0 = double(rng() % 11) / 10.0;
      std::vector<double> chi(std::size_t(std::pow(2, k)));
      chi = chi.empty() ? std::vector<double>{1.0} : random_prob(chi.size(), rng);
      m.push_back({lam[p], k, {g0, 1 - g0}, chi});
    }
    cands.push_back(m);
  }
  auto ub = alpha_upper_bound(F, f, 10.0, w, cands);
  for (double v : ub.per_candidate) EXPECT_GE(v, exact_v - 1e-12);
}

TEST(AlphaUpper, FallbackAndContinuous) {
  const GridDensity<1> f = gaussian_grid<1>({-6, -6}, {6, 6}, {48, 48}, {0.0, 0.0}, {1.0, 1.0});
  const GridDensity<1> h = gaussian_grid<1>({-6, -6}, {6, 6}, {48, 48}, {0.3, 0.0}, {1.0, 1.0});
  WeightSpec w{0.75, 10};
  ContinuousBoundOptions opt;
  opt.check_norm = false;
  LawDescription<1> prod{10, h};
  ContinuousMixture<1> same{{1.0, 0, h, BadBlock::Product}};
  auto ub = alpha_upper_bound(prod, f, 1.0, w, {same}, opt);
  EXPECT_NEAR(ub.value, l1_distance(f, h), 1e-15);
  ContinuousMixture<1> whole{{1.0, 10, f, BadBlock::WholeLaw}};
  EXPECT_NEAR(alpha_upper_bound(LawDescription<1>{10, std::nullopt}, f, 1.0, w, {whole}, opt).value,
              1.0, 1e-15);
  EXPECT_NEAR(alpha_fallback_bound(f, 1.0, w, {h, f}, opt), 1.0, 1e-15);
  ContinuousMixture<1> other{{1.0, 0, f, BadBlock::Product}};
  EXPECT_THROW(alpha_upper_bound(prod, f, 1.0, w, {other}, opt), CapabilityError);
  EXPECT_THROW(alpha_upper_bound(LawDescription<1>{10, std::nullopt}, f, 1.0, w, {same}, opt),
               CapabilityError);
}

TEST(MarginalBound, DiscreteCases) {
  std::vector<double> f{0.2, 0.5, 0.3};
  auto emb = line_embedding(3, 0.5);
  auto P = DiscreteInstance::product(f, 4, emb);
  auto r = marginal_bound_check(P, f, 2, 0.0);
  EXPECT_NEAR(r.lhs, 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.rhs, 2.0 * 2 * 2 / 4);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(marginal_bound_check(P, f, 4, 0.0).lhs, 0.0, 1e-15);

  // hypergeometric marginal from class masses as an independent check
  std::mt19937_64 rng(6);
  auto F = random_symmetric(3, 4, rng);
  const auto occs = occupations(3, 4);
  const auto masses = F.class_masses();
  double l1 = 0;
  for (std::size_t x = 0; x < 3; ++x) {
    double p = 0;
    for (std::size_t c = 0; c < occs.size(); ++c) p += masses[c] * double(occs[c][x]) / 4.0;
    l1 += std::abs(p - f[x]);
  }
  EXPECT_NEAR(discrete_marginal_l1(F, f, 1), l1, 1e-14);

  // the inequality holds with the exact value on mixtures
  for (int t = 0; t < 4; ++t) {
    auto M = random_symmetric(3, 3, rng);
    auto g = random_prob(3, rng);
    const double a = alpha_exact_discrete(M, g, 50.0, {0.75, 3}).value;
    for (std::size_t s = 1; s <= 3; ++s) EXPECT_TRUE(marginal_bound_check(M, g, s, a).pass);
  }
  EXPECT_THROW(marginal_bound_check(P, f, 5, 0.0), InputError);

  L1Estimate sampled;
  sampled.value = 0.5;
  sampled.floor.expected = 0.2;
  auto s = marginal_bound_check(sampled, 1, 10, 0.1);
  EXPECT_NEAR(s.rhs, 2 * (0.1 + 0.1), 1e-15);
  EXPECT_NEAR(s.slack, 0.4 + 0.2 - 0.5, 1e-15);
  EXPECT_TRUE(s.pass);
}
