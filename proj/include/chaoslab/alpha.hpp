#pragma once

// Independence functional: weights, discrete instances, exact evaluation by
// column generation, candidate upper bounds and the marginal inequality.

#include <chaoslab/core.hpp>
#include <chaoslab/density.hpp>
#include <chaoslab/metrics.hpp>
#include <chaoslab/parallel.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace chaoslab {

// ---------------------------------------------------------------------------
// Weights

struct WeightSpec {
  double gamma = 0.75;
  std::size_t N = 1;
  void check() const {
    if (!(gamma > 0.5 && gamma < 1.0)) throw InputError("gamma must lie in (1/2, 1)");
    if (N < 1) throw InputError("N must be >= 1");
  }
};

/// k / N^gamma for k <= N^gamma, 1 otherwise.
inline double weight_m_gamma(std::size_t k, const WeightSpec& spec) {
  spec.check();
  if (k > spec.N) throw InputError("k must lie in [0, N]");
  const double knee = std::pow(double(spec.N), spec.gamma);
  return double(k) <= knee ? double(k) / knee : 1.0;
}

// ---------------------------------------------------------------------------
// Occupation vectors

/// All occupation vectors of `total` particles over `states` states, in
/// lexicographic order of the vector (first state most significant,
/// descending counts first).
inline std::vector<std::vector<std::size_t>> occupations(std::size_t states, std::size_t total) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur(states, 0);
  auto rec = [&](auto&& self, std::size_t pos, std::size_t left) -> void {
    if (pos + 1 == states) {
      cur[pos] = left;
      out.push_back(cur);
      return;
    }
    for (std::size_t c = left + 1; c-- > 0;) {
      cur[pos] = c;
      self(self, pos + 1, left - c);
    }
  };
  if (states == 0) throw InputError("need at least one state");
  rec(rec, 0, total);
  return out;
}

inline double multinomial_count(const std::vector<std::size_t>& occ) {
  std::size_t n = 0;
  double lg = 0.0;
  for (std::size_t c : occ) {
    lg -= std::lgamma(double(c) + 1.0);
    n += c;
  }
  return std::round(std::exp(lg + std::lgamma(double(n) + 1.0)));
}

/// Probability of occupation `occ` under sum(occ) i.i.d. draws from `g`.
inline double multinomial_prob(const std::vector<std::size_t>& occ, std::span<const double> g) {
  double p = multinomial_count(occ);
  for (std::size_t a = 0; a < occ.size(); ++a)
    if (occ[a] > 0) p *= std::pow(g[a], double(occ[a]));
  return p;
}

// ---------------------------------------------------------------------------
// Discrete instances

inline constexpr std::size_t kEmbeddingDim = 6;
inline constexpr std::size_t kMaxExactStates = 6;
inline constexpr std::size_t kMaxExactParticles = 4;

/// Finite model: S one-particle states embedded injectively in R^6 and a
/// symmetric N-particle law stored as a tensor over S^N (row-major, first
/// coordinate most significant).
struct DiscreteInstance {
  std::size_t S = 0;
  std::size_t N = 0;
  std::vector<std::array<double, kEmbeddingDim>> embedding;
  std::vector<double> tensor;

  std::size_t tensor_size() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < N; ++i) n *= S;
    return n;
  }

  std::vector<std::size_t> unflatten(std::size_t idx) const {
    std::vector<std::size_t> x(N);
    for (std::size_t i = N; i-- > 0;) {
      x[i] = idx % S;
      idx /= S;
    }
    return x;
  }

  std::vector<std::size_t> occupation_of(std::size_t idx) const {
    std::vector<std::size_t> occ(S, 0);
    for (std::size_t s : unflatten(idx)) ++occ[s];
    return occ;
  }

  void validate(double tol = 1e-12) const {
    if (S < 1 || N < 1) throw InputError("instance needs S >= 1 and N >= 1");
    if (embedding.size() != S) throw InputError("embedding must list one point per state");
    for (std::size_t a = 0; a < S; ++a)
      for (std::size_t b = a + 1; b < S; ++b)
        if (embedding[a] == embedding[b]) throw InputError("embedding must be injective");
    if (tensor.size() != tensor_size()) throw InputError("tensor size must be S^N");
    double mass = 0.0;
    for (double v : tensor) {
      if (!std::isfinite(v) || v < 0.0) throw InputError("tensor entries must be finite and >= 0");
      mass += v;
    }
    if (std::abs(mass - 1.0) > tol * double(tensor.size()) + tol)
      throw InputError("tensor must be normalized");
    // symmetric: every entry equals the entry of its sorted index
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      auto x = unflatten(i);
      std::sort(x.begin(), x.end());
      std::size_t j = 0;
      for (std::size_t s : x) j = j * S + s;
      if (std::abs(tensor[i] - tensor[j]) > tol)
        throw InputError("tensor must be symmetric under coordinate permutation");
    }
  }

  /// Mass of each occupation class, ordered as occupations(S, N).
  std::vector<double> class_masses() const {
    const auto occs = occupations(S, N);
    std::map<std::vector<std::size_t>, std::size_t> index;
    for (std::size_t c = 0; c < occs.size(); ++c) index[occs[c]] = c;
    std::vector<double> m(occs.size(), 0.0);
    for (std::size_t i = 0; i < tensor.size(); ++i) m[index.at(occupation_of(i))] += tensor[i];
    return m;
  }

  /// Symmetric tensor with the given class masses.
  static DiscreteInstance from_class_masses(std::size_t S, std::size_t N,
                                            std::vector<std::array<double, kEmbeddingDim>> emb,
                                            const std::vector<double>& masses) {
    DiscreteInstance inst;
    inst.S = S;
    inst.N = N;
    inst.embedding = std::move(emb);
    const auto occs = occupations(S, N);
    if (masses.size() != occs.size()) throw InputError("class mass count mismatch");
    std::map<std::vector<std::size_t>, std::size_t> index;
    for (std::size_t c = 0; c < occs.size(); ++c) index[occs[c]] = c;
    inst.tensor.assign(inst.tensor_size(), 0.0);
    for (std::size_t i = 0; i < inst.tensor.size(); ++i) {
      const std::size_t c = index.at(inst.occupation_of(i));
      inst.tensor[i] = masses[c] / multinomial_count(occs[c]);
    }
    return inst;
  }

  /// g^{(x) N}.
  static DiscreteInstance product(std::span<const double> g, std::size_t N,
                                  std::vector<std::array<double, kEmbeddingDim>> emb) {
    DiscreteInstance inst;
    inst.S = g.size();
    inst.N = N;
    inst.embedding = std::move(emb);
    inst.tensor.assign(inst.tensor_size(), 0.0);
    for (std::size_t i = 0; i < inst.tensor.size(); ++i) {
      double p = 1.0;
      for (std::size_t s : inst.unflatten(i)) p *= g[s];
      inst.tensor[i] = p;
    }
    return inst;
  }
};

/// States placed on the first embedding axis at 0, step, 2 step, ...
inline std::vector<std::array<double, kEmbeddingDim>> line_embedding(std::size_t S,
                                                                     double step = 1.0) {
  std::vector<std::array<double, kEmbeddingDim>> e(S);
  for (std::size_t a = 0; a < S; ++a) {
    e[a].fill(0.0);
    e[a][0] = step * double(a);
  }
  return e;
}

inline double l1_vec(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

inline void check_probability(std::span<const double> g, std::size_t S, const char* what) {
  if (g.size() != S) throw InputError(std::string(what) + " must have one entry per state");
  double m = 0.0;
  for (double v : g) {
    if (!std::isfinite(v) || v < 0.0) throw InputError(std::string(what) + " must be >= 0");
    m += v;
  }
  if (std::abs(m - 1.0) > 1e-12) throw InputError(std::string(what) + " must sum to 1");
}

/// Discrete weighted Lipschitz norm: max over state pairs with
/// |e_a| <= |e_b| of (1 + |e_a|)^10 |g_a - g_b| / |e_a - e_b|.
inline double proxy_norm(std::span<const double> g,
                         const std::vector<std::array<double, kEmbeddingDim>>& emb) {
  if (g.size() != emb.size()) throw InputError("density and embedding sizes differ");
  auto norm = [](const std::array<double, kEmbeddingDim>& v) {
    double s = 0.0;
    for (double c : v) s += c * c;
    return std::sqrt(s);
  };
  double best = 0.0;
  for (std::size_t a = 0; a < g.size(); ++a)
    for (std::size_t b = 0; b < g.size(); ++b) {
      if (a == b) continue;
      const double na = norm(emb[a]), nb = norm(emb[b]);
      if (na > nb) continue;
      std::array<double, kEmbeddingDim> d;
      for (std::size_t i = 0; i < kEmbeddingDim; ++i) d[i] = emb[a][i] - emb[b][i];
      best = std::max(best, std::pow(1.0 + na, 10.0) * std::abs(g[a] - g[b]) / norm(d));
    }
  return best;
}

// ---------------------------------------------------------------------------
// Instance text format

/// Keys, one per line: `S`, `N`, optional `gamma`, `K`, `f <S values>`, then
/// `embedding` followed by S lines of 6 coordinates and `tensor` followed by
/// S^N values in lexicographic index order. `#` starts a comment.
struct InstanceFile {
  DiscreteInstance instance;
  std::optional<std::vector<double>> f;
  std::optional<double> gamma;
  std::optional<double> K;
};

inline InstanceFile read_instance(std::istream& is) {
  InstanceFile out;
  std::vector<double> tokens_tensor;
  std::string line;
  std::vector<std::string> words;
  while (std::getline(is, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string w;
    while (ls >> w) words.push_back(w);
  }
  std::size_t i = 0;
  auto num = [&](const char* what) {
    if (i >= words.size()) throw InputError(std::string("instance file ended while reading ") + what);
    try {
      std::size_t used = 0;
      const double v = std::stod(words[i], &used);
      if (used != words[i].size()) throw std::invalid_argument("trailing");
      ++i;
      return v;
    } catch (const std::logic_error&) {
      throw InputError(std::string("bad number for ") + what + ": " + words[i]);
    }
  };
  bool have_s = false, have_n = false, have_e = false, have_t = false;
  while (i < words.size()) {
    const std::string key = words[i++];
    if (key == "S") {
      out.instance.S = std::size_t(num("S"));
      have_s = true;
    } else if (key == "N") {
      out.instance.N = std::size_t(num("N"));
      have_n = true;
    } else if (key == "gamma") {
      out.gamma = num("gamma");
    } else if (key == "K") {
      out.K = num("K");
    } else if (key == "f" || key == "embedding" || key == "tensor") {
      if (!have_s || (key == "tensor" && !have_n)) throw InputError("S and N must precede " + key);
      if (key == "f") {
        std::vector<double> f(out.instance.S);
        for (double& v : f) v = num("f");
        out.f = f;
      } else if (key == "embedding") {
        out.instance.embedding.resize(out.instance.S);
        for (auto& p : out.instance.embedding)
          for (double& c : p) c = num("embedding");
        have_e = true;
      } else {
        out.instance.tensor.resize(out.instance.tensor_size());
        for (double& v : out.instance.tensor) v = num("tensor");
        have_t = true;
      }
    } else {
      throw InputError("unknown instance key: " + key);
    }
  }
  if (!have_s || !have_n || !have_e || !have_t)
    throw InputError("instance file needs S, N, embedding and tensor");
  out.instance.validate();
  if (out.f) check_probability(*out.f, out.instance.S, "f");
  return out;
}

inline void write_instance(std::ostream& os, const InstanceFile& file) {
  const auto& inst = file.instance;
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "# discrete N-particle instance\n";
  os << "S " << inst.S << "\nN " << inst.N << "\n";
  if (file.gamma) os << "gamma " << put(*file.gamma) << "\n";
  if (file.K) os << "K " << put(*file.K) << "\n";
  if (file.f) {
    os << "f";
    for (double v : *file.f) os << " " << put(v);
    os << "\n";
  }
  os << "embedding\n";
  for (const auto& p : inst.embedding) {
    for (std::size_t c = 0; c < kEmbeddingDim; ++c) os << (c ? " " : "") << put(p[c]);
    os << "\n";
  }
  os << "tensor\n";
  for (std::size_t i = 0; i < inst.tensor.size(); ++i)
    os << put(inst.tensor[i]) << ((i + 1) % inst.S == 0 ? "\n" : " ");
}

// ---------------------------------------------------------------------------
// Exact evaluation on the finite model

struct AlphaOptions {
  std::size_t net_resolution = 10;  // lattice {n / R}
  bool include_target = true;       // add f itself to the candidate family
  std::vector<std::vector<double>> extra_candidates;
  std::size_t max_iterations = 200000;
  std::size_t workers = 1;
};

struct AlphaComponent {
  double lambda = 0.0;
  std::size_t k = 0;
  std::vector<double> g;
};

struct AlphaResult {
  double value = 0.0;
  std::size_t iterations = 0;
  std::size_t candidates = 0;  // net points passing the K constraint
  double residual = 0.0;       // ||G - F||_1 at the optimum
  std::vector<AlphaComponent> components;
};

/// Candidate one-particle densities: the lattice {n / R}, the uniform
/// density, optional extras and f, kept when proxy_norm <= K.
inline std::vector<std::vector<double>> candidate_net(
    std::size_t S, const std::vector<std::array<double, kEmbeddingDim>>& emb,
    std::span<const double> f, double K, const AlphaOptions& opt) {
  if (opt.net_resolution < 1) throw InputError("net resolution must be >= 1");
  std::vector<std::vector<double>> pts;
  for (const auto& occ : occupations(S, opt.net_resolution)) {
    std::vector<double> g(S);
    for (std::size_t a = 0; a < S; ++a) g[a] = double(occ[a]) / double(opt.net_resolution);
    pts.push_back(std::move(g));
  }
  pts.emplace_back(S, 1.0 / double(S));
  for (const auto& e : opt.extra_candidates) {
    check_probability(e, S, "candidate");
    pts.push_back(e);
  }
  if (opt.include_target) pts.emplace_back(f.begin(), f.end());
  std::vector<std::vector<double>> kept;
  for (auto& g : pts) {
    if (proxy_norm(g, emb) > K) continue;
    if (std::find(kept.begin(), kept.end(), g) != kept.end()) continue;
    kept.push_back(std::move(g));
  }
  return kept;
}

namespace detail {

/// Class-space tables shared by pricing.
struct ClassTables {
  std::size_t S = 0, N = 0;
  std::vector<std::vector<std::size_t>> classes;
  std::map<std::vector<std::size_t>, std::size_t> index;
  // per k: good-block occupations (size N - k), bad-block occupations (size k),
  // and the class of their sum
  std::vector<std::vector<std::vector<std::size_t>>> good, bad;
  std::vector<std::vector<std::vector<std::size_t>>> sum_class;

  ClassTables(std::size_t s, std::size_t n) : S(s), N(n) {
    classes = occupations(S, N);
    for (std::size_t c = 0; c < classes.size(); ++c) index[classes[c]] = c;
    good.resize(N + 1);
    bad.resize(N + 1);
    sum_class.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k) {
      good[k] = occupations(S, N - k);
      bad[k] = occupations(S, k);
      sum_class[k].assign(good[k].size(), std::vector<std::size_t>(bad[k].size()));
      for (std::size_t m = 0; m < good[k].size(); ++m)
        for (std::size_t b = 0; b < bad[k].size(); ++b) {
          std::vector<std::size_t> o(S);
          for (std::size_t a = 0; a < S; ++a) o[a] = good[k][m][a] + bad[k][b][a];
          sum_class[k][m][b] = index.at(o);
        }
    }
  }
};

}  // namespace detail

/// Minimum over mixtures of symmetrized (conditional bad block) x g^{(x)(N-k)}
/// laws with g in the candidate net of sum lambda (m(k) + ||f - g||_1) +
/// ||G - F||_1, solved as a linear program by column generation.
inline AlphaResult alpha_exact_discrete(const DiscreteInstance& inst, std::span<const double> f,
                                        double K, const WeightSpec& spec,
                                        const AlphaOptions& opt = {}) {
  if (inst.S > kMaxExactStates || inst.N > kMaxExactParticles)
    throw CapabilityError("exact evaluation supports S <= 6 and N <= 4");
  inst.validate();
  check_probability(f, inst.S, "f");
  if (spec.N != inst.N) throw InputError("weight spec N differs from the instance N");
  spec.check();
  if (!(K >= 0.0)) throw InputError("K must be >= 0");

  const detail::ClassTables tab(inst.S, inst.N);
  const std::size_t C = tab.classes.size(), R = C + 1, N = inst.N;
  const std::vector<double> F = inst.class_masses();
  const auto net = candidate_net(inst.S, inst.embedding, f, K, opt);

  AlphaResult res;
  res.candidates = net.size();
  if (net.empty()) {
    res.value = std::numeric_limits<double>::infinity();
    return res;
  }

  std::vector<double> m(N + 1), dist(net.size());
  for (std::size_t k = 0; k <= N; ++k) m[k] = weight_m_gamma(k, spec);
  for (std::size_t j = 0; j < net.size(); ++j) dist[j] = l1_vec(f, net[j]);
  // good-block probabilities per (k, g)
  std::vector<std::vector<std::vector<double>>> prob(N + 1);
  for (std::size_t k = 0; k <= N; ++k) {
    prob[k].resize(net.size());
    for (std::size_t j = 0; j < net.size(); ++j) {
      prob[k][j].resize(tab.good[k].size());
      for (std::size_t q = 0; q < tab.good[k].size(); ++q)
        prob[k][j][q] = multinomial_prob(tab.good[k][q], net[j]);
    }
  }

  // Columns: 0..C-1 are r+ (-e_c), C..2C-1 are r- (+e_c), then generated.
  struct Column {
    Eigen::VectorXd a;
    double cost;
    std::size_t k, g;
  };
  std::vector<Column> cols;
  for (std::size_t c = 0; c < 2 * C; ++c) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(Eigen::Index(R));
    a[Eigen::Index(c % C)] = c < C ? -1.0 : 1.0;
    cols.push_back({a, 1.0, 0, 0});
  }
  // all-bad column equal to F with the closest feasible g
  {
    std::size_t jbest = 0;
    for (std::size_t j = 1; j < net.size(); ++j)
      if (dist[j] < dist[jbest]) jbest = j;
    Eigen::VectorXd a(static_cast<Eigen::Index>(R));
    for (std::size_t c = 0; c < C; ++c) a[Eigen::Index(c)] = F[c];
    a[Eigen::Index(C)] = 1.0;
    cols.push_back({a, m[N] + dist[jbest], N, jbest});
  }
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(R));
  for (std::size_t c = 0; c < C; ++c) rhs[Eigen::Index(c)] = F[c];
  rhs[Eigen::Index(C)] = 1.0;

  // A perturbed right-hand side with r- slacks in the start basis removes
  // degeneracy; the optimal basis is then re-priced at the true data.
  std::vector<std::size_t> basis(R);
  for (std::size_t c = 0; c < C; ++c) basis[c] = C + c;
  basis[C] = 2 * C;
  Eigen::VectorXd perturbed = rhs;
  for (std::size_t c = 0; c < C; ++c)
    perturbed[Eigen::Index(c)] += 1e-7 * (1.0 + double(c) / double(C));

  const double tol = 1e-11;
  std::size_t iterations = 0;
  Eigen::VectorXd x;
  // primal simplex from `basis` for right-hand side `b`, with an explicit
  // basis inverse updated per pivot and refactored periodically
  auto solve = [&](const Eigen::VectorXd& b) {
    const auto Ri = static_cast<Eigen::Index>(R);
    Eigen::MatrixXd Binv(Ri, Ri);
    auto refactor = [&] {
      Eigen::MatrixXd B(Ri, Ri);
      for (std::size_t i = 0; i < R; ++i) B.col(Eigen::Index(i)) = cols[basis[i]].a;
      const Eigen::PartialPivLU<Eigen::MatrixXd> lu(B);
      if (!(std::abs(lu.determinant()) > 0.0)) throw NumericError("simplex basis became singular");
      Binv = lu.inverse();
    };
    refactor();
    std::size_t degenerate_run = 0, since_refactor = 0;
    for (;; ++iterations) {
      if (iterations >= opt.max_iterations)
        throw NonConvergenceError("column generation hit the iteration cap", {});
      Eigen::VectorXd cb(Ri);
      for (std::size_t i = 0; i < R; ++i) cb[Eigen::Index(i)] = cols[basis[i]].cost;
      x = Binv * b;
      const Eigen::VectorXd y = Binv.transpose() * cb;
      const bool bland = degenerate_run > 1000;

      // pricing: slacks, then (k, g) blocks in order
      std::optional<std::size_t> enter;
      std::optional<Column> fresh;
      double best_rc = -tol;
      for (std::size_t c = 0; c < 2 * C && !(bland && enter); ++c) {
        const double rc = 1.0 - (c < C ? -y[Eigen::Index(c)] : y[Eigen::Index(c - C)]);
        if (rc < best_rc) {
          best_rc = rc;
          enter = c;
        }
      }
      if (!(bland && enter)) {
        const std::size_t blocks = (N + 1) * net.size();
        std::vector<double> block_rc(blocks, 0.0);
        std::vector<std::vector<double>> vmax(N + 1);
        std::vector<std::vector<std::size_t>> barg(N + 1);
        for (std::size_t k = 0; k <= N; ++k) {
          vmax[k].resize(tab.good[k].size());
          barg[k].resize(tab.good[k].size());
          for (std::size_t q = 0; q < tab.good[k].size(); ++q) {
            double v = -std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t bb = 0; bb < tab.bad[k].size(); ++bb) {
              const double yy = y[Eigen::Index(tab.sum_class[k][q][bb])];
              if (yy > v) {
                v = yy;
                arg = bb;
              }
            }
            vmax[k][q] = v;
            barg[k][q] = arg;
          }
        }
        parallel_for(blocks, opt.workers, [&](std::size_t blk) {
          const std::size_t k = blk / net.size(), j = blk % net.size();
          double s = 0.0;
          for (std::size_t q = 0; q < tab.good[k].size(); ++q) s += prob[k][j][q] * vmax[k][q];
          block_rc[blk] = m[k] + dist[j] - s - y[Eigen::Index(C)];
        });
        std::optional<std::size_t> best_blk;
        for (std::size_t blk = 0; blk < blocks; ++blk) {
          if (block_rc[blk] < best_rc) {
            best_rc = block_rc[blk];
            best_blk = blk;
            if (bland) break;
          }
        }
        if (best_blk) {
          const std::size_t k = *best_blk / net.size(), j = *best_blk % net.size();
          Eigen::VectorXd a = Eigen::VectorXd::Zero(Ri);
          for (std::size_t q = 0; q < tab.good[k].size(); ++q)
            a[Eigen::Index(tab.sum_class[k][q][barg[k][q]])] += prob[k][j][q];
          a[Eigen::Index(C)] = 1.0;
          fresh = Column{a, m[k] + dist[j], k, j};
        }
      }
      if (!enter && !fresh) break;
      std::size_t e;
      if (fresh) {
        cols.push_back(std::move(*fresh));
        e = cols.size() - 1;
      } else {
        e = *enter;
      }
      const Eigen::VectorXd d = Binv * cols[e].a;
      std::optional<std::size_t> leave;
      double ratio = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < R; ++i) {
        if (d[Eigen::Index(i)] <= 1e-12) continue;
        const double r = std::max(0.0, x[Eigen::Index(i)]) / d[Eigen::Index(i)];
        if (r < ratio - 1e-14 || (r <= ratio + 1e-14 && leave && basis[i] < basis[*leave])) {
          ratio = std::min(ratio, r);
          leave = i;
        }
      }
      if (!leave) throw NumericError("unbounded direction in the independence LP");
      degenerate_run = ratio <= 1e-14 ? degenerate_run + 1 : 0;
      basis[*leave] = e;
      if (++since_refactor >= 100) {
        refactor();
        since_refactor = 0;
      } else {
        const auto r = Eigen::Index(*leave);
        const double piv = d[r];
        const Eigen::RowVectorXd prow = Binv.row(r) / piv;
        Binv.noalias() -= d * prow;
        Binv.row(r) = prow;
      }
    }
    refactor();
    x = Binv * b;
  };
  solve(perturbed);
  {
    Eigen::MatrixXd B(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(R));
    for (std::size_t i = 0; i < R; ++i) B.col(Eigen::Index(i)) = cols[basis[i]].a;
    const Eigen::VectorXd xt = B.partialPivLu().solve(rhs);
    if (xt.minCoeff() < -1e-12) {
      for (std::size_t c = 0; c < C; ++c) basis[c] = c;
      basis[C] = 2 * C;
    }
  }
  solve(rhs);
  res.iterations = iterations;

  double value = 0.0;
  for (std::size_t i = 0; i < R; ++i) {
    const double xi = std::max(0.0, x[Eigen::Index(i)]);
    const auto& col = cols[basis[i]];
    value += xi * col.cost;
    if (basis[i] < 2 * C) {
      res.residual += xi;
    } else if (xi > 0.0) {
      res.components.push_back({xi, col.k, net[col.g]});
    }
  }
  res.value = value;
  return res;
}

// ---------------------------------------------------------------------------
// Candidate upper bounds

/// One component on the finite model: lambda, bad count k, g, and the
/// bad-block law over S^k (row-major; a single 1 when k = 0).
struct DiscreteComponent {
  double lambda = 1.0;
  std::size_t k = 0;
  std::vector<double> g;
  std::vector<double> chi;
};
using DiscreteMixture = std::vector<DiscreteComponent>;

/// Class masses of sum lambda_i Symm{chi_i x g_i^{(x)(N-k_i)}}.
inline std::vector<double> mixture_class_masses(const DiscreteMixture& mix, std::size_t S,
                                                std::size_t N) {
  const detail::ClassTables tab(S, N);
  std::vector<double> G(tab.classes.size(), 0.0);
  double lsum = 0.0;
  for (const auto& comp : mix) {
    if (!(comp.lambda >= 0.0)) throw InputError("mixture weights must be >= 0");
    if (comp.k > N) throw InputError("bad count exceeds N");
    check_probability(comp.g, S, "component g");
    std::size_t chi_size = 1;
    for (std::size_t i = 0; i < comp.k; ++i) chi_size *= S;
    if (comp.chi.size() != chi_size) throw InputError("chi must have S^k entries");
    double chi_mass = 0.0;
    for (double v : comp.chi) {
      if (!(v >= 0.0)) throw InputError("chi must be >= 0");
      chi_mass += v;
    }
    if (std::abs(chi_mass - 1.0) > 1e-12) throw InputError("chi must be normalized");
    lsum += comp.lambda;
    // occupation law of the bad block
    std::vector<double> bad_law(tab.bad[comp.k].size(), 0.0);
    std::map<std::vector<std::size_t>, std::size_t> bad_index;
    for (std::size_t b = 0; b < tab.bad[comp.k].size(); ++b) bad_index[tab.bad[comp.k][b]] = b;
    for (std::size_t t = 0; t < chi_size; ++t) {
      std::vector<std::size_t> occ(S, 0);
      std::size_t r = t;
      for (std::size_t i = 0; i < comp.k; ++i) {
        ++occ[r % S];
        r /= S;
      }
      bad_law[bad_index.at(occ)] += comp.chi[t];
    }
    for (std::size_t q = 0; q < tab.good[comp.k].size(); ++q) {
      const double pq = multinomial_prob(tab.good[comp.k][q], comp.g);
      for (std::size_t b = 0; b < bad_law.size(); ++b)
        G[tab.sum_class[comp.k][q][b]] += comp.lambda * pq * bad_law[b];
    }
  }
  if (std::abs(lsum - 1.0) > 1e-12) throw InputError("mixture weights must sum to 1");
  return G;
}

struct UpperBound {
  double value = std::numeric_limits<double>::infinity();
  std::size_t best = 0;  // index of the minimizing candidate
  std::vector<double> per_candidate;
};

/// min over candidates of sum lambda_i (m(k_i) + ||f - g_i||_1) + ||G - F||_1.
inline UpperBound alpha_upper_bound(const DiscreteInstance& inst, std::span<const double> f,
                                    double K, const WeightSpec& spec,
                                    const std::vector<DiscreteMixture>& candidates) {
  inst.validate();
  check_probability(f, inst.S, "f");
  if (spec.N != inst.N) throw InputError("weight spec N differs from the instance N");
  if (candidates.empty()) throw InputError("need at least one candidate");
  const std::vector<double> F = inst.class_masses();
  UpperBound ub;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    double v = 0.0;
    for (const auto& comp : candidates[c]) {
      if (proxy_norm(comp.g, inst.embedding) > K)
        throw InputError("candidate g violates the K constraint");
      v += comp.lambda * (weight_m_gamma(comp.k, spec) + l1_vec(f, comp.g));
    }
    v += l1_vec(mixture_class_masses(candidates[c], inst.S, inst.N), F);
    ub.per_candidate.push_back(v);
    if (v < ub.value) {
      ub.value = v;
      ub.best = c;
    }
  }
  return ub;
}

/// Law description for continuous space: either a product h^{(x) N} or a law
/// with no usable structure.
template <int D>
struct LawDescription {
  std::size_t N = 1;
  std::optional<GridDensity<D>> product_factor;
};

enum class BadBlock { Product, WholeLaw };

template <int D>
struct ContinuousComponent {
  double lambda = 1.0;
  std::size_t k = 0;
  GridDensity<D> g;
  BadBlock bad = BadBlock::Product;  // WholeLaw: k = N and the block is F itself
};
template <int D>
using ContinuousMixture = std::vector<ContinuousComponent<D>>;

struct ContinuousBoundOptions {
  WeightedNormOptions norm;
  bool check_norm = true;  // estimate ||g||_<-> and reject candidates above K
};

/// Continuous-space upper bound. ||G - F||_1 is evaluated only when it is
/// zero by construction: G = F as one all-bad block, or F = h^{(x) N} and
/// every component is the k = 0 product of h.
template <int D>
UpperBound alpha_upper_bound(const LawDescription<D>& F, const GridDensity<D>& f, double K,
                             const WeightSpec& spec,
                             const std::vector<ContinuousMixture<D>>& candidates,
                             const ContinuousBoundOptions& opt = {}) {
  if (spec.N != F.N) throw InputError("weight spec N differs from the law N");
  if (candidates.empty()) throw InputError("need at least one candidate");
  UpperBound ub;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto& mix = candidates[c];
    double lsum = 0.0, v = 0.0;
    bool whole = mix.size() == 1 && mix[0].bad == BadBlock::WholeLaw && mix[0].k == F.N;
    bool product_match = F.product_factor.has_value();
    for (const auto& comp : mix) {
      if (!(comp.lambda >= 0.0)) throw InputError("mixture weights must be >= 0");
      if (comp.k > F.N) throw InputError("bad count exceeds N");
      if (comp.bad == BadBlock::WholeLaw && comp.k != F.N)
        throw InputError("a whole-law block needs k = N");
      if (opt.check_norm &&
          weighted_lipschitz_norm(evaluable(comp.g), 2 * D, opt.norm).value > K)
        throw InputError("candidate g violates the K constraint");
      lsum += comp.lambda;
      v += comp.lambda * (weight_m_gamma(comp.k, spec) + l1_distance(f, comp.g));
      if (product_match)
        product_match = comp.k == 0 && comp.bad == BadBlock::Product &&
                        comp.g.same_layout(*F.product_factor) &&
                        comp.g.values == F.product_factor->values;
    }
    if (std::abs(lsum - 1.0) > 1e-12) throw InputError("mixture weights must sum to 1");
    if (!whole && !product_match)
      throw CapabilityError("||G - F||_1 is not evaluable for this candidate");
    ub.per_candidate.push_back(v);
    if (v < ub.value) {
      ub.value = v;
      ub.best = c;
    }
  }
  return ub;
}

/// G = F fallback: m(N) + min over feasible g of ||f - g||_1.
template <int D>
double alpha_fallback_bound(const GridDensity<D>& f, double K, const WeightSpec& spec,
                            const std::vector<GridDensity<D>>& gs,
                            const ContinuousBoundOptions& opt = {}) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& g : gs) {
    if (opt.check_norm && weighted_lipschitz_norm(evaluable(g), 2 * D, opt.norm).value > K)
      continue;
    best = std::min(best, l1_distance(f, g));
  }
  if (!std::isfinite(best)) throw InputError("no candidate satisfies the K constraint");
  return weight_m_gamma(spec.N, spec) + best;
}

// ---------------------------------------------------------------------------
// Marginal inequality ||F^(s) - f^{(x)s}||_1 <= 2 s (alpha + s / N)

struct MarginalBoundReport {
  bool pass = false;
  double lhs = 0.0;
  double rhs = 0.0;
  double allowance = 0.0;  // fluctuation allowance added to rhs
  double slack = 0.0;      // rhs + allowance - lhs
};

inline MarginalBoundReport marginal_bound_report(double lhs, std::size_t s, std::size_t N,
                                                 double alpha, double allowance = 0.0) {
  if (s < 1 || s > N) throw InputError("s must lie in [1, N]");
  MarginalBoundReport r;
  r.lhs = lhs;
  r.rhs = 2.0 * double(s) * (alpha + double(s) / double(N));
  r.allowance = allowance;
  r.slack = r.rhs + allowance - lhs;
  r.pass = r.slack >= 0.0;
  return r;
}

/// ||F^(s) - f^{(x)s}||_1 exactly on the finite model.
inline double discrete_marginal_l1(const DiscreteInstance& inst, std::span<const double> f,
                                   std::size_t s) {
  inst.validate();
  check_probability(f, inst.S, "f");
  if (s < 1 || s > inst.N) throw InputError("s must lie in [1, N]");
  std::size_t size = 1;
  for (std::size_t i = 0; i < s; ++i) size *= inst.S;
  std::vector<double> marg(size, 0.0);
  const std::size_t rest = inst.tensor_size() / size;
  for (std::size_t i = 0; i < inst.tensor.size(); ++i) marg[i / rest] += inst.tensor[i];
  double l1 = 0.0;
  for (std::size_t t = 0; t < size; ++t) {
    double p = 1.0;
    std::size_t r = t;
    for (std::size_t i = 0; i < s; ++i) {
      p *= f[r % inst.S];
      r /= inst.S;
    }
    l1 += std::abs(marg[t] - p);
  }
  return l1;
}

inline MarginalBoundReport marginal_bound_check(const DiscreteInstance& inst,
                                                std::span<const double> f, std::size_t s,
                                                double alpha) {
  return marginal_bound_report(discrete_marginal_l1(inst, f, s), s, inst.N, alpha);
}

/// Sampled variant: the measured distance enters together with its
/// fluctuation floor (expected L1 of a histogram of the exact law).
inline MarginalBoundReport marginal_bound_check(const L1Estimate& measured, std::size_t s,
                                                std::size_t N, double alpha) {
  return marginal_bound_report(measured.value, s, N, alpha, measured.floor.expected);
}

}  // namespace chaoslab
