#pragma once

// Plan runner: reference mean-field solution, seeded (N, repetition) cells,
// ordered aggregation into metric records, and CSV / manifest / SVG outputs.

#include <chaoslab/density.hpp>
#include <chaoslab/dynamics.hpp>
#include <chaoslab/fit.hpp>
#include <chaoslab/kernels.hpp>
#include <chaoslab/meanfield.hpp>
#include <chaoslab/metrics.hpp>
#include <chaoslab/parallel.hpp>
#include <chaoslab/plan.hpp>
#include <chaoslab/random.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace chaoslab {

inline constexpr const char* kLibraryVersion = "1.0.0";
inline constexpr std::size_t kBootstrapResamples = 200;

struct MetricRecord {
  std::string metric;
  std::size_t N = 0;
  double t = 0.0;
  std::size_t reps = 0;
  double value = 0.0;
  double ci_half_width = 0.0;
  std::uint64_t seed = 0;
  std::string plan_hash;
};

struct RunOptions {
  std::size_t workers = 1;
  bool resume = false;
  bool write_svg = true;
  std::function<void(const std::string&)> log;  // progress messages, may be empty
};

struct RunResult {
  std::vector<MetricRecord> records;
  std::vector<std::string> files;  // written outputs, relative to output_dir
  std::size_t cells_computed = 0;
  std::size_t cells_reused = 0;
  std::vector<double> reference_residuals;
};

// ---------------------------------------------------------------------------
// Formatting

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* kRecordHeader = "metric,N,t,reps,value,ci_half_width,seed,plan_hash";

inline std::string records_csv(const std::vector<MetricRecord>& recs) {
  std::string out = std::string(kRecordHeader) + "\n";
  for (const auto& r : recs) {
    out += r.metric + "," + std::to_string(r.N) + "," + format_double(r.t) + "," +
           std::to_string(r.reps) + "," + format_double(r.value) + "," +
           format_double(r.ci_half_width) + "," + std::to_string(r.seed) + "," + r.plan_hash +
           "\n";
  }
  return out;
}

/// Parses a CSV with a header row into named columns of strings.
inline std::map<std::string, std::vector<std::string>> read_csv_columns(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InputError("empty CSV");
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur.push_back(c);
      }
    }
    f.push_back(cur);
    return f;
  };
  const auto header = split(line);
  std::map<std::string, std::vector<std::string>> cols;
  for (const auto& h : header) cols[h];
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw InputError("CSV row " + std::to_string(row) + " has the wrong field count");
    for (std::size_t i = 0; i < f.size(); ++i) cols[header[i]].push_back(f[i]);
  }
  return cols;
}

/// Log-log chart of value against N, one polyline per time. Depends only on
/// the records.
inline std::string records_svg(const std::string& metric, const std::vector<MetricRecord>& recs) {
  const double W = 480, H = 320, L = 60, R = 20, T = 30, B = 40;
  std::map<double, std::vector<std::pair<double, double>>> series;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& r : recs) {
    if (!(r.value > 0.0)) continue;
    const double lx = std::log10(double(r.N)), ly = std::log10(r.value);
    series[r.t].push_back({lx, ly});
    x0 = std::min(x0, lx);
    x1 = std::max(x1, lx);
    y0 = std::min(y0, ly);
    y1 = std::max(y1, ly);
  }
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\">\n", W,
                H);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">%s "
                "(log10 value vs log10 N)</text>\n",
                L, metric.c_str());
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%.0f\" y=\"%.0f\" width=\"%.0f\" height=\"%.0f\" fill=\"none\" "
                "stroke=\"black\"/>\n",
                L, T, W - L - R, H - T - B);
  s += buf;
  if (series.empty()) return s + "</svg>\n";
  if (x1 - x0 < 1e-12) x1 = x0 + 1;
  if (y1 - y0 < 1e-12) y1 = y0 + 1;
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"10\">%.3g</text>\n<text x=\"%.0f\" "
                "y=\"%.0f\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n",
                L, H - B + 14, x0, W - R, H - B + 14, x1);
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n",
                L - 4, H - B, y0, L - 4, T + 10, y1);
  s += buf;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::size_t c = 0;
  for (auto& [t, pts] : series) {
    std::sort(pts.begin(), pts.end());
    s += "<polyline fill=\"none\" stroke=\"" + std::string(colors[c % 5]) + "\" points=\"";
    for (const auto& [x, y] : pts) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x), py(y));
      s += buf;
    }
    s += "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.0f\" y=\"%.0f\" font-size=\"10\" fill=\"%s\">t=%.4g</text>\n",
                  W - R - 60, T + 14 + 12 * double(c), colors[c % 5], t);
    s += buf;
    ++c;
  }
  return s + "</svg>\n";
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Creates the directory and proves it writable.
inline void ensure_writable_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out || !(out << "ok")) throw IoError("output directory is not writable: " + dir.string());
  }
  std::filesystem::remove(probe, ec);
}

// ---------------------------------------------------------------------------
// Fitting records

/// Log-log fit of value against N for one metric and time; needs three
/// distinct N.
inline RateFit fit_records(const std::vector<MetricRecord>& recs, const std::string& metric,
                           double t) {
  std::vector<double> x, y;
  std::set<std::size_t> distinct;
  for (const auto& r : recs)
    if (r.metric == metric && r.t == t) {
      x.push_back(double(r.N));
      y.push_back(r.value);
      distinct.insert(r.N);
    }
  if (distinct.size() < 3) throw DegenerateInputError("rate fit needs at least three distinct N");
  return fit_rate(x, y);
}

// ---------------------------------------------------------------------------
// Reference solution

template <int D>
struct ReferenceData {
  std::vector<CloudDensity<D>> at;  // one cloud per plan time
  std::vector<double> residuals;    // Picard history
};

namespace detail {

template <int D>
GaussianBump<D> bump_of(const ExperimentPlan& p) {
  return GaussianBump<D>{p.kernel.amplitude, p.kernel.width};
}

template <int D, class Field>
std::vector<CloudDensity<D>> carry(const std::vector<PhasePoint<D>>& x0, const Field& field,
                                   const std::vector<double>& times, double dt,
                                   std::size_t workers) {
  std::vector<std::vector<PhasePoint<D>>> out(times.size(), std::vector<PhasePoint<D>>(x0.size()));
  parallel_for(x0.size(), workers, [&](std::size_t i) {
    PhasePoint<D> y = x0[i];
    double t = 0.0;
    for (std::size_t s = 0; s < times.size(); ++s) {
      y = effective_flow<D>(y, field, t, times[s], dt);
      t = times[s];
      out[s][i] = y;
    }
  });
  std::vector<CloudDensity<D>> clouds;
  for (auto& pts : out) clouds.push_back(CloudDensity<D>::uniform(std::move(pts)));
  return clouds;
}

}  // namespace detail

template <int D>
ReferenceData<D> build_reference(const ExperimentPlan& p, std::size_t workers) {
  const auto& rs = p.reference;
  Rng rng = make_rng(p.seed, 0, 0, "reference");
  const auto x0 = sample_gaussian<D>(rs.points, p.initial.sigma_q, p.initial.sigma_p, rng);
  ReferenceData<D> ref;
  const double T = p.times.back();
  if (p.kernel.id == "free") {
    ref.at = detail::carry<D>(x0, FreeField<D>{}, p.times, rs.dt, workers);
    return ref;
  }
  if constexpr (D == 3) {
    CloudPicardOptions opt{T, rs.slices, rs.dt, rs.tol, rs.max_iter, workers};
    RadialGaussianField::Options fo{rs.table_size, rs.max_sources};
    const auto bump = detail::bump_of<3>(p);
    auto build = [&](const TimeDensity<CloudDensity<3>>& f) {
      return RadialGaussianField(f, bump, fo);
    };
    auto res = cloud_picard_solve<3>(x0, build, opt);
    ref.residuals = res.residuals;
    ref.at = detail::carry<3>(x0, build(res.density), p.times, rs.dt, workers);
  } else {
    const double hw = rs.grid_half_width;
    std::array<double, 2 * D> lo, hi, mean{}, sigma;
    std::array<std::size_t, 2 * D> shape;
    for (int a = 0; a < 2 * D; ++a) {
      lo[a] = -hw;
      hi[a] = hw;
      shape[a] = rs.grid_bins;
      sigma[a] = a < D ? p.initial.sigma_q : p.initial.sigma_p;
    }
    const auto f0 = gaussian_grid<D>(lo, hi, shape, mean, sigma);
    const auto k = newtonian_pair_kernel<D>(detail::bump_of<D>(p));
    PicardOptions opt{T, rs.slices, rs.dt, rs.tol, rs.max_iter, 0.0, workers};
    auto res = picard_vlasov_solve<D>(f0, k, opt);
    ref.residuals = res.residuals;
    SlicedField<D, std::decay_t<decltype(k)>> field(res.density, k);
    ref.at = detail::carry<D>(x0, field, p.times, rs.dt, workers);
  }
  return ref;
}

// ---------------------------------------------------------------------------
// Cells

struct CellTimeResult {
  double bl_lower = 0.0;
  double bl_upper = 0.0;
  std::vector<double> hist1;   // one-particle histogram counts, overflow last
  std::vector<double> single;  // first histogram axis only
  std::vector<double> pairs;   // pair histogram on (axis, partner's axis)
};

struct CellResult {
  std::size_t N = 0;
  std::size_t rep = 0;
  std::vector<CellTimeResult> times;
};

inline Json cell_to_json(const CellResult& c, const std::string& hash) {
  Json j;
  j["plan_hash"] = hash;
  j["N"] = c.N;
  j["rep"] = c.rep;
  Json arr = Json::array();
  for (const auto& t : c.times)
    arr.push_back({{"bl_lower", t.bl_lower},
                   {"bl_upper", t.bl_upper},
                   {"hist1", t.hist1},
                   {"single", t.single},
                   {"pairs", t.pairs}});
  j["times"] = arr;
  return j;
}

inline std::optional<CellResult> cell_from_json(const Json& j, const std::string& hash,
                                                std::size_t N, std::size_t rep,
                                                std::size_t n_times) {
  try {
    if (j.at("plan_hash").get<std::string>() != hash) return std::nullopt;
    CellResult c;
    c.N = j.at("N").get<std::size_t>();
    c.rep = j.at("rep").get<std::size_t>();
    if (c.N != N || c.rep != rep || j.at("times").size() != n_times) return std::nullopt;
    for (const auto& t : j.at("times")) {
      CellTimeResult r;
      r.bl_lower = t.at("bl_lower").get<double>();
      r.bl_upper = t.at("bl_upper").get<double>();
      r.hist1 = t.at("hist1").get<std::vector<double>>();
      r.single = t.at("single").get<std::vector<double>>();
      r.pairs = t.at("pairs").get<std::vector<double>>();
      c.times.push_back(std::move(r));
    }
    return c;
  } catch (const Json::exception&) {
    return std::nullopt;
  }
}

inline std::string cell_file_name(std::size_t N, std::size_t rep) {
  return "N" + std::to_string(N) + "_rep" + std::to_string(rep) + ".json";
}

struct HistogramSpecs {
  HistogramSpec one, single, pair;
};

template <int D>
HistogramSpecs histogram_specs(const ExperimentPlan& p) {
  const auto& h = p.histogram;
  const std::size_t a0 = h.axes.front();
  return {HistogramSpec::uniform(h.axes, h.lo, h.hi, h.bins),
          HistogramSpec::uniform({a0}, h.lo, h.hi, h.bins),
          HistogramSpec::uniform({a0, 2 * D + a0}, h.lo, h.hi, h.bins)};
}

inline bool wants(const ExperimentPlan& p, const std::string& m) {
  return std::find(p.metrics.begin(), p.metrics.end(), m) != p.metrics.end();
}

/// Rethrows a library error with the cell identity prepended.
[[noreturn]] inline void rethrow_in_cell(const Error& e, std::size_t N, std::size_t rep,
                                         double t) {
  throw Error(e.kind(), "cell N=" + std::to_string(N) + " rep=" + std::to_string(rep) +
                            " t=" + format_double(t) + ": " + e.what());
}

template <int D, class K>
CellResult run_cell(const ExperimentPlan& p, const K& k, std::size_t N, std::size_t rep,
                    const std::vector<BLDictionary<D>>& dicts, const HistogramSpecs& specs) {
  CellResult cell{N, rep, {}};
  Rng rng = make_rng(p.seed, N, rep, "initial");
  Configuration<D> X = sample_gaussian<D>(N, p.initial.sigma_q, p.initial.sigma_p, rng);
  SolverSettings cfg;
  cfg.dt = p.dt;
  cfg.method = p.method == "psi" ? Method::Psi : Method::RK4;
  cfg.record_every = std::numeric_limits<std::size_t>::max();
  double t = 0.0;
  const bool need_bl = wants(p, "d_bl"), need_blu = wants(p, "d_bl_upper");
  const bool need_h1 = wants(p, "marginal1_l1") || wants(p, "marginal1_excess");
  const bool need_h2 = wants(p, "marginal2_chaos");
  for (std::size_t s = 0; s < p.times.size(); ++s) {
    try {
      cfg.t_start = t;
      X = evolve_micro<D>(X, k, p.times[s], cfg).states.back();
      t = p.times[s];
      CellTimeResult r;
      const std::span<const PhasePoint<D>> mu(X);
      if (need_bl) r.bl_lower = dicts[s].lower(mu);
      if (need_blu) r.bl_upper = dicts[s].upper(mu);
      if (need_h1) {
        Histogram h(specs.one);
        for (const auto& x : X) h.add(x.x);
        r.hist1 = h.counts();
      }
      if (need_h2) {
        Histogram h(specs.single);
        for (const auto& x : X) h.add(x.x);
        r.single = h.counts();
        MarginalOptions mo;
        mo.max_tuples_per_run = p.histogram.max_pairs_per_run;
        mo.seed = substream_seed(p.seed, N, rep, "pairs" + std::to_string(s));
        r.pairs = estimate_marginal<D>({X}, 2, specs.pair, mo).histogram.counts();
      }
      cell.times.push_back(std::move(r));
    } catch (const Error& e) {
      rethrow_in_cell(e, N, rep, p.times[s]);
    }
  }
  return cell;
}

namespace detail {

inline std::vector<double> add_counts(const std::vector<std::vector<double>>& parts) {
  std::vector<double> s(parts.front().size(), 0.0);
  for (const auto& v : parts)
    for (std::size_t i = 0; i < v.size(); ++i) s[i] += v[i];
  return s;
}

inline std::vector<double> to_masses(std::vector<double> c) {
  double tot = 0.0;
  for (double v : c) tot += v;
  if (!(tot > 0.0)) throw DegenerateInputError("empty histogram");
  for (double& v : c) v /= tot;
  return c;
}

inline std::pair<double, double> mean_ci(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, 1.959963984540054 * std::sqrt(ss / double(v.size() - 1) / double(v.size()))};
}

}  // namespace detail

/// Aggregates cells (ordered by N, then repetition) into records.
template <int D>
std::vector<MetricRecord> aggregate(const ExperimentPlan& p, const std::string& hash,
                                    const std::vector<CellResult>& cells,
                                    const ReferenceData<D>& ref, const HistogramSpecs& specs) {
  std::vector<MetricRecord> out;
  const std::size_t R = p.repetitions;
  for (std::size_t ni = 0; ni < p.N.size(); ++ni) {
    const std::size_t N = p.N[ni];
    for (std::size_t s = 0; s < p.times.size(); ++s) {
      const double t = p.times[s];
      auto rec = [&](const std::string& m, double v, double ci) {
        if (!std::isfinite(v)) throw NumericError("metric " + m + " is not finite");
        out.push_back({m, N, t, R, v, ci, p.seed, hash});
      };
      std::vector<const CellTimeResult*> rs;
      for (std::size_t r = 0; r < R; ++r) rs.push_back(&cells[ni * R + r].times[s]);
      for (const auto& m : p.metrics) {
        if (m == "d_bl" || m == "d_bl_upper") {
          std::vector<double> v;
          for (auto* c : rs) v.push_back(m == "d_bl" ? c->bl_lower : c->bl_upper);
          const auto [mean, ci] = detail::mean_ci(v);
          rec(m, mean, ci);
        } else if (m == "marginal1_l1" || m == "marginal1_excess") {
          std::vector<std::vector<double>> parts;
          for (auto* c : rs) parts.push_back(c->hist1);
          const auto pm = detail::to_masses(detail::add_counts(parts));
          Histogram h(specs.one);
          for (const auto& x : ref.at[s].points) h.add(x.x);
          const auto pr = h.masses();
          double l1 = 0.0;
          for (std::size_t i = 0; i < pm.size(); ++i) l1 += std::abs(pm[i] - pr[i]);
          const auto floor = multinomial_floor(pr, double(N * R), double(ref.at[s].size()));
          if (m == "marginal1_l1")
            rec(m, l1, floor.expected);
          else
            rec(m, l1 - floor.expected, floor.expected);
        } else if (m == "marginal2_chaos") {
          const std::size_t B = p.histogram.bins;
          auto gap = [&](const std::vector<std::size_t>& pick) {
            std::vector<std::vector<double>> sp, pp;
            for (auto r : pick) {
              sp.push_back(rs[r]->single);
              pp.push_back(rs[r]->pairs);
            }
            const auto p1 = detail::to_masses(detail::add_counts(sp));
            const auto p2 = detail::to_masses(detail::add_counts(pp));
            std::vector<double> prod(B * B + 1, 0.0);
            for (std::size_t a = 0; a < B; ++a)
              for (std::size_t b = 0; b < B; ++b) prod[a * B + b] = p1[a] * p1[b];
            prod[B * B] = 1.0 - (1.0 - p1[B]) * (1.0 - p1[B]);
            double l1 = 0.0;
            for (std::size_t i = 0; i < prod.size(); ++i) l1 += std::abs(p2[i] - prod[i]);
            return l1;
          };
          std::vector<std::size_t> all(R);
          std::iota(all.begin(), all.end(), 0);
          // bootstrap over repetitions
          Rng rng = make_rng(p.seed, N, s, "bootstrap");
          std::uniform_int_distribution<std::size_t> pick(0, R - 1);
          std::vector<double> boot(kBootstrapResamples);
          std::vector<std::size_t> idx(R);
          for (auto& b : boot) {
            for (auto& i : idx) i = pick(rng);
            b = gap(idx);
          }
          const double half = detail::mean_ci(boot).second * std::sqrt(double(boot.size()));
          rec(m, gap(all), half);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running a plan

namespace detail {

template <int D, class K>
RunResult run_plan_impl(const ExperimentPlan& p, const K& k, const RunOptions& opt) {
  namespace fs = std::filesystem;
  const std::string hash = plan_hash(p);
  const fs::path dir(p.output_dir);
  ensure_writable_dir(dir);
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  RunResult res;
  std::vector<MetricRecord> records;
  if (!p.metrics.empty()) {
    ensure_writable_dir(dir / "cells");
    log("building reference (" + std::to_string(p.reference.points) + " points)");
    const auto ref = build_reference<D>(p, opt.workers);
    res.reference_residuals = ref.residuals;
    std::vector<BLDictionary<D>> dicts;
    if (wants(p, "d_bl") || wants(p, "d_bl_upper")) {
      for (std::size_t s = 0; s < p.times.size(); ++s) {
        BLOptions bo;
        bo.dictionary_size = p.bl_dictionary;
        bo.seed = substream_seed(p.seed, 0, s, "bl");
        dicts.emplace_back(bl_reference<D>(ref.at[s]), bo);
      }
    }
    const auto specs = histogram_specs<D>(p);
    const std::size_t R = p.repetitions, ncells = p.N.size() * R;
    std::vector<CellResult> cells(ncells);
    std::vector<char> have(ncells, 0);
    if (opt.resume) {
      for (std::size_t c = 0; c < ncells; ++c) {
        const auto path = dir / "cells" / cell_file_name(p.N[c / R], c % R);
        if (!fs::exists(path)) continue;
        Json j;
        try {
          j = Json::parse(read_file(path));
        } catch (const Json::parse_error&) {
          continue;
        }
        if (auto cell = cell_from_json(j, hash, p.N[c / R], c % R, p.times.size())) {
          cells[c] = std::move(*cell);
          have[c] = 1;
          ++res.cells_reused;
        }
      }
    }
    std::vector<std::size_t> todo;
    for (std::size_t c = 0; c < ncells; ++c)
      if (!have[c]) todo.push_back(c);
    log("computing " + std::to_string(todo.size()) + " cells, reusing " +
        std::to_string(res.cells_reused));
    parallel_for(todo.size(), opt.workers, [&](std::size_t i) {
      const std::size_t c = todo[i];
      cells[c] = run_cell<D>(p, k, p.N[c / R], c % R, dicts, specs);
      write_file_atomic(dir / "cells" / cell_file_name(p.N[c / R], c % R),
                        cell_to_json(cells[c], hash).dump());
    });
    res.cells_computed = todo.size();
    records = aggregate<D>(p, hash, cells, ref, specs);
  }

  // outputs
  Json manifest;
  manifest["plan"] = plan_to_json(p);
  manifest["plan_hash"] = hash;
  manifest["seed"] = p.seed;
  manifest["versions"] = {{"chaoslab", kLibraryVersion},
                          {"schema_version", kPlanSchemaVersion},
                          {"compiler", __VERSION__}};
  manifest["reference_picard_residuals"] = res.reference_residuals;
  Json files = Json::object();
  for (const auto& m : p.metrics) {
    std::vector<MetricRecord> mine;
    for (const auto& r : records)
      if (r.metric == m) mine.push_back(r);
    const std::string csv = records_csv(mine), name = m + ".csv";
    write_file_atomic(dir / name, csv);
    files[name] = sha256_hex(csv);
    res.files.push_back(name);
    if (opt.write_svg) {
      const std::string svg = records_svg(m, mine), sname = m + ".svg";
      write_file_atomic(dir / sname, svg);
      files[sname] = sha256_hex(svg);
      res.files.push_back(sname);
    }
  }
  manifest["files"] = files;
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  res.files.push_back("manifest.json");
  res.records = std::move(records);
  return res;
}

}  // namespace detail

/// Runs every (N, repetition) cell of the plan and writes the outputs under
/// plan.output_dir. The output directory is checked before any computation.
inline RunResult run_plan(const ExperimentPlan& p, const RunOptions& opt = {}) {
  validate(p);
  if (p.dimension == 3) {
    if (p.kernel.id == "free") return detail::run_plan_impl<3>(p, FreeKernel<3>{}, opt);
    return detail::run_plan_impl<3>(p, newtonian_pair_kernel<3>(detail::bump_of<3>(p)), opt);
  }
  if (p.kernel.id == "free") return detail::run_plan_impl<1>(p, FreeKernel<1>{}, opt);
  return detail::run_plan_impl<1>(p, newtonian_pair_kernel<1>(detail::bump_of<1>(p)), opt);
}

/// Recomputes the SHA-256 of every file listed in a manifest; returns the
/// names whose bytes no longer match.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  const Json m = Json::parse(read_file(dir / "manifest.json"));
  std::vector<std::string> bad;
  for (const auto& [name, h] : m.at("files").items())
    if (sha256_hex(read_file(dir / name)) != h.get<std::string>()) bad.push_back(name);
  return bad;
}

}  // namespace chaoslab
