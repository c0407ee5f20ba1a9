#pragma once

// Experiment plans: JSON schema, validation, canonical form and hashing.

#include <chaoslab/core.hpp>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace chaoslab {

using Json = nlohmann::json;

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorKind::Io, "SHA-256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline constexpr int kPlanSchemaVersion = 1;

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m{"d_bl",           "d_bl_upper",     "marginal1_l1",
                                          "marginal1_excess", "marginal2_chaos"};
  return m;
}

struct KernelSpec {
  std::string id = "gaussian_bump";  // gaussian_bump | free
  double amplitude = 1.0;
  double width = 1.0;
};

struct InitialSpec {
  std::string id = "gaussian";  // centred product Gaussian
  double sigma_q = 1.0;
  double sigma_p = 1.0;
};

/// Mean-field reference f_t, carried as a cloud of `points` samples of f_0.
struct ReferenceSpec {
  std::size_t points = 65536;
  std::size_t slices = 10;     // Picard time slices on [0, max t]
  double dt = 0.025;           // characteristic step
  double tol = 1e-6;           // Picard tolerance
  std::size_t max_iter = 12;
  std::size_t table_size = 1024;  // radial force table (dimension 3)
  std::size_t max_sources = 4096; // radial sources per slice, 0 = all
  // grid Picard (dimension 1)
  double grid_half_width = 6.0;
  std::size_t grid_bins = 64;
};

struct HistogramPlan {
  std::vector<std::size_t> axes{0, 1};  // one-particle coordinates
  double lo = -4.0;
  double hi = 4.0;
  std::size_t bins = 10;
  std::size_t max_pairs_per_run = 200000;
};

struct ExperimentPlan {
  int schema_version = kPlanSchemaVersion;
  int dimension = 3;
  KernelSpec kernel;
  InitialSpec initial;
  std::vector<std::size_t> N;
  std::size_t repetitions = 1;
  std::vector<double> times;
  double dt = 0.025;
  std::string method = "rk4";
  std::vector<std::string> metrics;
  ReferenceSpec reference;
  HistogramPlan histogram;
  std::size_t bl_dictionary = 1024;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
};

namespace detail {

template <class T>
T plan_get(const Json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw PlanError(std::string("plan field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const Json& j, const std::set<std::string>& allowed, const char* where) {
  if (!j.is_object()) throw PlanError(std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw PlanError(std::string("unknown field '") + k + "' in " + where);
}

}  // namespace detail

inline void validate(const ExperimentPlan& p) {
  if (p.schema_version != kPlanSchemaVersion) throw PlanError("unsupported schema_version");
  if (p.dimension != 1 && p.dimension != 3) throw PlanError("dimension must be 1 or 3");
  if (p.kernel.id != "gaussian_bump" && p.kernel.id != "free")
    throw PlanError("kernel id must be gaussian_bump or free");
  if (!(p.kernel.width > 0.0) || !std::isfinite(p.kernel.amplitude))
    throw PlanError("kernel parameters must be finite with width > 0");
  if (p.initial.id != "gaussian") throw PlanError("initial id must be gaussian");
  if (!(p.initial.sigma_q > 0.0) || !(p.initial.sigma_p > 0.0))
    throw PlanError("initial widths must be positive");
  if (p.N.empty()) throw PlanError("N grid must be nonempty");
  for (std::size_t i = 0; i < p.N.size(); ++i) {
    if (p.N[i] < 2) throw PlanError("every N must be >= 2");
    if (i > 0 && p.N[i] <= p.N[i - 1]) throw PlanError("N grid must be strictly increasing");
  }
  if (p.repetitions < 1) throw PlanError("repetitions must be >= 1");
  if (p.times.empty()) throw PlanError("time grid must be nonempty");
  for (std::size_t i = 0; i < p.times.size(); ++i) {
    if (!(p.times[i] > 0.0) || !std::isfinite(p.times[i])) throw PlanError("times must be positive");
    if (i > 0 && p.times[i] <= p.times[i - 1]) throw PlanError("times must be strictly increasing");
  }
  if (!(p.dt > 0.0)) throw PlanError("dt must be positive");
  if (p.method != "rk4" && p.method != "psi") throw PlanError("method must be rk4 or psi");
  std::set<std::string> seen;
  for (const auto& m : p.metrics) {
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end())
      throw PlanError("unknown metric '" + m + "'");
    if (!seen.insert(m).second) throw PlanError("duplicate metric '" + m + "'");
  }
  const auto& r = p.reference;
  if (r.points < 16 || r.slices < 1 || !(r.dt > 0.0) || !(r.tol > 0.0) || r.max_iter < 1 ||
      r.table_size < 16 || !(r.grid_half_width > 0.0) || r.grid_bins < 4)
    throw PlanError("reference settings out of range");
  const auto& h = p.histogram;
  if (h.axes.empty() || !(h.hi > h.lo) || h.bins < 1 || h.max_pairs_per_run < 1)
    throw PlanError("histogram settings out of range");
  for (auto a : h.axes)
    if (a >= std::size_t(2 * p.dimension)) throw PlanError("histogram axis exceeds phase dimension");
  if (p.bl_dictionary < 1) throw PlanError("bl_dictionary must be >= 1");
  if (p.output_dir.empty()) throw PlanError("output_dir must be nonempty");
}

inline ExperimentPlan plan_from_json(const Json& j) {
  using detail::plan_get;
  detail::reject_unknown(j,
                         {"schema_version", "dimension", "kernel", "initial", "N", "repetitions",
                          "times", "dt", "method", "metrics", "reference", "histogram",
                          "bl_dictionary", "seed", "output_dir"},
                         "plan");
  ExperimentPlan p;
  if (!j.contains("schema_version")) throw PlanError("plan needs schema_version");
  p.schema_version = plan_get(j, "schema_version", 0);
  p.dimension = plan_get(j, "dimension", p.dimension);
  if (j.contains("kernel")) {
    const auto& k = j.at("kernel");
    detail::reject_unknown(k, {"id", "amplitude", "width"}, "kernel");
    p.kernel.id = plan_get(k, "id", p.kernel.id);
    p.kernel.amplitude = plan_get(k, "amplitude", p.kernel.amplitude);
    p.kernel.width = plan_get(k, "width", p.kernel.width);
  }
  if (j.contains("initial")) {
    const auto& k = j.at("initial");
    detail::reject_unknown(k, {"id", "sigma_q", "sigma_p"}, "initial");
    p.initial.id = plan_get(k, "id", p.initial.id);
    p.initial.sigma_q = plan_get(k, "sigma_q", p.initial.sigma_q);
    p.initial.sigma_p = plan_get(k, "sigma_p", p.initial.sigma_p);
  }
  p.N = plan_get(j, "N", p.N);
  p.repetitions = plan_get(j, "repetitions", p.repetitions);
  p.times = plan_get(j, "times", p.times);
  p.dt = plan_get(j, "dt", p.dt);
  p.method = plan_get(j, "method", p.method);
  p.metrics = plan_get(j, "metrics", p.metrics);
  if (j.contains("reference")) {
    const auto& r = j.at("reference");
    detail::reject_unknown(r,
                           {"points", "slices", "dt", "tol", "max_iter", "table_size",
                            "max_sources", "grid_half_width", "grid_bins"},
                           "reference");
    auto& o = p.reference;
    o.points = plan_get(r, "points", o.points);
    o.slices = plan_get(r, "slices", o.slices);
    o.dt = plan_get(r, "dt", o.dt);
    o.tol = plan_get(r, "tol", o.tol);
    o.max_iter = plan_get(r, "max_iter", o.max_iter);
    o.table_size = plan_get(r, "table_size", o.table_size);
    o.max_sources = plan_get(r, "max_sources", o.max_sources);
    o.grid_half_width = plan_get(r, "grid_half_width", o.grid_half_width);
    o.grid_bins = plan_get(r, "grid_bins", o.grid_bins);
  }
  if (j.contains("histogram")) {
    const auto& h = j.at("histogram");
    detail::reject_unknown(h, {"axes", "lo", "hi", "bins", "max_pairs_per_run"}, "histogram");
    auto& o = p.histogram;
    o.axes = plan_get(h, "axes", o.axes);
    o.lo = plan_get(h, "lo", o.lo);
    o.hi = plan_get(h, "hi", o.hi);
    o.bins = plan_get(h, "bins", o.bins);
    o.max_pairs_per_run = plan_get(h, "max_pairs_per_run", o.max_pairs_per_run);
  }
  p.bl_dictionary = plan_get(j, "bl_dictionary", p.bl_dictionary);
  p.seed = plan_get(j, "seed", p.seed);
  p.output_dir = plan_get(j, "output_dir", p.output_dir);
  validate(p);
  return p;
}

/// Every field, defaults filled in; keys sorted by the JSON library.
inline Json plan_to_json(const ExperimentPlan& p) {
  Json j;
  j["schema_version"] = p.schema_version;
  j["dimension"] = p.dimension;
  j["kernel"] = {{"id", p.kernel.id}, {"amplitude", p.kernel.amplitude}, {"width", p.kernel.width}};
  j["initial"] = {
      {"id", p.initial.id}, {"sigma_q", p.initial.sigma_q}, {"sigma_p", p.initial.sigma_p}};
  j["N"] = p.N;
  j["repetitions"] = p.repetitions;
  j["times"] = p.times;
  j["dt"] = p.dt;
  j["method"] = p.method;
  j["metrics"] = p.metrics;
  const auto& r = p.reference;
  j["reference"] = {{"points", r.points},       {"slices", r.slices},
                    {"dt", r.dt},               {"tol", r.tol},
                    {"max_iter", r.max_iter},   {"table_size", r.table_size},
                    {"max_sources", r.max_sources}, {"grid_half_width", r.grid_half_width},
                    {"grid_bins", r.grid_bins}};
  const auto& h = p.histogram;
  j["histogram"] = {{"axes", h.axes},
                    {"lo", h.lo},
                    {"hi", h.hi},
                    {"bins", h.bins},
                    {"max_pairs_per_run", h.max_pairs_per_run}};
  j["bl_dictionary"] = p.bl_dictionary;
  j["seed"] = p.seed;
  j["output_dir"] = p.output_dir;
  return j;
}

/// SHA-256 of the canonical dump with the output directory removed, so the
/// hash names the experiment rather than where it is written.
inline std::string plan_hash(const ExperimentPlan& p) {
  Json j = plan_to_json(p);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

inline ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan file " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw PlanError(std::string("plan is not valid JSON: ") + e.what());
  }
  return plan_from_json(j);
}

}  // namespace chaoslab
