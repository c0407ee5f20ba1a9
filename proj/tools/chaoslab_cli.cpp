#include <chaoslab/chaoslab.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace chaoslab;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::PlanValidation:
    case ErrorKind::Config:
      return 2;
    case ErrorKind::Io:
      return 4;
    default:
      return 3;
  }
}

int cmd_run(const std::string& plan_path, const std::optional<std::uint64_t>& seed,
            const std::optional<std::string>& out_dir, std::size_t workers, bool resume,
            bool no_svg, bool quiet) {
  auto plan = load_plan(plan_path);
  if (seed) plan.seed = *seed;
  if (out_dir) plan.output_dir = *out_dir;
  validate(plan);
  RunOptions opt;
  opt.workers = workers;
  opt.resume = resume;
  opt.write_svg = !no_svg;
  if (!quiet) opt.log = [](const std::string& s) { std::cerr << "[chaoslab] " << s << "\n"; };
  const auto res = run_plan(plan, opt);
  std::cout << "plan_hash " << plan_hash(plan) << "\n"
            << "records " << res.records.size() << "\n"
            << "cells_computed " << res.cells_computed << "\n"
            << "cells_reused " << res.cells_reused << "\n";
  for (const auto& f : res.files) std::cout << "wrote " << plan.output_dir << "/" << f << "\n";
  return 0;
}

int cmd_fit(const std::string& csv, const std::string& xcol, const std::string& ycol,
            const std::optional<std::string>& metric, const std::optional<double>& t) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv);
  auto cols = read_csv_columns(in);
  for (const auto& c : {xcol, ycol})
    if (!cols.count(c)) throw InputError("no column '" + c + "' in " + csv);
  if (metric && !cols.count("metric")) throw InputError("no metric column in " + csv);
  if (t && !cols.count("t")) throw InputError("no t column in " + csv);
  std::vector<double> x, y;
  std::set<double> distinct;
  for (std::size_t i = 0; i < cols[xcol].size(); ++i) {
    if (metric && cols["metric"][i] != *metric) continue;
    if (t && std::stod(cols["t"][i]) != *t) continue;
    x.push_back(std::stod(cols[xcol][i]));
    y.push_back(std::stod(cols[ycol][i]));
    distinct.insert(x.back());
  }
  if (distinct.size() < 3) throw DegenerateInputError("rate fit needs at least three distinct x");
  const auto f = fit_rate(x, y);
  Json j{{"slope", f.slope},
         {"intercept", f.intercept},
         {"r2", f.r2},
         {"slope_stderr", f.slope_stderr},
         {"used", f.used},
         {"dropped", f.dropped}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

template <int D>
int check_kernel_dim(const std::string& id, double amplitude, double width, std::size_t probes,
                     std::uint64_t seed) {
  LipschitzReport r;
  if (id == "free")
    r = check_kernel_lipschitz<D>(FreeKernel<D>{}, probes, seed);
  else if (id == "gaussian_bump")
    r = check_kernel_lipschitz<D>(newtonian_pair_kernel<D>(GaussianBump<D>{amplitude, width}),
                                  probes, seed);
  else
    throw ConfigError("kernel must be free or gaussian_bump");
  Json j{{"declared", r.declared},
         {"max_lipschitz_ratio", r.max_lipschitz_ratio},
         {"max_growth_ratio", r.max_growth_ratio},
         {"probes", r.probes},
         {"violated", r.violated}};
  std::cout << j.dump(2) << "\n";
  return r.violated ? 1 : 0;
}

int cmd_alpha(const std::string& path, const std::optional<double>& K_opt,
              const std::optional<double>& gamma_opt, std::size_t net, std::size_t workers) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  const auto file = read_instance(in);
  if (!file.f) throw InputError("instance file has no target law f");
  const double K = K_opt ? *K_opt : file.K ? *file.K : throw InputError("no K given");
  WeightSpec spec;
  spec.N = file.instance.N;
  if (gamma_opt)
    spec.gamma = *gamma_opt;
  else if (file.gamma)
    spec.gamma = *file.gamma;
  AlphaOptions opt;
  opt.net_resolution = net;
  opt.workers = workers;
  const auto r = alpha_exact_discrete(file.instance, *file.f, K, spec, opt);
  Json comps = Json::array();
  for (const auto& c : r.components) comps.push_back({{"lambda", c.lambda}, {"k", c.k}, {"g", c.g}});
  Json j{{"alpha", r.value},
         {"iterations", r.iterations},
         {"candidates", r.candidates},
         {"residual", r.residual},
         {"components", comps}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chaoslab: propagation of chaos experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run an experiment plan");
  std::string plan_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::size_t workers = 1;
  bool resume = false, no_svg = false, quiet = false;
  run->add_option("plan", plan_path, "plan JSON file")->required();
  run->add_option("--seed", seed, "override the plan seed");
  run->add_option("--out-dir", out_dir, "override the output directory");
  run->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--resume", resume, "reuse finished cells in the output directory");
  run->add_flag("--no-svg", no_svg, "skip the plots");
  run->add_flag("--quiet", quiet, "no progress messages");

  auto* fit = app.add_subcommand("fit", "log-log rate fit of a CSV column pair");
  std::string csv, xcol = "N", ycol = "value";
  std::optional<std::string> metric;
  std::optional<double> fit_t;
  fit->add_option("csv", csv, "records CSV")->required();
  fit->add_option("--x", xcol, "abscissa column");
  fit->add_option("--y", ycol, "ordinate column");
  fit->add_option("--metric", metric, "keep rows of this metric");
  fit->add_option("--t", fit_t, "keep rows at this time");

  auto* ck = app.add_subcommand("check-kernel", "probe a kernel's Lipschitz and growth bounds");
  std::string kid = "gaussian_bump";
  double amplitude = 1.0, width = 1.0;
  int dim = 3;
  std::size_t probes = 20000;
  std::uint64_t ck_seed = 0;
  ck->add_option("--kernel", kid, "free or gaussian_bump");
  ck->add_option("--amplitude", amplitude);
  ck->add_option("--width", width);
  ck->add_option("--dimension", dim)->check(CLI::IsMember({1, 3}));
  ck->add_option("--probes", probes);
  ck->add_option("--seed", ck_seed);

  auto* al = app.add_subcommand("alpha", "exact alpha of a discrete instance file");
  std::string inst_path;
  std::optional<double> K, gamma;
  std::size_t net = 10, al_workers = 1;
  al->add_option("instance", inst_path, "instance file")->required();
  al->add_option("--K", K, "weighted-norm budget (overrides the file)");
  al->add_option("--gamma", gamma, "weight exponent (overrides the file)");
  al->add_option("--net", net, "lattice resolution of the candidate net");
  al->add_option("--workers", al_workers)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(plan_path, seed, out_dir, workers, resume, no_svg, quiet);
    if (*fit) return cmd_fit(csv, xcol, ycol, metric, fit_t);
    if (*ck)
      return dim == 3 ? check_kernel_dim<3>(kid, amplitude, width, probes, ck_seed)
                      : check_kernel_dim<1>(kid, amplitude, width, probes, ck_seed);
    if (*al) return cmd_alpha(inst_path, K, gamma, net, al_workers);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
