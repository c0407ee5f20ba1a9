#include <chaoslab/harness.hpp>

#include <gtest/gtest.h>

#include <filesystem>

using namespace chaoslab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("chaoslab_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentPlan small_plan(const std::string& kernel, const fs::path& out) {
  ExperimentPlan p;
  p.dimension = 3;
  p.kernel.id = kernel;
  p.kernel.amplitude = 0.5;
  p.N = {16, 32, 64};
  p.repetitions = 3;
  p.times = {0.5, 1.0};
  p.dt = 0.05;
  p.metrics = {"d_bl", "marginal1_l1", "marginal2_chaos"};
  p.reference.points = 2000;
  p.reference.max_sources = 500;
  p.reference.slices = 4;
  p.reference.dt = 0.05;
  p.reference.tol = 1e-4;
  p.reference.table_size = 256;
  p.bl_dictionary = 64;
  p.histogram.bins = 4;
  p.histogram.max_pairs_per_run = 500;
  p.seed = 11;
  p.output_dir = out.string();
  return p;
}

}  // namespace

TEST(Plan, JsonRoundTripAndHash) {
  auto p = small_plan("gaussian_bump", "a");
  auto q = plan_from_json(plan_to_json(p));
  EXPECT_EQ(plan_to_json(q).dump(), plan_to_json(p).dump());
  q.output_dir = "elsewhere";
  EXPECT_EQ(plan_hash(q), plan_hash(p));
  q.seed = 12;
  EXPECT_NE(plan_hash(q), plan_hash(p));
  EXPECT_EQ(sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Plan, RejectsInvalid) {
  Json j = plan_to_json(small_plan("free", "a"));
  Json bad = j;
  bad["N"] = {32, 16};
  EXPECT_THROW(plan_from_json(bad), PlanError);
  bad = j;
  bad["colour"] = 1;
  EXPECT_THROW(plan_from_json(bad), PlanError);
  bad = j;
  bad["metrics"] = {"d_bl", "d_bl"};
  EXPECT_THROW(plan_from_json(bad), PlanError);
  bad = j;
  bad["kernel"]["id"] = "coulomb";
  EXPECT_THROW(plan_from_json(bad), PlanError);
  bad = j;
  bad.erase("schema_version");
  EXPECT_THROW(plan_from_json(bad), PlanError);
  EXPECT_THROW(load_plan("/nonexistent/plan.json"), IoError);
}

TEST(Harness, FreeKernelMatchesIndependentTransport) {
  auto out = scratch("free");
  auto p = small_plan("free", out);
  p.metrics = {"d_bl"};
  p.times = {1.0};
  auto res = run_plan(p);
  ASSERT_EQ(res.records.size(), 3u);

  // i.i.d. Gaussian samples carried by the free flow q + t p
  auto carry = [](std::vector<PhasePoint<3>> x, double t) {
    for (auto& y : x)
      for (int c = 0; c < 3; ++c) y.q(c) += t * y.p(c);
    return x;
  };
  Rng rr = make_rng(p.seed, 0, 0, "reference");
  auto ref = carry(sample_gaussian<3>(p.reference.points, 1.0, 1.0, rr), 1.0);
  BLOptions bo;
  bo.dictionary_size = p.bl_dictionary;
  bo.seed = substream_seed(p.seed, 0, 0, "bl");
  BLDictionary<3> dict(bl_reference<3>(CloudDensity<3>::uniform(ref)), bo);
  for (std::size_t ni = 0; ni < p.N.size(); ++ni) {
    double sum = 0.0;
    for (std::size_t r = 0; r < p.repetitions; ++r) {
      Rng rng = make_rng(p.seed, p.N[ni], r, "initial");
      auto x = carry(sample_gaussian<3>(p.N[ni], 1.0, 1.0, rng), 1.0);
      sum += dict.lower(std::span<const PhasePoint<3>>(x));
    }
    EXPECT_NEAR(res.records[ni].value, sum / double(p.repetitions), 1e-10);
    EXPECT_EQ(res.records[ni].N, p.N[ni]);
  }
  fs::remove_all(out);
}

TEST(Harness, EmptyMetricsSucceeds) {
  auto out = scratch("empty");
  auto p = small_plan("gaussian_bump", out);
  p.metrics.clear();
  p.repetitions = 1;
  auto res = run_plan(p);
  EXPECT_TRUE(res.records.empty());
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  fs::remove_all(out);
}

TEST(Harness, DeterministicAcrossWorkersAndResume) {
  auto a = scratch("w1"), b = scratch("w3");
  auto p = small_plan("gaussian_bump", a);
  auto ra = run_plan(p);
  p.output_dir = b.string();
  RunOptions o3;
  o3.workers = 3;
  auto rb = run_plan(p, o3);
  for (const auto& m : p.metrics)
    EXPECT_EQ(read_file(a / (m + ".csv")), read_file(b / (m + ".csv"))) << m;
  EXPECT_EQ(read_file(a / (p.metrics[0] + ".svg")), read_file(b / (p.metrics[0] + ".svg")));
  EXPECT_EQ(ra.records.size(), p.metrics.size() * p.N.size() * p.times.size());

  // resume recomputes only missing cells and reproduces the outputs
  const std::string before = read_file(b / "d_bl.csv");
  fs::remove(b / "cells" / cell_file_name(32, 1));
  RunOptions resume;
  resume.resume = true;
  auto rc = run_plan(p, resume);
  EXPECT_EQ(rc.cells_computed, 1u);
  EXPECT_EQ(rc.cells_reused, p.N.size() * p.repetitions - 1);
  EXPECT_EQ(read_file(b / "d_bl.csv"), before);

  // cells written for a different plan are not reused
  auto q = p;
  q.seed = 99;
  auto rd = run_plan(q, resume);
  EXPECT_EQ(rd.cells_reused, 0u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Harness, ManifestHashesMatchFiles) {
  auto out = scratch("manifest");
  auto p = small_plan("free", out);
  p.metrics = {"marginal1_l1", "marginal1_excess"};
  p.repetitions = 2;
  run_plan(p);
  EXPECT_TRUE(verify_manifest(out).empty());
  const Json m = Json::parse(read_file(out / "manifest.json"));
  EXPECT_EQ(m.at("plan_hash").get<std::string>(), plan_hash(p));
  {
    std::ofstream f(out / "marginal1_l1.csv", std::ios::app);
    f << "x";
  }
  EXPECT_EQ(verify_manifest(out), std::vector<std::string>{"marginal1_l1.csv"});
  fs::remove_all(out);
}

TEST(Harness, CsvFormat) {
  auto out = scratch("csv");
  auto p = small_plan("free", out);
  p.metrics = {"marginal1_excess"};
  p.repetitions = 2;
  auto res = run_plan(p);
  std::istringstream is(read_file(out / "marginal1_excess.csv"));
  auto cols = read_csv_columns(is);
  ASSERT_EQ(cols.size(), 8u);
  ASSERT_EQ(cols["metric"].size(), p.N.size() * p.times.size());
  for (std::size_t i = 0; i < res.records.size(); ++i) {
    EXPECT_EQ(std::stod(cols["value"][i]), res.records[i].value);
    EXPECT_EQ(cols["plan_hash"][i], plan_hash(p));
  }
  fs::remove_all(out);
}

TEST(Harness, FreeKernelMarginalsSitAtTheirFloor) {
  // independent particles: the two-particle table factorizes up to noise and
  // the one-particle error is of the order of its fluctuation floor
  auto out = scratch("floor");
  auto p = small_plan("free", out);
  p.metrics = {"marginal1_l1", "marginal2_chaos"};
  p.reference.points = 20000;
  p.repetitions = 8;
  auto res = run_plan(p);
  for (const auto& r : res.records) {
    EXPECT_GT(r.ci_half_width, 0.0);
    EXPECT_LT(r.value, 3.0 * r.ci_half_width) << r.metric << " N=" << r.N;
  }
  fs::remove_all(out);
}

TEST(Harness, UnwritableOutputIsIoError) {
  auto p = small_plan("free", "/proc/chaoslab_cannot_write_here");
  EXPECT_THROW(run_plan(p), IoError);
}

TEST(Harness, CellErrorsCarryIdentity) {
  try {
    rethrow_in_cell(NumericError("boom"), 64, 2, 0.5);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("N=64 rep=2 t=0.5"), std::string::npos);
  }
}

TEST(Harness, SvgIsPureFunctionOfRecords) {
  std::vector<MetricRecord> recs;
  for (std::size_t N : {10, 100, 1000})
    recs.push_back({"d_bl", N, 1.0, 4, 2.0 / std::sqrt(double(N)), 0.1, 0, "h"});
  EXPECT_EQ(records_svg("d_bl", recs), records_svg("d_bl", recs));
  EXPECT_NE(records_svg("d_bl", recs).find("<polyline"), std::string::npos);
  auto fit = fit_records(recs, "d_bl", 1.0);
  EXPECT_NEAR(fit.slope, -0.5, 1e-12);
  recs.pop_back();
  EXPECT_THROW(fit_records(recs, "d_bl", 1.0), DegenerateInputError);
}

TEST(Harness, OneDimensionalGridReference) {
  auto out = scratch("d1");
  auto p = small_plan("gaussian_bump", out);
  p.dimension = 1;
  p.histogram.axes = {0, 1};
  p.reference.grid_bins = 24;
  p.reference.slices = 4;
  p.reference.tol = 1e-3;
  p.reference.max_iter = 20;
  auto res = run_plan(p);
  EXPECT_EQ(res.records.size(), p.metrics.size() * p.N.size() * p.times.size());
  EXPECT_FALSE(res.reference_residuals.empty());
  for (const auto& r : res.records) EXPECT_TRUE(std::isfinite(r.value));
  fs::remove_all(out);
}
