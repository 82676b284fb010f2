// Round-trip and error-path tests for the on-disk dataset and fit formats.
#include <doctest.h>

#include <mmgfm/io.hpp>
#include <mmgfm/simulate.hpp>
#include <mmgfm/types.hpp>
#include <mmgfm/vem.hpp>

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace mmgfm;
namespace fs = std::filesystem;
using Mat = MatrixX<double>;
using Vec = VectorX<double>;

namespace {

// Fresh scratch directory per test case; lives under the ctest working dir.
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mmgfm_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.good());
  out << text;
}

// Small mixed-type dataset exercising trials and offsets.
Dataset sample_dataset(std::uint64_t seed = 11) {
  ScenarioSpec spec;
  spec.S = 2;
  spec.M = 3;
  spec.n = {12, 9};
  spec.p = {4, 3, 5};
  spec.d = 2;
  spec.q = 2;
  spec.qs = {1, 2};
  spec.types = {ModalityType::Continuous, ModalityType::Count,
                ModalityType::Binomial};
  spec.rho_m = {1.0, 1.0, 1.0};
  spec.set_sigma2(0.5);
  spec.trials = {(Vec(5) << 2, 3, 4, 2, 5).finished()};
  spec.offsets.resize(2);
  for (int s = 0; s < 2; ++s) {
    spec.offsets[s] = Mat::Zero(spec.n[s], 3);
    for (int i = 0; i < spec.n[s]; ++i)
      spec.offsets[s](i, 1) = 0.1 * (i + 1);  // Count modality only
  }
  spec.seed = seed;
  return gen_scenario(spec, 0).first;
}

void check_equal(const Dataset& a, const Dataset& b) {
  REQUIRE(a.S() == b.S());
  REQUIRE(a.M() == b.M());
  for (Eigen::Index s = 0; s < a.S(); ++s) {
    CHECK((a.studies[s].Z - b.studies[s].Z).norm() == 0.0);
    for (Eigen::Index m = 0; m < a.M(); ++m) {
      const auto& ma = a.studies[s].modalities[m];
      const auto& mb = b.studies[s].modalities[m];
      CHECK(ma.type == mb.type);
      CHECK((ma.X - mb.X).norm() == 0.0);
      if (ma.type == ModalityType::Binomial)
        CHECK((ma.trials - mb.trials).norm() == 0.0);
      const Eigen::Index n = ma.X.rows();
      for (Eigen::Index i = 0; i < n; ++i)
        CHECK(ma.offset(i) == mb.offset(i));
    }
  }
}

}  // namespace

TEST_CASE("dataset save/load round-trips bit for bit") {
  const fs::path dir = scratch("roundtrip");
  const Dataset ds = sample_dataset();
  const fs::path manifest = save_dataset(ds, dir);
  CHECK(manifest.filename() == "manifest.json");
  const Dataset back = load_dataset(manifest);
  check_equal(ds, back);
  // offsets were only written for the modality that has them
  CHECK(fs::exists(dir / "study_0_modality_1_offsets.csv"));
  CHECK(!fs::exists(dir / "study_0_modality_0_offsets.csv"));
  CHECK(fs::exists(dir / "modality_2_trials.csv"));
}

TEST_CASE("saving a dataset twice produces byte-identical files") {
  const fs::path dir1 = scratch("bytes1");
  const fs::path dir2 = scratch("bytes2");
  const Dataset ds = sample_dataset();
  save_dataset(ds, dir1);
  save_dataset(ds, dir2);
  CHECK(slurp(dir1 / "manifest.json") == slurp(dir2 / "manifest.json"));
  CHECK(slurp(dir1 / "study_1_modality_2.csv") ==
        slurp(dir2 / "study_1_modality_2.csv"));
  CHECK(slurp(dir1 / "study_0_Z.csv") == slurp(dir2 / "study_0_Z.csv"));
}

TEST_CASE("shape mismatches name the offending file") {
  const fs::path dir = scratch("shape");
  const fs::path manifest = save_dataset(sample_dataset(), dir);
  const fs::path victim = dir / "study_0_modality_1.csv";
  CsvTable t = read_matrix_csv(victim);
  t.header.pop_back();
  write_matrix_csv(victim, t.values.leftCols(t.values.cols() - 1), t.header);
  try {
    load_dataset(manifest);
    FAIL("expected a shape error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("study_0_modality_1.csv") != std::string::npos);
    CHECK(msg.find("declared") != std::string::npos);
  }
}

TEST_CASE("non-integer count data fails validation with coordinates") {
  const fs::path dir = scratch("validate");
  const fs::path manifest = save_dataset(sample_dataset(), dir);
  const fs::path victim = dir / "study_0_modality_1.csv";
  CsvTable t = read_matrix_csv(victim);
  t.values(2, 1) = 3.5;
  write_matrix_csv(victim, t.values, t.header);
  try {
    load_dataset(manifest);
    FAIL("expected a validation error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("validation failed") != std::string::npos);
    CHECK(msg.find("study 0 modality 1") != std::string::npos);
    CHECK(msg.find("row 2 col 1") != std::string::npos);
    CHECK(msg.find("not a nonnegative integer") != std::string::npos);
  }
}

TEST_CASE("csv reader reports malformed cells and ragged rows") {
  const fs::path dir = scratch("reader");

  spit(dir / "bad_cell.csv", "a,b\n1,2\n3,x\n");
  try {
    read_matrix_csv(dir / "bad_cell.csv");
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bad_cell.csv:3:2") != std::string::npos);
    CHECK(msg.find("malformed number 'x'") != std::string::npos);
  }

  spit(dir / "ragged.csv", "a,b\n1,2\n3\n");
  try {
    read_matrix_csv(dir / "ragged.csv");
    FAIL("expected a ragged-row error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("ragged.csv:3") != std::string::npos);
    CHECK(msg.find("expected 2 columns, found 1") != std::string::npos);
  }

  spit(dir / "empty.csv", "");
  CHECK_THROWS_AS(read_matrix_csv(dir / "empty.csv"), std::runtime_error);
  CHECK_THROWS_AS(read_matrix_csv(dir / "no_such_file.csv"),
                  std::runtime_error);
}

TEST_CASE("matrix csv handles header-only and tiny tables") {
  const fs::path dir = scratch("tiny");

  write_matrix_csv(dir / "empty_rows.csv", Mat::Zero(0, 3), {"a", "b", "c"});
  const CsvTable t0 = read_matrix_csv(dir / "empty_rows.csv");
  CHECK(t0.values.rows() == 0);
  CHECK(t0.values.cols() == 3);
  CHECK(t0.header == std::vector<std::string>{"a", "b", "c"});

  Mat one(1, 1);
  one(0, 0) = -0.1234567890123456789;  // not exactly representable
  write_matrix_csv(dir / "one.csv", one, {"x"});
  const CsvTable t1 = read_matrix_csv(dir / "one.csv");
  CHECK(t1.values(0, 0) == one(0, 0));

  CHECK_THROWS_AS(write_matrix_csv(dir / "mismatch.csv", Mat::Zero(2, 2), {"a"}),
                  std::runtime_error);
}

TEST_CASE("fit artifacts reload exactly and recompute the elbo") {
  const fs::path dir = scratch("fit");
  const Dataset ds = sample_dataset(19);

  FitConfig cfg;
  cfg.q = 2;
  cfg.qs = {1, 2};
  cfg.max_iters = 40;
  cfg.rel_tol = 0.0;  // run all 40 iterations
  cfg.parallel = false;
  const FitResult result = fit(ds, cfg);
  save_fit(result, cfg, dir);
  const LoadedFit back = load_fit(dir);

  CHECK(back.config.q == cfg.q);
  CHECK(back.config.qs == cfg.qs);
  CHECK(back.config.max_iters == cfg.max_iters);
  CHECK(back.config.rel_tol == cfg.rel_tol);
  CHECK(back.result.converged == result.converged);
  CHECK(back.result.iterations == result.iterations);
  REQUIRE(back.result.elbo_trace.size() == result.elbo_trace.size());
  for (std::size_t k = 0; k < result.elbo_trace.size(); ++k)
    CHECK(back.result.elbo_trace[k] == result.elbo_trace[k]);

  const auto& th = result.theta;
  const auto& bh = back.result.theta;
  CHECK(bh.q == th.q);
  CHECK(bh.qs == th.qs);
  CHECK((bh.sigma2 - th.sigma2).norm() == 0.0);
  for (std::size_t m = 0; m < th.beta.size(); ++m) {
    CHECK((bh.beta[m] - th.beta[m]).norm() == 0.0);
    CHECK((bh.A[m] - th.A[m]).norm() == 0.0);
  }
  for (std::size_t s = 0; s < th.B.size(); ++s)
    for (std::size_t m = 0; m < th.B[s].size(); ++m) {
      CHECK((bh.B[s][m] - th.B[s][m]).norm() == 0.0);
      CHECK((bh.lambda[s][m] - th.lambda[s][m]).norm() == 0.0);
    }

  // the reloaded state reproduces the final bound on the original data
  const double e_orig = elbo(result.theta, result.phi, ds, cfg);
  const double e_back = elbo(back.result.theta, back.result.phi, ds, cfg);
  CHECK(std::abs(e_back - e_orig) <= 1e-8 * std::abs(e_orig));
  CHECK(std::abs(e_back - result.elbo_trace.back()) <=
        1e-8 * std::abs(result.elbo_trace.back()));
}

TEST_CASE("artifacts from a newer format version are rejected") {
  const fs::path dir = scratch("version");
  const Dataset ds = sample_dataset();
  const fs::path manifest = save_dataset(ds, dir);
  std::string text = slurp(manifest);
  const auto at = text.find("\"version\": 1");
  REQUIRE(at != std::string::npos);
  spit(manifest, text.replace(at, 12, "\"version\": 99"));
  try {
    load_dataset(manifest);
    FAIL("expected a version error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  const fs::path fdir = scratch("version_fit");
  FitConfig cfg;
  cfg.q = 1;
  cfg.qs = {1, 1};
  cfg.max_iters = 3;
  cfg.parallel = false;
  save_fit(fit(ds, cfg), cfg, fdir);
  text = slurp(fdir / "fit_manifest.json");
  const auto at2 = text.find("\"version\": 1");
  REQUIRE(at2 != std::string::npos);
  spit(fdir / "fit_manifest.json", text.replace(at2, 12, "\"version\": 99"));
  CHECK_THROWS_AS(load_fit(fdir), std::runtime_error);
}

TEST_CASE("missing inputs produce clear errors") {
  const fs::path dir = scratch("missing");
  try {
    load_dataset(dir / "manifest.json");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("manifest not found") != std::string::npos);
  }
  try {
    load_fit(dir);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("fit manifest not found") !=
          std::string::npos);
  }
}
