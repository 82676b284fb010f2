// Command-line front end: dataset simulation, model fitting, factor-count
// selection, evaluation against ground truth, and a benchmark harness that
// replays the synthetic scenarios and reports the quality metrics as CSV.
//
// Exit codes: 0 success (a non-converged fit is still a success and is
// recorded in the artifact), 1 I/O or numeric failure, 2 bad arguments.

#include <CLI11.hpp>
#include <json.hpp>

#include <mmgfm/io.hpp>
#include <mmgfm/metrics.hpp>
#include <mmgfm/select.hpp>
#include <mmgfm/simulate.hpp>
#include <mmgfm/types.hpp>
#include <mmgfm/vem.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace mmgfm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitBadArgs = 2;

constexpr int bench_schema_version = 1;

// ---------------------------------------------------------------------------
// small utilities

std::string fmt_full(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::string fmt_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::vector<std::string> col_names(const std::string& stem, Eigen::Index k) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(k));
  for (Eigen::Index j = 0; j < k; ++j) names.push_back(stem + std::to_string(j));
  return names;
}

template <class T>
std::string join(const std::vector<T>& v, const char* sep = ",") {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << sep;
    os << v[i];
  }
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json parse_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

// Accepts either the manifest file itself or the directory containing it.
fs::path resolve_manifest(const fs::path& given, const std::string& name) {
  if (fs::is_directory(given)) return given / name;
  return given;
}

// ---------------------------------------------------------------------------
// shared flags

struct CommonOpts {
  std::uint64_t seed = 0;
  int threads = 0;          // 0 = all hardware threads
  bool deterministic = true;
};

void add_common(CLI::App* sub, CommonOpts& g) {
  sub->add_option("--seed", g.seed, "Base seed for all randomized work")
      ->capture_default_str();
  sub->add_option("--threads", g.threads,
                  "Worker threads (0 = all cores)")
      ->envname("MMGFM_THREADS")
      ->capture_default_str();
  sub->add_flag("--deterministic,!--no-deterministic", g.deterministic,
                "Fixed-order reductions for bit-reproducible results");
}

FitConfig make_config(const CommonOpts& g, int q, const std::vector<int>& qs,
                      int max_iters, double rel_tol) {
  FitConfig cfg;
  cfg.q = q;
  cfg.qs = qs;
  cfg.max_iters = max_iters;
  cfg.rel_tol = rel_tol;
  cfg.seed = g.seed;
  cfg.parallel = g.threads != 1;
  cfg.threads = g.threads;
  cfg.deterministic_reduction = g.deterministic;
  return cfg;
}

// Factor counts must fit inside every modality: loadings are p_m x q.
std::optional<std::string> check_factor_dims(const Dataset& ds, int q,
                                             const std::vector<int>& qs) {
  Eigen::Index pmin = ds.p(0);
  for (Eigen::Index m = 1; m < ds.M(); ++m) pmin = std::min(pmin, ds.p(m));
  if (q < 0) return "q must be >= 0, got " + std::to_string(q);
  if (q > pmin)
    return "q=" + std::to_string(q) + " exceeds the smallest modality dimension p_min=" +
           std::to_string(pmin);
  if (static_cast<Eigen::Index>(qs.size()) != ds.S())
    return "qs has " + std::to_string(qs.size()) + " entries for " +
           std::to_string(ds.S()) + " studies";
  for (std::size_t s = 0; s < qs.size(); ++s) {
    if (qs[s] < 0) return "qs must be >= 0, got " + std::to_string(qs[s]);
    if (qs[s] > pmin)
      return "qs[" + std::to_string(s) + "]=" + std::to_string(qs[s]) +
             " exceeds the smallest modality dimension p_min=" + std::to_string(pmin);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// ground-truth persistence (written by `simulate`, read by `evaluate`)

void save_truth(const GroundTruth& truth, const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& th = truth.theta0;
  const int S = static_cast<int>(ds.S());
  const int M = static_cast<int>(ds.M());

  ordered_json man;
  man["version"] = format_version;
  man["S"] = S;
  man["M"] = M;
  man["d"] = static_cast<int>(ds.d());
  man["q"] = th.q;
  man["qs"] = th.qs;
  {
    std::vector<int> n, p;
    std::vector<std::string> types;
    for (int s = 0; s < S; ++s) n.push_back(static_cast<int>(ds.studies[s].n()));
    for (int m = 0; m < M; ++m) {
      p.push_back(static_cast<int>(ds.p(m)));
      types.push_back(to_string(ds.type(m)));
    }
    man["n"] = n;
    man["p"] = p;
    man["types"] = types;
  }
  write_text_file(dir / "truth_manifest.json", man.dump(2) + "\n");

  write_matrix_csv(dir / "sigma2.csv", th.sigma2, col_names("m", M));
  for (int m = 0; m < M; ++m) {
    const std::string tag = std::to_string(m);
    write_matrix_csv(dir / ("beta_" + tag + ".csv"), th.beta[m],
                     col_names("d", th.beta[m].cols()));
    if (th.q > 0)
      write_matrix_csv(dir / ("A_" + tag + ".csv"), th.A[m], col_names("q", th.q));
  }
  for (int s = 0; s < S; ++s) {
    const std::string st = std::to_string(s);
    if (th.q > 0)
      write_matrix_csv(dir / ("F_" + st + ".csv"), truth.F0[s], col_names("q", th.q));
    if (th.qs[s] > 0)
      write_matrix_csv(dir / ("H_" + st + ".csv"), truth.H0[s],
                       col_names("qs", th.qs[s]));
    write_matrix_csv(dir / ("V_" + st + ".csv"), truth.V0[s], col_names("m", M));
    for (int m = 0; m < M; ++m) {
      const std::string tag = st + "_" + std::to_string(m);
      if (th.qs[s] > 0)
        write_matrix_csv(dir / ("B_" + tag + ".csv"), th.B[s][m],
                         col_names("qs", th.qs[s]));
      write_matrix_csv(dir / ("lambda_" + tag + ".csv"),
                       th.lambda[s][m].transpose(), col_names("v", ds.p(m)));
    }
  }
}

GroundTruth load_truth(const fs::path& dir) {
  const fs::path man_path = dir / "truth_manifest.json";
  if (!fs::exists(man_path))
    throw std::runtime_error("no ground truth at " + man_path.string());
  const json man = parse_json_file(man_path);
  const int version = man.at("version").get<int>();
  if (version > format_version)
    throw std::runtime_error("truth format version " + std::to_string(version) +
                             " is newer than supported version " +
                             std::to_string(format_version));
  const int S = man.at("S").get<int>();
  const int M = man.at("M").get<int>();
  const int q = man.at("q").get<int>();
  const auto qs = man.at("qs").get<std::vector<int>>();
  const auto n = man.at("n").get<std::vector<int>>();
  const auto p = man.at("p").get<std::vector<int>>();

  auto read = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const fs::path path = dir / name;
    CsvTable t = read_matrix_csv(path);
    if (t.values.rows() != rows || t.values.cols() != cols)
      throw std::runtime_error(path.string() + ": expected " + std::to_string(rows) +
                               "x" + std::to_string(cols) + ", got " +
                               std::to_string(t.values.rows()) + "x" +
                               std::to_string(t.values.cols()));
    return t.values;
  };

  GroundTruth truth;
  auto& th = truth.theta0;
  th.q = q;
  th.qs = qs;
  th.sigma2 = read("sigma2.csv", S, M);
  th.beta.resize(M);
  th.A.resize(M);
  for (int m = 0; m < M; ++m) {
    const std::string tag = std::to_string(m);
    CsvTable b = read_matrix_csv(dir / ("beta_" + tag + ".csv"));
    if (b.values.rows() != p[m])
      throw std::runtime_error("beta_" + tag + ".csv: expected " +
                               std::to_string(p[m]) + " rows");
    th.beta[m] = b.values;
    th.A[m] = q > 0 ? read("A_" + tag + ".csv", p[m], q)
                    : MatrixX<double>::Zero(p[m], 0);
  }
  th.B.resize(S);
  th.lambda.resize(S);
  truth.F0.resize(S);
  truth.H0.resize(S);
  truth.V0.resize(S);
  for (int s = 0; s < S; ++s) {
    const std::string st = std::to_string(s);
    truth.F0[s] = q > 0 ? read("F_" + st + ".csv", n[s], q)
                        : MatrixX<double>::Zero(n[s], 0);
    truth.H0[s] = qs[s] > 0 ? read("H_" + st + ".csv", n[s], qs[s])
                            : MatrixX<double>::Zero(n[s], 0);
    truth.V0[s] = read("V_" + st + ".csv", n[s], M);
    th.B[s].resize(M);
    th.lambda[s].resize(M);
    for (int m = 0; m < M; ++m) {
      const std::string tag = st + "_" + std::to_string(m);
      th.B[s][m] = qs[s] > 0 ? read("B_" + tag + ".csv", p[m], qs[s])
                             : MatrixX<double>::Zero(p[m], 0);
      th.lambda[s][m] = read("lambda_" + tag + ".csv", 1, p[m]).transpose();
    }
  }
  return truth;
}

// ---------------------------------------------------------------------------
// metrics of a fitted state against ground truth

struct MetricRow {
  std::optional<double> MT_F, MT_H, MT_V, MT_A, MT_B;
  double ME_beta = 0.0;
};

MetricRow compute_metrics(const ModelParams& theta, const VariationalParams& phi,
                          const GroundTruth& truth, const FitConfig& cfg) {
  const FactorEstimates est = extract_factors(phi, cfg);
  MetricRow row;
  row.MT_F = mean_trace_F(est.F, truth.F0);
  row.MT_H = mean_trace_H(est.H, truth.H0);
  row.MT_V = mean_trace_V(est.V, truth.V0);
  row.MT_A = mean_trace_A(theta.A, truth.theta0.A);
  row.MT_B = mean_trace_B(theta.B, truth.theta0.B);
  row.ME_beta = beta_mae(theta.beta, truth.theta0.beta);
  return row;
}

std::string opt_cell(const std::optional<double>& v) {
  return v ? fmt_full(*v) : std::string();
}

void print_metrics(std::ostream& os, const MetricRow& row) {
  auto line = [&](const char* name, const std::optional<double>& v) {
    os << name << "=" << (v ? fmt_full(*v) : "NA") << "\n";
  };
  line("MT_F", row.MT_F);
  line("MT_H", row.MT_H);
  line("MT_V", row.MT_V);
  line("MT_A", row.MT_A);
  line("MT_B", row.MT_B);
  os << "ME_beta=" << fmt_full(row.ME_beta) << "\n";
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOpts {
  std::string scenario;
  std::string out;
  double sigma2_v = -1.0;  // < 0: keep the scenario's own value
  bool has_sigma2 = false;
};

int cmd_simulate(const SimulateOpts& opt, const CommonOpts& g) {
  ScenarioSpec spec = builtin_scenario(opt.scenario);
  if (opt.has_sigma2) spec.set_sigma2(opt.sigma2_v);
  spec.seed = g.seed;

  const auto [ds, truth] = gen_scenario(spec, 0);
  const fs::path out_dir(opt.out);
  fs::create_directories(out_dir);
  const fs::path manifest = save_dataset(ds, out_dir);
  save_truth(truth, ds, out_dir / "truth");

  std::vector<int> n, p;
  for (const auto& st : ds.studies) n.push_back(static_cast<int>(st.n()));
  for (Eigen::Index m = 0; m < ds.M(); ++m) p.push_back(static_cast<int>(ds.p(m)));
  std::cout << opt.scenario << ": S=" << ds.S() << " M=" << ds.M()
            << " d=" << ds.d() << " n=[" << join(n) << "] p=[" << join(p)
            << "] q=" << spec.q << " qs=[" << join(spec.qs)
            << "] sigma2_v=" << fmt_full(spec.sigma2_v(0, 0)) << " -> "
            << manifest.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit

struct FitOpts {
  std::string data;
  std::string out;
  int q = 0;
  std::vector<int> qs;
  int max_iters = 500;
  double rel_tol = 1e-6;
};

int cmd_fit(const FitOpts& opt, const CommonOpts& g) {
  const Dataset ds = load_dataset(resolve_manifest(opt.data, "manifest.json"));
  std::vector<int> qs = opt.qs;
  if (qs.size() == 1 && ds.S() > 1) qs.assign(static_cast<std::size_t>(ds.S()), qs[0]);
  if (const auto err = check_factor_dims(ds, opt.q, qs)) {
    std::cerr << "error: " << *err << "\n";
    return kExitBadArgs;
  }
  const FitConfig cfg = make_config(g, opt.q, qs, opt.max_iters, opt.rel_tol);
  const FitResult result = fit(ds, cfg);

  fs::create_directories(opt.out);
  save_fit(result, cfg, opt.out);
  std::cout << "iterations=" << result.iterations << " elbo="
            << fmt_full(result.elbo_trace.back()) << " converged="
            << (result.converged ? "true" : "false") << " -> " << opt.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// select

struct SelectOpts {
  std::string data;
  std::string out;
  int q_max = default_q_max;
  int qs_max = default_qs_max;
  int max_iters = 500;
  double rel_tol = 1e-6;
};

ordered_json ratio_table(const MatrixX<double>& R) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < R.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index k = 0; k < R.cols(); ++k) row.push_back(R(i, k));
    rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_select(const SelectOpts& opt, const CommonOpts& g) {
  const Dataset ds = load_dataset(resolve_manifest(opt.data, "manifest.json"));
  if (opt.q_max < 2 || opt.qs_max < 2) {
    std::cerr << "error: --q-max and --qs-max must be >= 2\n";
    return kExitBadArgs;
  }
  const std::vector<int> bounds(static_cast<std::size_t>(ds.S()), opt.qs_max);
  if (const auto err = check_factor_dims(ds, opt.q_max, bounds)) {
    std::cerr << "error: " << *err << "\n";
    return kExitBadArgs;
  }
  const FitConfig cfg = make_config(g, 0, {}, opt.max_iters, opt.rel_tol);
  const SelectionResult sel = select_factors(ds, opt.q_max, opt.qs_max, cfg);

  ordered_json report;
  report["version"] = format_version;
  report["q_max"] = opt.q_max;
  report["qs_max"] = opt.qs_max;
  report["q_hat"] = sel.q_hat;
  report["qs_hat"] = sel.qs_hat;
  report["per_modality_q"] = sel.per_modality_q;
  report["ratio_A"] = ratio_table(sel.ratio_A);
  {
    ordered_json per_study = ordered_json::array();
    for (const auto& R : sel.ratio_B) per_study.push_back(ratio_table(R));
    report["ratio_B"] = std::move(per_study);
  }
  write_text_file(opt.out, report.dump(2) + "\n");
  std::cout << "q_hat=" << sel.q_hat << " qs_hat=[" << join(sel.qs_hat)
            << "] -> " << opt.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
  std::string fit_dir;
  std::string truth_dir;
  std::string out;
};

int cmd_evaluate(const EvaluateOpts& opt) {
  const LoadedFit loaded = load_fit(opt.fit_dir);
  fs::path truth_dir(opt.truth_dir);
  if (!fs::exists(truth_dir / "truth_manifest.json") &&
      fs::exists(truth_dir / "truth" / "truth_manifest.json"))
    truth_dir /= "truth";
  const GroundTruth truth = load_truth(truth_dir);

  const MetricRow row = compute_metrics(loaded.result.theta, loaded.result.phi,
                                        truth, loaded.config);
  print_metrics(std::cout, row);
  if (!opt.out.empty()) {
    ordered_json rep;
    rep["version"] = format_version;
    auto put = [&](const char* name, const std::optional<double>& v) {
      if (v) rep[name] = *v; else rep[name] = nullptr;
    };
    put("MT_F", row.MT_F);
    put("MT_H", row.MT_H);
    put("MT_V", row.MT_V);
    put("MT_A", row.MT_A);
    put("MT_B", row.MT_B);
    rep["ME_beta"] = row.ME_beta;
    write_text_file(opt.out, rep.dump(2) + "\n");
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOpts {
  std::vector<std::string> scenarios;
  std::vector<double> sigma2_v;  // empty: use each scenario's own value
  int reps = 10;
  std::string out;
  int max_iters = 500;
  double rel_tol = 1e-6;
};

const char* const kBenchHeader =
    "scenario,sigma2_v,rep,MT_F,MT_H,MT_V,MT_A,MT_B,ME_beta,iterations,"
    "seconds,error,schema_version";

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// Minimal RFC-4180 row splitter for reading the raw benchmark CSV back.
std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') { cur += '"'; ++i; }
        else quoted = false;
      } else cur += c;
    } else if (c == '"') quoted = true;
    else if (c == ',') { out.push_back(std::move(cur)); cur.clear(); }
    else cur += c;
  }
  out.push_back(std::move(cur));
  return out;
}

struct BenchJob {
  std::string scenario;
  double sigma2 = 0.0;
  int rep = 0;
};

std::string run_bench_job(const BenchJob& job, const CommonOpts& g,
                          const BenchOpts& opt, int fit_threads, bool* ok) {
  std::vector<std::string> cells(13);
  cells[0] = job.scenario;
  cells[1] = fmt_full(job.sigma2);
  cells[2] = std::to_string(job.rep);
  cells[12] = std::to_string(bench_schema_version);
  try {
    ScenarioSpec spec = builtin_scenario(job.scenario);
    spec.set_sigma2(job.sigma2);
    spec.seed = g.seed;
    const auto [ds, truth] = gen_scenario(spec, job.rep);

    CommonOpts local = g;
    local.threads = fit_threads;
    const FitConfig cfg = make_config(local, truth.theta0.q, truth.theta0.qs,
                                      opt.max_iters, opt.rel_tol);
    const auto t0 = std::chrono::steady_clock::now();
    const FitResult result = fit(ds, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    const MetricRow row = compute_metrics(result.theta, result.phi, truth, cfg);

    cells[3] = opt_cell(row.MT_F);
    cells[4] = opt_cell(row.MT_H);
    cells[5] = opt_cell(row.MT_V);
    cells[6] = opt_cell(row.MT_A);
    cells[7] = opt_cell(row.MT_B);
    cells[8] = fmt_full(row.ME_beta);
    cells[9] = std::to_string(result.iterations);
    cells[10] = fmt_fixed(std::chrono::duration<double>(t1 - t0).count(), 3);
    *ok = true;
  } catch (const std::exception& e) {
    cells[11] = csv_quote(e.what());
    *ok = false;
  }
  return join(cells);
}

// Per-group mean(sd) summary over the successful rows of the raw CSV.
void write_bench_summary(const fs::path& raw_path, const fs::path& summary_path) {
  std::ifstream in(raw_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + raw_path.string());
  std::string line;
  std::getline(in, line);  // header, validated by the caller

  struct Group {
    std::string scenario;
    std::string sigma2;
    std::vector<std::vector<double>> metrics =
        std::vector<std::vector<double>>(6);  // MT_F..ME_beta
    int reps = 0;
  };
  std::vector<Group> groups;
  auto group_of = [&](const std::string& sc, const std::string& sg) -> Group& {
    for (auto& g : groups)
      if (g.scenario == sc && g.sigma2 == sg) return g;
    groups.push_back(Group{sc, sg, {}, 0});
    groups.back().metrics.resize(6);
    return groups.back();
  };

  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_row(line);
    if (cells.size() != 13) continue;
    if (!cells[11].empty()) continue;  // failed rep
    Group& g = group_of(cells[0], cells[1]);
    ++g.reps;
    for (int k = 0; k < 6; ++k) {
      const std::string& c = cells[3 + k];
      if (!c.empty()) g.metrics[static_cast<std::size_t>(k)].push_back(std::stod(c));
    }
  }

  auto mean_sd = [](const std::vector<double>& xs) -> std::string {
    if (xs.empty()) return "";
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() == 1) return fmt_fixed(mean, 2);
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return fmt_fixed(mean, 2) + "(" + fmt_fixed(sd, 2) + ")";
  };

  std::ostringstream os;
  os << "scenario,sigma2_v,reps,MT_F,MT_H,MT_V,MT_A,MT_B,ME_beta,schema_version\n";
  for (const auto& g : groups) {
    os << g.scenario << "," << g.sigma2 << "," << g.reps;
    for (int k = 0; k < 6; ++k)
      os << "," << mean_sd(g.metrics[static_cast<std::size_t>(k)]);
    os << "," << bench_schema_version << "\n";
  }
  write_text_file(summary_path, os.str());
}

int cmd_bench(const BenchOpts& opt, const CommonOpts& g) {
  std::vector<BenchJob> jobs;
  for (const auto& name : opt.scenarios) {
    const ScenarioSpec spec = builtin_scenario(name);  // validates the name
    std::vector<double> sigmas = opt.sigma2_v;
    if (sigmas.empty()) sigmas.push_back(spec.sigma2_v(0, 0));
    for (double sg : sigmas)
      for (int rep = 0; rep < opt.reps; ++rep)
        jobs.push_back(BenchJob{name, sg, rep});
  }

  const fs::path raw_path(opt.out);
  bool existed = fs::exists(raw_path);
  if (existed) {
    std::ifstream in(raw_path, std::ios::binary);
    std::string first;
    std::getline(in, first);
    if (!first.empty() && first.back() == '\r') first.pop_back();
    if (first.empty()) {
      existed = false;  // stale empty file: start fresh with a header
    } else if (first != kBenchHeader) {
      std::cerr << "error: " << raw_path.string()
                << " exists with a different header; refusing to append\n";
      return kExitFailure;
    }
  }

  // Worker pool over replications; each pooled fit runs single-threaded so
  // the pool owns the parallelism. Rows land in replication order regardless
  // of scheduling.
  int pool = g.threads > 0 ? g.threads
                           : static_cast<int>(std::thread::hardware_concurrency());
  pool = std::max(1, std::min<int>(pool, static_cast<int>(jobs.size())));
  const int fit_threads = pool > 1 ? 1 : g.threads;

  std::vector<std::string> rows(jobs.size());
  std::vector<char> ok(jobs.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      bool good = false;
      rows[j] = run_bench_job(jobs[j], g, opt, fit_threads, &good);
      ok[j] = good ? 1 : 0;
    }
  };
  if (pool <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < pool; ++t) threads.emplace_back(worker);
    for (auto& th : threads) th.join();
  }

  {
    std::ofstream out(raw_path, std::ios::binary | std::ios::app);
    if (!out) {
      std::cerr << "error: cannot open " << raw_path.string() << " for writing\n";
      return kExitFailure;
    }
    if (!existed) out << kBenchHeader << "\n";
    for (const auto& row : rows) out << row << "\n";
  }

  fs::path summary_path = raw_path;
  summary_path.replace_filename(raw_path.stem().string() + "_summary" +
                                raw_path.extension().string());
  write_bench_summary(raw_path, summary_path);

  const int succeeded = static_cast<int>(std::count(ok.begin(), ok.end(), 1));
  const int failed = static_cast<int>(jobs.size()) - succeeded;
  std::cout << "wrote " << jobs.size() << " rows to " << raw_path.string()
            << " (" << failed << " failed); summary: " << summary_path.string()
            << "\n";
  return succeeded > 0 ? kExitOk : kExitFailure;
}

template <class F>
int run_guarded(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadArgs;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-study multi-modality covariate-augmented generalized "
               "factor models: simulate, fit, select, evaluate, bench"};
  app.require_subcommand(1);

  CommonOpts g;

  SimulateOpts sim;
  CLI::App* c_sim = app.add_subcommand(
      "simulate", "Generate a named synthetic scenario with ground truth");
  c_sim->add_option("scenario", sim.scenario, "Scenario name")->required();
  c_sim->add_option("--out", sim.out, "Output directory")->required();
  CLI::Option* sig_opt =
      c_sim->add_option("--sigma2-v", sim.sigma2_v,
                        "Override the modality-effect variance (all studies)")
          ->check(CLI::NonNegativeNumber);
  add_common(c_sim, g);

  FitOpts fito;
  CLI::App* c_fit = app.add_subcommand("fit", "Fit the model to a saved dataset");
  c_fit->add_option("data", fito.data, "Dataset manifest (or its directory)")
      ->required();
  c_fit->add_option("--q", fito.q, "Shared factor count")->required();
  c_fit->add_option("--qs", fito.qs,
                    "Study factor counts (one per study, or one for all)")
      ->required()
      ->delimiter(',');
  c_fit->add_option("--out", fito.out, "Fit artifact directory")->required();
  c_fit->add_option("--max-iters", fito.max_iters, "Iteration cap")
      ->capture_default_str();
  c_fit->add_option("--rel-tol", fito.rel_tol, "Relative ELBO stopping tolerance")
      ->capture_default_str();
  add_common(c_fit, g);

  SelectOpts selo;
  CLI::App* c_sel = app.add_subcommand(
      "select", "Choose the factor counts by singular value ratios");
  c_sel->add_option("data", selo.data, "Dataset manifest (or its directory)")
      ->required();
  c_sel->add_option("--q-max", selo.q_max, "Upper bound for q")
      ->capture_default_str();
  c_sel->add_option("--qs-max", selo.qs_max, "Upper bound for each q_s")
      ->capture_default_str();
  c_sel->add_option("--out", selo.out, "Report path (JSON)")->required();
  c_sel->add_option("--max-iters", selo.max_iters, "Iteration cap per pilot fit")
      ->capture_default_str();
  c_sel->add_option("--rel-tol", selo.rel_tol, "Relative ELBO stopping tolerance")
      ->capture_default_str();
  add_common(c_sel, g);

  EvaluateOpts evo;
  CLI::App* c_ev = app.add_subcommand(
      "evaluate", "Score a fit artifact against saved ground truth");
  c_ev->add_option("--fit", evo.fit_dir, "Fit artifact directory")->required();
  c_ev->add_option("--truth", evo.truth_dir,
                   "Ground-truth directory (or the simulate output directory)")
      ->required();
  c_ev->add_option("--out", evo.out, "Optional JSON report path");

  BenchOpts ben;
  CLI::App* c_ben = app.add_subcommand(
      "bench", "Replicated generate/fit/score runs reported as CSV");
  c_ben->add_option("scenario", ben.scenarios, "Scenario names")
      ->required()
      ->expected(-1);
  c_ben->add_option("--sigma2-v", ben.sigma2_v,
                    "Modality-effect variances to sweep (comma separated)")
      ->delimiter(',');
  c_ben->add_option("--reps", ben.reps, "Replications per cell")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_ben->add_option("--out", ben.out, "Raw CSV path (appended if present)")
      ->required();
  c_ben->add_option("--max-iters", ben.max_iters, "Iteration cap per fit")
      ->capture_default_str();
  c_ben->add_option("--rel-tol", ben.rel_tol, "Relative ELBO stopping tolerance")
      ->capture_default_str();
  add_common(c_ben, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitBadArgs;
  }
  sim.has_sigma2 = sig_opt->count() > 0;

  if (app.got_subcommand(c_sim)) return run_guarded([&] { return cmd_simulate(sim, g); });
  if (app.got_subcommand(c_fit)) return run_guarded([&] { return cmd_fit(fito, g); });
  if (app.got_subcommand(c_sel)) return run_guarded([&] { return cmd_select(selo, g); });
  if (app.got_subcommand(c_ev)) return run_guarded([&] { return cmd_evaluate(evo); });
  if (app.got_subcommand(c_ben)) return run_guarded([&] { return cmd_bench(ben, g); });
  return kExitBadArgs;
}
