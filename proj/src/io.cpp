#include <mmgfm/io.hpp>

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string_view>
#include <system_error>

namespace mmgfm {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using Mat = MatrixX<double>;
using Vec = VectorX<double>;

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view cell, const fs::path& path, int line,
                    int col) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    throw std::runtime_error(path.string() + ":" + std::to_string(line) +
                             ":" + std::to_string(col) +
                             ": malformed number '" + std::string(cell) + "'");
  return v;
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> default_names(const char* stem, Eigen::Index k) {
  std::vector<std::string> names(k);
  for (Eigen::Index j = 0; j < k; ++j)
    names[j] = std::string(stem) + std::to_string(j);
  return names;
}

ModalityType type_from_string(const std::string& s, const fs::path& where) {
  if (s == "continuous") return ModalityType::Continuous;
  if (s == "count") return ModalityType::Count;
  if (s == "binomial") return ModalityType::Binomial;
  throw std::runtime_error(where.string() + ": unknown modality type '" + s +
                           "'");
}

ordered_json parse_json_file(const fs::path& path) {
  std::ifstream ifs(path);
  if (!ifs)
    throw std::runtime_error("cannot open " + path.string());
  try {
    return ordered_json::parse(ifs);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream ofs(path, std::ios::binary);
  if (!ofs)
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  ofs << text;
  if (!ofs)
    throw std::runtime_error("failed writing " + path.string());
}

// Matrix file naming scheme for fit artifacts; zero-width matrices are
// implied by the stored dimensions and get no file.
std::string beta_name(int m) { return "beta_" + std::to_string(m) + ".csv"; }
std::string a_name(int m) { return "A_" + std::to_string(m) + ".csv"; }
std::string b_name(int s, int m) {
  return "B_" + std::to_string(s) + "_" + std::to_string(m) + ".csv";
}
std::string lambda_name(int s, int m) {
  return "lambda_" + std::to_string(s) + "_" + std::to_string(m) + ".csv";
}
std::string xi_name(int s, int m) {
  return "xi_" + std::to_string(s) + "_" + std::to_string(m) + ".csv";
}
std::string s2y_name(int s, int m) {
  return "s2y_" + std::to_string(s) + "_" + std::to_string(m) + ".csv";
}

}  // namespace

void write_matrix_csv(const fs::path& path, const Mat& values,
                      const std::vector<std::string>& header) {
  if (static_cast<Eigen::Index>(header.size()) != values.cols())
    throw std::runtime_error("write_matrix_csv: header size " +
                             std::to_string(header.size()) +
                             " does not match " +
                             std::to_string(values.cols()) + " columns");
  std::string text;
  for (size_t j = 0; j < header.size(); ++j) {
    if (j) text += ',';
    text += header[j];
  }
  text += '\n';
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      if (j) text += ',';
      text += format_double(values(i, j));
    }
    text += '\n';
  }
  write_text_file(path, text);
}

CsvTable read_matrix_csv(const fs::path& path) {
  std::ifstream ifs(path, std::ios::binary);
  if (!ifs) throw std::runtime_error("cannot open " + path.string());
  CsvTable out;
  std::string line;
  if (!std::getline(ifs, line))
    throw std::runtime_error(path.string() + ": empty file, header expected");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  out.header = split_row(line);
  const Eigen::Index cols = static_cast<Eigen::Index>(out.header.size());
  std::vector<double> data;
  Eigen::Index rows = 0;
  int lineno = 1;
  while (std::getline(ifs, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_row(line);
    if (static_cast<Eigen::Index>(cells.size()) != cols)
      throw std::runtime_error(
          path.string() + ":" + std::to_string(lineno) + ": expected " +
          std::to_string(cols) + " columns, found " +
          std::to_string(cells.size()));
    for (size_t j = 0; j < cells.size(); ++j)
      data.push_back(
          parse_double(cells[j], path, lineno, static_cast<int>(j + 1)));
    ++rows;
  }
  out.values.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      out.values(i, j) = data[static_cast<size_t>(i * cols + j)];
  return out;
}

std::filesystem::path save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const int S = ds.S(), M = ds.M();
  ordered_json root;
  root["version"] = format_version;
  root["studies"] = ordered_json::array();
  for (int m = 0; m < M; ++m)
    if (ds.type(m) == ModalityType::Binomial) {
      const std::string file = "modality_" + std::to_string(m) + "_trials.csv";
      write_matrix_csv(dir / file,
                       ds.studies.front().modalities[m].trials.transpose(),
                       default_names("v", ds.p(m)));
    }
  for (int s = 0; s < S; ++s) {
    const auto& st = ds.studies[s];
    ordered_json js;
    js["name"] = "study_" + std::to_string(s);
    js["n"] = static_cast<std::int64_t>(st.n());
    const std::string zfile = "study_" + std::to_string(s) + "_Z.csv";
    write_matrix_csv(dir / zfile, st.Z, default_names("z", st.d()));
    js["covariates_file"] = zfile;
    js["modalities"] = ordered_json::array();
    for (int m = 0; m < M; ++m) {
      const auto& mod = st.modalities[m];
      ordered_json jm;
      jm["name"] = "modality_" + std::to_string(m);
      jm["type"] = to_string(mod.type);
      jm["p"] = static_cast<std::int64_t>(mod.p());
      const std::string dfile = "study_" + std::to_string(s) + "_modality_" +
                                std::to_string(m) + ".csv";
      write_matrix_csv(dir / dfile, mod.X, default_names("v", mod.p()));
      jm["data_file"] = dfile;
      if (mod.type == ModalityType::Binomial)
        jm["trials_file"] = "modality_" + std::to_string(m) + "_trials.csv";
      if (mod.offsets.size() > 0 && mod.offsets.cwiseAbs().maxCoeff() > 0) {
        const std::string ofile = "study_" + std::to_string(s) + "_modality_" +
                                  std::to_string(m) + "_offsets.csv";
        write_matrix_csv(dir / ofile, mod.offsets, {"offset"});
        jm["offsets_file"] = ofile;
      }
      js["modalities"].push_back(jm);
    }
    root["studies"].push_back(js);
  }
  const fs::path manifest = dir / "manifest.json";
  write_text_file(manifest, root.dump(2) + "\n");
  return manifest;
}

Dataset load_dataset(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path))
    throw std::runtime_error("manifest not found: " + manifest_path.string());
  const fs::path dir = manifest_path.parent_path();
  const ordered_json root = parse_json_file(manifest_path);
  const int version = root.at("version").get<int>();
  if (version != format_version)
    throw std::runtime_error(manifest_path.string() +
                             ": unsupported manifest version " +
                             std::to_string(version));
  Dataset ds;
  for (const auto& js : root.at("studies")) {
    Study st;
    const auto n = js.at("n").get<Eigen::Index>();
    const fs::path zpath = dir / js.at("covariates_file").get<std::string>();
    CsvTable z = read_matrix_csv(zpath);
    if (z.values.rows() != n)
      throw std::runtime_error(zpath.string() + ": declared n=" +
                               std::to_string(n) + " but file has " +
                               std::to_string(z.values.rows()) + " rows");
    st.Z = std::move(z.values);
    for (const auto& jm : js.at("modalities")) {
      Modality mod;
      mod.type = type_from_string(jm.at("type").get<std::string>(),
                                  manifest_path);
      const auto p = jm.at("p").get<Eigen::Index>();
      const fs::path dpath = dir / jm.at("data_file").get<std::string>();
      CsvTable t = read_matrix_csv(dpath);
      if (t.values.rows() != n || t.values.cols() != p)
        throw std::runtime_error(
            dpath.string() + ": declared " + std::to_string(n) + "x" +
            std::to_string(p) + " but file is " +
            std::to_string(t.values.rows()) + "x" +
            std::to_string(t.values.cols()));
      mod.X = std::move(t.values);
      if (mod.type == ModalityType::Binomial) {
        const fs::path tpath = dir / jm.at("trials_file").get<std::string>();
        const CsvTable tr = read_matrix_csv(tpath);
        if (tr.values.rows() != 1 || tr.values.cols() != p)
          throw std::runtime_error(tpath.string() +
                                   ": expected a single row of " +
                                   std::to_string(p) + " trial counts");
        mod.trials = tr.values.row(0).transpose();
      }
      if (jm.contains("offsets_file")) {
        const fs::path opath = dir / jm.at("offsets_file").get<std::string>();
        const CsvTable of = read_matrix_csv(opath);
        if (of.values.rows() != n || of.values.cols() != 1)
          throw std::runtime_error(opath.string() + ": expected " +
                                   std::to_string(n) + " offset rows");
        mod.offsets = of.values.col(0);
      }
      st.modalities.push_back(std::move(mod));
    }
    ds.studies.push_back(std::move(st));
  }
  const auto violations = validate_dataset(ds);
  if (!violations.empty()) {
    std::string msg = "dataset validation failed:";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw std::runtime_error(msg);
  }
  return ds;
}

void save_fit(const FitResult& result, const FitConfig& cfg,
              const fs::path& dir) {
  fs::create_directories(dir);
  const ModelParams& th = result.theta;
  const VariationalParams& ph = result.phi;
  const int S = static_cast<int>(th.B.size());
  const int M = static_cast<int>(th.beta.size());

  ordered_json root;
  root["version"] = format_version;
  root["converged"] = result.converged;
  root["iterations"] = result.iterations;
  ordered_json jc;
  jc["q"] = cfg.q;
  jc["qs"] = cfg.qs;
  jc["max_iters"] = cfg.max_iters;
  jc["rel_tol"] = cfg.rel_tol;
  jc["seed"] = cfg.seed;
  jc["monotonicity_slack"] = cfg.monotonicity_slack;
  jc["parallel"] = cfg.parallel;
  jc["deterministic_reduction"] = cfg.deterministic_reduction;
  jc["threads"] = cfg.threads;
  root["config"] = jc;
  ordered_json jd;
  jd["S"] = S;
  jd["M"] = M;
  jd["d"] = static_cast<std::int64_t>(th.beta.empty() ? 0 : th.beta[0].cols());
  std::vector<std::int64_t> nvec;
  for (int s = 0; s < S; ++s) nvec.push_back(ph.MF[s].rows());
  jd["n"] = nvec;
  std::vector<std::int64_t> pvec;
  for (int m = 0; m < M; ++m) pvec.push_back(th.beta[m].rows());
  jd["p"] = pvec;
  jd["q"] = th.q;
  jd["qs"] = th.qs;
  root["dims"] = jd;
  std::vector<std::string> types;
  for (int m = 0; m < M; ++m) {
    bool has_y = false;
    for (int s = 0; s < S; ++s)
      has_y = has_y || ph.Xi[s][m].size() > 0;
    types.push_back(has_y ? "latent" : "continuous");
  }
  root["y_layer"] = types;

  for (int m = 0; m < M; ++m) {
    write_matrix_csv(dir / beta_name(m), th.beta[m],
                     default_names("z", th.beta[m].cols()));
    if (th.q > 0)
      write_matrix_csv(dir / a_name(m), th.A[m], default_names("f", th.q));
  }
  for (int s = 0; s < S; ++s)
    for (int m = 0; m < M; ++m) {
      if (th.qs[s] > 0)
        write_matrix_csv(dir / b_name(s, m), th.B[s][m],
                         default_names("h", th.qs[s]));
      write_matrix_csv(dir / lambda_name(s, m), th.lambda[s][m].transpose(),
                       default_names("v", th.lambda[s][m].size()));
    }
  write_matrix_csv(dir / "sigma2.csv", th.sigma2, default_names("m", M));
  write_matrix_csv(dir / "varsV.csv", ph.varsV, default_names("m", M));
  for (int s = 0; s < S; ++s) {
    const std::string tag = std::to_string(s);
    if (th.q > 0) {
      write_matrix_csv(dir / ("F_" + tag + ".csv"), ph.MF[s],
                       default_names("f", th.q));
      write_matrix_csv(dir / ("SigmaF_" + tag + ".csv"), ph.SigmaF[s],
                       default_names("f", th.q));
    }
    if (th.qs[s] > 0) {
      write_matrix_csv(dir / ("H_" + tag + ".csv"), ph.OH[s],
                       default_names("h", th.qs[s]));
      write_matrix_csv(dir / ("PhiH_" + tag + ".csv"), ph.PhiH[s],
                       default_names("h", th.qs[s]));
    }
    write_matrix_csv(dir / ("V_" + tag + ".csv"), ph.WV[s],
                     default_names("m", M));
    for (int m = 0; m < M; ++m)
      if (ph.Xi[s][m].size() > 0) {
        write_matrix_csv(dir / xi_name(s, m), ph.Xi[s][m],
                         default_names("v", ph.Xi[s][m].cols()));
        write_matrix_csv(dir / s2y_name(s, m), ph.S2y[s][m],
                         default_names("v", ph.S2y[s][m].cols()));
      }
  }
  Mat trace(static_cast<Eigen::Index>(result.elbo_trace.size()), 1);
  for (size_t k = 0; k < result.elbo_trace.size(); ++k)
    trace(static_cast<Eigen::Index>(k), 0) = result.elbo_trace[k];
  write_matrix_csv(dir / "elbo_trace.csv", trace, {"elbo"});
  write_text_file(dir / "fit_manifest.json", root.dump(2) + "\n");
}

LoadedFit load_fit(const fs::path& dir) {
  const fs::path mpath = dir / "fit_manifest.json";
  if (!fs::exists(mpath))
    throw std::runtime_error("fit manifest not found: " + mpath.string());
  const ordered_json root = parse_json_file(mpath);
  const int version = root.at("version").get<int>();
  if (version != format_version)
    throw std::runtime_error(mpath.string() +
                             ": unsupported fit artifact version " +
                             std::to_string(version));
  LoadedFit out;
  FitConfig& cfg = out.config;
  const auto& jc = root.at("config");
  cfg.q = jc.at("q").get<int>();
  cfg.qs = jc.at("qs").get<std::vector<int>>();
  cfg.max_iters = jc.at("max_iters").get<int>();
  cfg.rel_tol = jc.at("rel_tol").get<double>();
  cfg.seed = jc.at("seed").get<std::uint64_t>();
  cfg.monotonicity_slack = jc.at("monotonicity_slack").get<double>();
  cfg.parallel = jc.at("parallel").get<bool>();
  cfg.deterministic_reduction = jc.at("deterministic_reduction").get<bool>();
  cfg.threads = jc.at("threads").get<int>();

  FitResult& res = out.result;
  res.converged = root.at("converged").get<bool>();
  res.iterations = root.at("iterations").get<int>();
  const auto& jd = root.at("dims");
  const int S = jd.at("S").get<int>();
  const int M = jd.at("M").get<int>();
  const auto nvec = jd.at("n").get<std::vector<Eigen::Index>>();
  const auto pvec = jd.at("p").get<std::vector<Eigen::Index>>();
  ModelParams& th = res.theta;
  VariationalParams& ph = res.phi;
  th.q = jd.at("q").get<int>();
  th.qs = jd.at("qs").get<std::vector<int>>();
  const auto y_layer = root.at("y_layer").get<std::vector<std::string>>();

  th.beta.resize(M);
  th.A.resize(M);
  th.B.assign(S, std::vector<Mat>(M));
  th.lambda.assign(S, std::vector<Vec>(M));
  for (int m = 0; m < M; ++m) {
    th.beta[m] = read_matrix_csv(dir / beta_name(m)).values;
    th.A[m] = th.q > 0 ? read_matrix_csv(dir / a_name(m)).values
                       : Mat::Zero(pvec[m], 0);
  }
  for (int s = 0; s < S; ++s)
    for (int m = 0; m < M; ++m) {
      th.B[s][m] = th.qs[s] > 0 ? read_matrix_csv(dir / b_name(s, m)).values
                                : Mat::Zero(pvec[m], 0);
      th.lambda[s][m] =
          read_matrix_csv(dir / lambda_name(s, m)).values.row(0).transpose();
    }
  th.sigma2 = read_matrix_csv(dir / "sigma2.csv").values;
  ph.varsV = read_matrix_csv(dir / "varsV.csv").values;
  ph.MF.resize(S);
  ph.SigmaF.resize(S);
  ph.OH.resize(S);
  ph.PhiH.resize(S);
  ph.WV.resize(S);
  ph.Xi.assign(S, std::vector<Mat>(M));
  ph.S2y.assign(S, std::vector<Mat>(M));
  for (int s = 0; s < S; ++s) {
    const std::string tag = std::to_string(s);
    if (th.q > 0) {
      ph.MF[s] = read_matrix_csv(dir / ("F_" + tag + ".csv")).values;
      ph.SigmaF[s] = read_matrix_csv(dir / ("SigmaF_" + tag + ".csv")).values;
    } else {
      ph.MF[s] = Mat::Zero(nvec[s], 0);
      ph.SigmaF[s] = Mat::Zero(0, 0);
    }
    if (th.qs[s] > 0) {
      ph.OH[s] = read_matrix_csv(dir / ("H_" + tag + ".csv")).values;
      ph.PhiH[s] = read_matrix_csv(dir / ("PhiH_" + tag + ".csv")).values;
    } else {
      ph.OH[s] = Mat::Zero(nvec[s], 0);
      ph.PhiH[s] = Mat::Zero(0, 0);
    }
    ph.WV[s] = read_matrix_csv(dir / ("V_" + tag + ".csv")).values;
    for (int m = 0; m < M; ++m)
      if (y_layer[m] == "latent") {
        ph.Xi[s][m] = read_matrix_csv(dir / xi_name(s, m)).values;
        ph.S2y[s][m] = read_matrix_csv(dir / s2y_name(s, m)).values;
      }
  }
  const CsvTable trace = read_matrix_csv(dir / "elbo_trace.csv");
  res.elbo_trace.assign(trace.values.data(),
                        trace.values.data() + trace.values.rows());
  return out;
}

}  // namespace mmgfm
