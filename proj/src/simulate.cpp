#include <mmgfm/simulate.hpp>

#include <mmgfm/rng.hpp>

#include <Eigen/SVD>

#include <stdexcept>

namespace mmgfm {

namespace {

// Stream layout: stream 0 draws parameters; replication `rep` study `s`
// draws its covariates/factors/noise from stream ((rep+1) << 16) | s.
constexpr std::uint64_t kParamStream = 0;

std::uint64_t noise_stream(int rep, int s) {
  return (static_cast<std::uint64_t>(rep) + 1) << 16 |
         static_cast<std::uint64_t>(s);
}

MatrixX<double> randn(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  MatrixX<double> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

MatrixX<double> scaled_left_factor(const MatrixX<double>& G, double rho) {
  if (G.cols() == 0) return G;
  Eigen::JacobiSVD<MatrixX<double>> svd(
      G, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return rho * svd.matrixU() * svd.singularValues().asDiagonal();
}

}  // namespace

void ScenarioSpec::set_sigma2(double v) {
  sigma2_v = MatrixX<double>::Constant(S, M, v);
}

std::pair<MatrixX<double>, MatrixX<double>> gen_loadings(int p_m, int q, int q1,
                                                         double rho, Rng& rng) {
  if (p_m < q + q1)
    throw std::invalid_argument("gen_loadings: p_m must be >= q + q1");
  const MatrixX<double> US = scaled_left_factor(randn(rng, p_m, q + q1), rho);
  return {US.leftCols(q), US.rightCols(q1)};
}

MatrixX<double> gen_study_loadings(int p_m, int q_s, double rho, Rng& rng) {
  if (p_m < q_s)
    throw std::invalid_argument("gen_study_loadings: p_m must be >= q_s");
  return scaled_left_factor(randn(rng, p_m, q_s), rho);
}

std::pair<Dataset, GroundTruth> gen_scenario(const ScenarioSpec& spec, int rep) {
  if (spec.S < 1 || spec.M < 1) throw std::invalid_argument("empty scenario");
  if (static_cast<int>(spec.n.size()) != spec.S ||
      static_cast<int>(spec.p.size()) != spec.M ||
      static_cast<int>(spec.qs.size()) != spec.S ||
      static_cast<int>(spec.types.size()) != spec.M ||
      static_cast<int>(spec.rho_m.size()) != spec.M)
    throw std::invalid_argument("scenario spec: inconsistent dimension vectors");
  if (spec.sigma2_v.rows() != spec.S || spec.sigma2_v.cols() != spec.M)
    throw std::invalid_argument("scenario spec: sigma2_v must be S x M");
  for (int m = 0; m < spec.M; ++m)
    if (spec.p[m] < spec.q + spec.qs[0])
      throw std::invalid_argument(
          "scenario spec: q + qs exceeds a modality dimension");

  GroundTruth truth;
  auto& th = truth.theta0;
  th.q = spec.q;
  th.qs = spec.qs;
  th.sigma2 = spec.sigma2_v;

  // --- parameters: fixed across replications -------------------------------
  Rng prng(spec.seed, kParamStream);
  th.beta.resize(spec.M);
  for (int m = 0; m < spec.M; ++m)
    th.beta[m] = 2.0 * randn(prng, spec.p[m], spec.d);  // iid N(0, 4)
  th.A.resize(spec.M);
  th.B.assign(spec.S, std::vector<MatrixX<double>>(spec.M));
  for (int m = 0; m < spec.M; ++m) {
    auto [A, B1] =
        gen_loadings(spec.p[m], spec.q, spec.qs[0], spec.rho_m[m], prng);
    th.A[m] = std::move(A);
    th.B[0][m] = std::move(B1);
  }
  for (int s = 1; s < spec.S; ++s)
    for (int m = 0; m < spec.M; ++m)
      th.B[s][m] = gen_study_loadings(spec.p[m], spec.qs[s], spec.rho_m[m], prng);
  th.lambda.assign(spec.S, {});
  for (int s = 0; s < spec.S; ++s) {
    th.lambda[s].resize(spec.M);
    for (int m = 0; m < spec.M; ++m)
      th.lambda[s][m] = VectorX<double>::Constant(spec.p[m], spec.eps_var);
  }

  // --- replication-specific draws ------------------------------------------
  Dataset ds;
  ds.studies.resize(spec.S);
  truth.F0.resize(spec.S);
  truth.H0.resize(spec.S);
  truth.V0.resize(spec.S);
  for (int s = 0; s < spec.S; ++s) {
    Rng rng(spec.seed, noise_stream(rep, s));
    const int n = spec.n[s];
    auto& st = ds.studies[s];
    st.Z.resize(n, spec.d);
    st.Z.col(0).setOnes();
    for (Eigen::Index i = 0; i < n; ++i)
      for (int k = 1; k < spec.d; ++k)
        st.Z(i, k) = spec.rho_z * rng.uniform(-3.0, 3.0);
    truth.F0[s] = randn(rng, n, spec.q);
    truth.H0[s] = randn(rng, n, spec.qs[s]);
    truth.V0[s].resize(n, spec.M);
    for (int m = 0; m < spec.M; ++m) {
      const double sd = std::sqrt(spec.sigma2_v(s, m));
      for (Eigen::Index i = 0; i < n; ++i)
        truth.V0[s](i, m) = sd == 0.0 ? 0.0 : sd * rng.normal();
    }
    st.modalities.resize(spec.M);
    int bin_index = 0;
    for (int m = 0; m < spec.M; ++m) {
      auto& mod = st.modalities[m];
      mod.type = spec.types[m];
      if (mod.type == ModalityType::Binomial) {
        if (static_cast<int>(spec.trials.size()) > bin_index &&
            spec.trials[bin_index].size() == spec.p[m])
          mod.trials = spec.trials[bin_index];
        else
          mod.trials = VectorX<double>::Ones(spec.p[m]);
        ++bin_index;
      }
      MatrixX<double> Y = st.Z * th.beta[m].transpose() +
                          truth.F0[s] * th.A[m].transpose() +
                          truth.H0[s] * th.B[s][m].transpose();
      Y.colwise() += truth.V0[s].col(m);
      if (spec.offsets.size() == static_cast<std::size_t>(spec.S) &&
          spec.offsets[s].size() > 0) {
        Y.colwise() += spec.offsets[s].col(m);
        mod.offsets = spec.offsets[s].col(m);
      }
      const double eps_sd = std::sqrt(spec.eps_var);
      for (Eigen::Index i = 0; i < n; ++i)
        for (int j = 0; j < spec.p[m]; ++j) Y(i, j) += eps_sd * rng.normal();
      mod.X.resize(n, spec.p[m]);
      switch (mod.type) {
        case ModalityType::Continuous:
          mod.X = Y;
          break;
        case ModalityType::Count:
          for (Eigen::Index i = 0; i < n; ++i)
            for (int j = 0; j < spec.p[m]; ++j)
              mod.X(i, j) = rng.poisson(std::exp(clamp_nat(Y(i, j))));
          break;
        case ModalityType::Binomial:
          for (Eigen::Index i = 0; i < n; ++i)
            for (int j = 0; j < spec.p[m]; ++j)
              mod.X(i, j) = rng.binomial(mod.trials[j], logistic(Y(i, j)));
          break;
      }
    }
  }
  return {std::move(ds), std::move(truth)};
}

namespace {

ScenarioSpec make_spec(int S, std::vector<int> n, std::vector<int> p,
                       std::vector<ModalityType> types, double sigma2,
                       double rho = 2.0, double eps_var = 1.0) {
  ScenarioSpec spec;
  spec.S = S;
  spec.M = static_cast<int>(p.size());
  spec.n = std::move(n);
  spec.p = std::move(p);
  spec.d = 3;
  spec.q = 3;
  spec.qs.assign(S, 2);
  spec.types = std::move(types);
  spec.rho_m.assign(spec.M, rho);
  spec.rho_z = 0.5;
  spec.set_sigma2(sigma2);
  spec.eps_var = eps_var;
  return spec;
}

std::vector<ModalityType> repeat(ModalityType t, int k) {
  return std::vector<ModalityType>(static_cast<std::size_t>(k), t);
}

std::vector<ModalityType> concat(std::vector<ModalityType> a,
                                 const std::vector<ModalityType>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// 20-variable layout shared by case3.6 and case4.5: p_m = 150 (m <= 7),
// 50 (8 <= m <= 13), 60 (14 <= m <= 20); the five-modality mixed-type
// pattern of case3.3 tiled four times.
std::vector<int> twenty_dims() {
  std::vector<int> p;
  for (int m = 1; m <= 20; ++m) p.push_back(m <= 7 ? 150 : (m <= 13 ? 50 : 60));
  return p;
}

std::vector<ModalityType> twenty_types() {
  std::vector<ModalityType> t;
  for (int rep = 0; rep < 4; ++rep)
    t = concat(std::move(t),
               concat(repeat(ModalityType::Continuous, 2),
                      concat(repeat(ModalityType::Count, 1),
                             repeat(ModalityType::Binomial, 2))));
  return t;
}

const std::vector<ModalityType> kMixed5 =
    concat(repeat(ModalityType::Continuous, 2),
           concat(repeat(ModalityType::Count, 1),
                  repeat(ModalityType::Binomial, 2)));

}  // namespace

const std::vector<std::string>& builtin_scenario_names() {
  static const std::vector<std::string> names = {
      "scenario1", "scenario2", "case3.1", "case3.2", "case3.3", "case3.4",
      "case3.5",   "case3.6",   "case4.1", "case4.2", "case4.3", "case4.4",
      "case4.5"};
  return names;
}

ScenarioSpec builtin_scenario(const std::string& name) {
  if (name == "scenario1")
    return make_spec(3, {300, 200, 100}, {50, 150, 200},
                     repeat(ModalityType::Count, 3), 1.0);
  if (name == "scenario2")
    return make_spec(3, {300, 200, 100}, {100, 200, 50, 150, 200},
                     concat(repeat(ModalityType::Continuous, 2),
                            repeat(ModalityType::Count, 3)),
                     0.0);
  if (name == "case3.1")
    return make_spec(2, {300, 200}, {50, 150, 200, 100, 60},
                     concat(repeat(ModalityType::Continuous, 3),
                            repeat(ModalityType::Binomial, 2)),
                     0.7);
  if (name == "case3.2")
    return make_spec(2, {300, 200}, {50, 150, 200, 100, 200},
                     concat(repeat(ModalityType::Count, 3),
                            repeat(ModalityType::Binomial, 2)),
                     0.5);
  if (name == "case3.3")
    return make_spec(2, {300, 200}, {50, 150, 50, 100, 60}, kMixed5, 0.5);
  if (name == "case3.4")
    return make_spec(2, {100, 200}, {250, 50, 50, 100, 50}, kMixed5, 0.5);
  if (name == "case3.5") {
    std::vector<int> n;
    for (int s = 0; s < 20; ++s) n.push_back(s < 10 ? 50 : 30);
    return make_spec(20, std::move(n), {50, 150, 50, 100, 60}, kMixed5, 0.5);
  }
  if (name == "case3.6")
    return make_spec(2, {300, 200}, twenty_dims(), twenty_types(), 0.5);
  if (name == "case4.1")
    return make_spec(3, {100, 150, 80}, {50, 150, 50, 100, 60}, kMixed5, 0.5,
                     3.0);
  if (name == "case4.2")
    return make_spec(3, {300, 200, 100}, {50, 150, 50, 100, 60}, kMixed5, 0.5,
                     3.0);
  if (name == "case4.3")
    return make_spec(3, {300, 200, 100}, {50, 150, 50, 100, 60}, kMixed5, 0.5,
                     3.0, 3.0);
  if (name == "case4.4")
    return make_spec(3, {300, 200, 100}, {250, 400, 250, 300, 200}, kMixed5,
                     0.5, 3.0);
  if (name == "case4.5")
    return make_spec(3, {300, 200, 100}, twenty_dims(), twenty_types(), 0.5,
                     3.0);
  std::string msg = "unknown scenario '" + name + "'; valid names:";
  for (const auto& n : builtin_scenario_names()) msg += " " + n;
  throw std::invalid_argument(msg);
}

}  // namespace mmgfm
