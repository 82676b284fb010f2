// Synthetic data generators for the benchmark scenarios: multi-study,
// multi-modality responses driven by shared factors, study-specific factors,
// per-modality random effects and observed covariates.
#pragma once

#include <mmgfm/types.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mmgfm {
class Rng;

struct ScenarioSpec {
  int S = 1;
  int M = 1;
  std::vector<int> n;                 // length S
  std::vector<int> p;                 // length M
  int d = 1;
  int q = 1;
  std::vector<int> qs;                // length S
  std::vector<ModalityType> types;    // length M
  std::vector<VectorX<double>> trials;  // per Binomial modality (index m); empty = 1
  std::vector<double> rho_m;          // length M, signal strength
  double rho_z = 0.5;                 // covariate strength
  MatrixX<double> sigma2_v;           // S x M variances of the modality effects
  double eps_var = 1.0;               // Var(eps)
  std::vector<MatrixX<double>> offsets;  // per study: n_s x M; empty = zero
  std::uint64_t seed = 0;

  void set_sigma2(double v);          // fill sigma2_v with a constant
};

struct GroundTruth {
  ModelParams theta0;
  std::vector<MatrixX<double>> F0;    // [s]: n_s x q
  std::vector<MatrixX<double>> H0;    // [s]: n_s x qs[s]
  std::vector<MatrixX<double>> V0;    // [s]: n_s x M
};

// Draws a p_m x (q + q1) matrix with iid N(0,1) entries, takes its thin SVD
// U S V' and returns rho * U * S split into the first q columns (shared
// loadings) and the last q1 columns (study-1 loadings).
std::pair<MatrixX<double>, MatrixX<double>> gen_loadings(int p_m, int q, int q1,
                                                         double rho, Rng& rng);

// Same construction for a study s > 1: a p_m x q_s matrix rho * U * S.
MatrixX<double> gen_study_loadings(int p_m, int q_s, double rho, Rng& rng);

// Generates one replication. Parameters (beta, A, B) depend only on
// spec.seed and are identical across replications; factors, covariates and
// noise vary with `rep`.
std::pair<Dataset, GroundTruth> gen_scenario(const ScenarioSpec& spec,
                                             int rep = 0);

// Named benchmark configurations. Throws std::invalid_argument listing the
// valid names when `name` is unknown.
ScenarioSpec builtin_scenario(const std::string& name);

const std::vector<std::string>& builtin_scenario_names();

}  // namespace mmgfm
