#pragma once

// Variational EM engine for the multi-study, multi-modality covariate-
// augmented generalized factor model. The posterior over (y, f, h, v) is
// approximated by a fully factorized Gaussian family; E-steps are exact
// coordinate maximizers of the evidence lower bound except for the y block,
// which uses guarded Newton (Laplace) steps, and M-steps are closed-form
// weighted least-squares / moment updates.

#include <mmgfm/types.hpp>

#include <vector>

namespace mmgfm {

struct FitConfig {
  int q = 0;                 // shared factor count
  std::vector<int> qs;       // study-specific factor counts, one per study
  int max_iters = 500;
  double rel_tol = 1e-6;     // relative ELBO change for convergence
  std::uint64_t seed = 0;    // reserved for stochastic extensions; the
                             // current solver is deterministic
  double monotonicity_slack = 1e-6;  // allowed relative per-iteration ELBO
                                     // decrease (the y-step is approximate)
  bool parallel = true;
  bool deterministic_reduction = true;  // reductions always run in a fixed
                                        // order; kept for config parity
  int threads = 0;           // worker cap when parallel; 0 = all hardware
};

struct FitResult {
  ModelParams theta;
  VariationalParams phi;
  std::vector<double> elbo_trace;  // one value per iteration
  bool converged = false;
  int iterations = 0;
};

// Deterministic initialization: link-scale data, per-variable least squares
// for beta, pooled centered SVD for (A, mF), per-study SVD for (B, oH),
// residual variances for lambda (floored), sigma2 = varsV = 1e-2.
void init_params(const Dataset& ds, const FitConfig& cfg, ModelParams& theta,
                 VariationalParams& phi);

// Evidence lower bound for the current (theta, phi). Throws std::runtime_error
// if a covariance block in phi is not symmetric positive definite.
double elbo(const ModelParams& theta, const VariationalParams& phi,
            const Dataset& ds, const FitConfig& cfg = {});

// Laplace update of the variational y-layer (xi, s2y) for non-Continuous
// modalities: guarded Newton steps on the per-cell objective
// log p(x|y) - (y - mu)^2 / (2 lambda), with xi kept in the stable domain.
void estep_y(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg = {});

// Exact coordinate maximizers of the bound for the Gaussian blocks.
void estep_f(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg = {});
void estep_h(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg = {});
void estep_v(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg = {});

// Joint update of (beta, A, B) by per-variable weighted least squares pooled
// across studies, cycled with the lambda moment update until stable, then the
// closed-form sigma2 update.
void mstep(ModelParams& theta, const VariationalParams& phi, const Dataset& ds,
           const FitConfig& cfg = {});

// init -> { estep_y, estep_f, estep_h, estep_v, mstep, elbo } until the
// relative ELBO change drops below rel_tol or max_iters is reached; the final
// parameters are passed through the identifiability alignment.
FitResult fit(const Dataset& ds, const FitConfig& cfg);

// Posterior factor summaries: F rows = mF, H rows = oH, V entries = wV.
FactorEstimates extract_factors(const VariationalParams& phi,
                                const FitConfig& cfg = {});

}  // namespace mmgfm
