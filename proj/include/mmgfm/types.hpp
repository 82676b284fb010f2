// Core model/data types for the multi-study multi-modality covariate-augmented
// generalized factor model, plus the exponential-family link primitives.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace mmgfm {

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class ModalityType { Continuous, Count, Binomial };

inline const char* to_string(ModalityType t) {
  switch (t) {
    case ModalityType::Continuous: return "continuous";
    case ModalityType::Count: return "count";
    case ModalityType::Binomial: return "binomial";
  }
  return "?";
}

// Natural-parameter working range: y is clamped to [-30, 30] before any
// exponentiation so that Count/Binomial links stay finite in double precision.
inline constexpr double nat_param_bound = 30.0;

template <class Scalar>
inline Scalar clamp_nat(Scalar y) {
  const Scalar b = Scalar(nat_param_bound);
  return y < -b ? -b : (y > b ? b : y);
}

// log(1 + e^y) without overflow/underflow.
template <class Scalar>
inline Scalar log1pexp(Scalar y) {
  if (y > Scalar(33)) return y;
  if (y < Scalar(-33)) return std::exp(y);
  return std::log1p(std::exp(y));
}

template <class Scalar>
inline Scalar logistic(Scalar y) {
  return Scalar(1) / (Scalar(1) + std::exp(-y));
}

// log C(n, x) via log-gamma.
template <class Scalar>
inline Scalar log_choose(Scalar n, Scalar x) {
  return std::lgamma(n + Scalar(1)) - std::lgamma(x + Scalar(1)) -
         std::lgamma(n - x + Scalar(1));
}

// Conditional mean of x given natural parameter y.
//   Continuous: y;  Count: exp(y);  Binomial: trials * logistic(y).
template <class Scalar>
inline Scalar mean_fn(ModalityType type, Scalar y, Scalar trials = Scalar(1)) {
  switch (type) {
    case ModalityType::Continuous: return y;
    case ModalityType::Count: return std::exp(clamp_nat(y));
    case ModalityType::Binomial: return trials * logistic(clamp_nat(y));
  }
  return y;
}

// log p(x | y) for one cell. `lambda` is the Gaussian variance (Continuous
// only); `trials` is the Binomial trial count.
template <class Scalar>
inline Scalar log_density(ModalityType type, Scalar x, Scalar y,
                          Scalar lambda = Scalar(1), Scalar trials = Scalar(1)) {
  const Scalar yc = clamp_nat(y);
  switch (type) {
    case ModalityType::Continuous: {
      const Scalar r = x - y;
      return Scalar(-0.5) * (std::log(Scalar(2) * Scalar(M_PI) * lambda) +
                             r * r / lambda);
    }
    case ModalityType::Count:
      return x * yc - std::exp(yc) - std::lgamma(x + Scalar(1));
    case ModalityType::Binomial:
      return log_choose(trials, x) + x * yc - trials * log1pexp(yc);
  }
  return Scalar(0);
}

// One modality observed in one study: n units by p variables.
template <class Scalar>
struct ModalityT {
  MatrixX<Scalar> X;                        // n x p observations
  ModalityType type = ModalityType::Continuous;
  VectorX<Scalar> trials;                   // length p; Binomial only, >= 1
  VectorX<Scalar> offsets;                  // length n; defaults to zero

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }
  Scalar offset(Eigen::Index i) const {
    return offsets.size() > 0 ? offsets[i] : Scalar(0);
  }
};

template <class Scalar>
struct StudyT {
  std::vector<ModalityT<Scalar>> modalities;
  MatrixX<Scalar> Z;                        // n x d covariates (full column rank)

  Eigen::Index n() const { return Z.rows(); }
  Eigen::Index d() const { return Z.cols(); }
};

// All studies observe the same modalities (same count, types, dimensions,
// trial counts); sample sizes may differ.
template <class Scalar>
struct DatasetT {
  std::vector<StudyT<Scalar>> studies;

  Eigen::Index S() const { return static_cast<Eigen::Index>(studies.size()); }
  Eigen::Index M() const {
    return studies.empty()
               ? 0
               : static_cast<Eigen::Index>(studies.front().modalities.size());
  }
  Eigen::Index d() const { return studies.empty() ? 0 : studies.front().d(); }
  Eigen::Index p(Eigen::Index m) const { return studies.front().modalities[m].p(); }
  ModalityType type(Eigen::Index m) const {
    return studies.front().modalities[m].type;
  }
};

// Model parameters. Shared across studies: beta (covariate coefficients) and
// A (shared-factor loadings); study-specific: B (study-factor loadings),
// lambda (residual variances) and sigma2 (modality-effect variances).
template <class Scalar>
struct ModelParamsT {
  std::vector<MatrixX<Scalar>> beta;        // per m: p_m x d
  std::vector<MatrixX<Scalar>> A;           // per m: p_m x q
  std::vector<std::vector<MatrixX<Scalar>>> B;   // [s][m]: p_m x qs[s]
  std::vector<std::vector<VectorX<Scalar>>> lambda;  // [s][m]: length p_m, > 0
  MatrixX<Scalar> sigma2;                   // S x M, >= 0
  int q = 0;
  std::vector<int> qs;                      // length S
};

// Variational posterior. Per study s and unit i the factor posteriors are
// N(mF, SigmaF) and N(oH, PhiH); SigmaF/PhiH/varsV do not depend on i (the
// posterior precision is unit-independent), so one copy per study (or per
// study/modality for varsV) is stored. Xi/S2y exist only for non-Continuous
// modalities.
template <class Scalar>
struct VariationalParamsT {
  std::vector<std::vector<MatrixX<Scalar>>> Xi;   // [s][m]: n x p, Laplace mode
  std::vector<std::vector<MatrixX<Scalar>>> S2y;  // [s][m]: n x p, curvature var
  std::vector<MatrixX<Scalar>> MF;                // [s]: n x q posterior means
  std::vector<MatrixX<Scalar>> SigmaF;            // [s]: q x q SPD
  std::vector<MatrixX<Scalar>> OH;                // [s]: n x qs[s]
  std::vector<MatrixX<Scalar>> PhiH;              // [s]: qs[s] x qs[s] SPD
  std::vector<MatrixX<Scalar>> WV;                // [s]: n x M posterior means
  MatrixX<Scalar> varsV;                          // S x M (> 0 when sigma2 > 0)
};

// Latent factor matrices extracted from a fitted model.
template <class Scalar>
struct FactorEstimatesT {
  std::vector<MatrixX<Scalar>> F;   // [s]: n_s x q
  std::vector<MatrixX<Scalar>> H;   // [s]: n_s x qs[s]
  std::vector<MatrixX<Scalar>> V;   // [s]: n_s x M
};

using Modality = ModalityT<double>;
using Study = StudyT<double>;
using Dataset = DatasetT<double>;
using ModelParams = ModelParamsT<double>;
using VariationalParams = VariationalParamsT<double>;
using FactorEstimates = FactorEstimatesT<double>;

namespace detail {
inline bool is_integer(double v) { return std::floor(v) == v; }
}  // namespace detail

// Checks structural and value constraints; returns one message per violation
// (empty means valid). Messages carry study/modality/cell coordinates.
template <class Scalar>
std::vector<std::string> validate_dataset(const DatasetT<Scalar>& ds) {
  std::vector<std::string> errs;
  auto at = [](Eigen::Index s, Eigen::Index m) {
    return "study " + std::to_string(s) + " modality " + std::to_string(m);
  };
  if (ds.studies.empty()) {
    errs.push_back("dataset has no studies");
    return errs;
  }
  const auto& first = ds.studies.front();
  for (Eigen::Index s = 0; s < ds.S(); ++s) {
    const auto& st = ds.studies[s];
    const std::string here = "study " + std::to_string(s);
    if (st.Z.rows() == 0 || st.Z.cols() == 0) {
      errs.push_back(here + ": empty covariate matrix");
      continue;
    }
    if (st.Z.cols() != first.Z.cols())
      errs.push_back(here + ": covariate dimension " + std::to_string(st.Z.cols()) +
                     " differs from study 0 (" + std::to_string(first.Z.cols()) + ")");
    if (!st.Z.allFinite()) errs.push_back(here + ": covariates contain non-finite values");
    else {
      Eigen::JacobiSVD<MatrixX<Scalar>> svd(st.Z);
      const auto& sv = svd.singularValues();
      if (st.Z.rows() < st.Z.cols() ||
          sv[sv.size() - 1] <= Scalar(1e-10) * sv[0])
        errs.push_back(here + ": covariate matrix is not full column rank");
    }
    if (st.modalities.size() != first.modalities.size()) {
      errs.push_back(here + ": has " + std::to_string(st.modalities.size()) +
                     " modalities, study 0 has " +
                     std::to_string(first.modalities.size()));
      continue;
    }
    for (Eigen::Index m = 0; m < static_cast<Eigen::Index>(st.modalities.size()); ++m) {
      const auto& mod = st.modalities[m];
      const auto& ref = first.modalities[m];
      if (mod.type != ref.type)
        errs.push_back(at(s, m) + ": type " + to_string(mod.type) +
                       " differs from study 0 (" + to_string(ref.type) + ")");
      if (mod.p() != ref.p())
        errs.push_back(at(s, m) + ": has " + std::to_string(mod.p()) +
                       " variables, study 0 has " + std::to_string(ref.p()));
      if (mod.X.rows() != st.Z.rows())
        errs.push_back(at(s, m) + ": " + std::to_string(mod.X.rows()) +
                       " rows but covariates have " + std::to_string(st.Z.rows()));
      if (mod.offsets.size() > 0 && mod.offsets.size() != mod.X.rows())
        errs.push_back(at(s, m) + ": offsets length " +
                       std::to_string(mod.offsets.size()) + " != " +
                       std::to_string(mod.X.rows()) + " units");
      if (mod.type == ModalityType::Binomial) {
        if (mod.trials.size() != mod.p())
          errs.push_back(at(s, m) + ": trials length " +
                         std::to_string(mod.trials.size()) + " != " +
                         std::to_string(mod.p()) + " variables");
        else {
          for (Eigen::Index j = 0; j < mod.trials.size(); ++j)
            if (!(mod.trials[j] >= Scalar(1)) || !detail::is_integer(double(mod.trials[j])))
              errs.push_back(at(s, m) + " variable " + std::to_string(j) +
                             ": trial count must be an integer >= 1");
        }
        if (mod.trials.size() == ref.trials.size() && ref.trials.size() == mod.p() &&
            s > 0 && mod.trials != ref.trials)
          errs.push_back(at(s, m) + ": trial counts differ from study 0");
      }
      for (Eigen::Index i = 0; i < mod.X.rows(); ++i)
        for (Eigen::Index j = 0; j < mod.X.cols(); ++j) {
          const double v = double(mod.X(i, j));
          const std::string cell =
              at(s, m) + " row " + std::to_string(i) + " col " + std::to_string(j);
          if (!std::isfinite(v)) {
            errs.push_back(cell + ": non-finite value");
            continue;
          }
          if (mod.type == ModalityType::Count &&
              (v < 0 || !detail::is_integer(v)))
            errs.push_back(cell + ": count value " + std::to_string(v) +
                           " is not a nonnegative integer");
          if (mod.type == ModalityType::Binomial) {
            const double t = (mod.trials.size() == mod.p()) ? double(mod.trials[j]) : 1.0;
            if (v < 0 || v > t || !detail::is_integer(v))
              errs.push_back(cell + ": binomial value " + std::to_string(v) +
                             " is not an integer in [0, " + std::to_string(t) + "]");
          }
        }
    }
  }
  return errs;
}

}  // namespace mmgfm
