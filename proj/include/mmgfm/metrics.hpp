// Estimation-quality metrics: column-space trace statistics and the mean
// absolute error of regression coefficients.
#pragma once

#include <Eigen/Dense>

#include <mmgfm/types.hpp>

#include <optional>
#include <stdexcept>
#include <vector>

namespace mmgfm {

// Tr{D0' Dhat (Dhat'Dhat)^-1 Dhat' D0} / Tr(D0'D0): the fraction of D0's
// energy captured by the column space of Dhat; in [0, 1]. A rank-deficient
// Dhat is handled with the pseudo-inverse (pivoted complete orthogonal
// decomposition); the effective rank is reported through `effective_rank`
// when requested.
template <class D1, class D2>
double trace_stat(const Eigen::MatrixBase<D1>& Dhat,
                  const Eigen::MatrixBase<D2>& D0,
                  Eigen::Index* effective_rank = nullptr) {
  using Mat = MatrixX<typename D1::Scalar>;
  if (Dhat.rows() != D0.rows())
    throw std::invalid_argument("trace_stat: row count mismatch");
  const double den = D0.squaredNorm();
  if (den == 0.0) throw std::invalid_argument("trace_stat: reference matrix is zero");
  const Mat G = Dhat.transpose() * Dhat;
  const Mat C = Dhat.transpose() * D0;
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(G);
  if (effective_rank) *effective_rank = cod.rank();
  const Mat X = cod.solve(C);  // (Dhat'Dhat)^+ Dhat'D0
  const double num = (C.array() * X.array()).sum();
  return num / den;
}

// Means of trace_stat over the indicated index sets. Blocks whose reference
// matrix is identically zero are undefined (degenerate truth) and skipped;
// if every block is degenerate the result is "not available".
template <class Scalar>
std::optional<double> mean_trace(const std::vector<MatrixX<Scalar>>& est,
                                 const std::vector<MatrixX<Scalar>>& ref) {
  if (est.size() != ref.size())
    throw std::invalid_argument("mean_trace: block count mismatch");
  double sum = 0.0;
  int cnt = 0;
  for (std::size_t k = 0; k < est.size(); ++k) {
    if (ref[k].squaredNorm() == 0.0) continue;
    sum += trace_stat(est[k], ref[k]);
    ++cnt;
  }
  if (cnt == 0) return std::nullopt;
  return sum / cnt;
}

template <class Scalar>
std::optional<double> mean_trace_F(const std::vector<MatrixX<Scalar>>& Fhat,
                                   const std::vector<MatrixX<Scalar>>& F0) {
  return mean_trace(Fhat, F0);
}

template <class Scalar>
std::optional<double> mean_trace_H(const std::vector<MatrixX<Scalar>>& Hhat,
                                   const std::vector<MatrixX<Scalar>>& H0) {
  return mean_trace(Hhat, H0);
}

// V_s is treated as one n_s x M matrix per study.
template <class Scalar>
std::optional<double> mean_trace_V(const std::vector<MatrixX<Scalar>>& Vhat,
                                   const std::vector<MatrixX<Scalar>>& V0) {
  return mean_trace(Vhat, V0);
}

// Averages over modalities.
template <class Scalar>
std::optional<double> mean_trace_A(const std::vector<MatrixX<Scalar>>& Ahat,
                                   const std::vector<MatrixX<Scalar>>& A0) {
  return mean_trace(Ahat, A0);
}

// Averages over studies and modalities.
template <class Scalar>
std::optional<double> mean_trace_B(
    const std::vector<std::vector<MatrixX<Scalar>>>& Bhat,
    const std::vector<std::vector<MatrixX<Scalar>>>& B0) {
  if (Bhat.size() != B0.size())
    throw std::invalid_argument("mean_trace_B: study count mismatch");
  double sum = 0.0;
  int cnt = 0;
  for (std::size_t s = 0; s < Bhat.size(); ++s) {
    if (Bhat[s].size() != B0[s].size())
      throw std::invalid_argument("mean_trace_B: modality count mismatch");
    for (std::size_t m = 0; m < Bhat[s].size(); ++m) {
      if (B0[s][m].squaredNorm() == 0.0) continue;
      sum += trace_stat(Bhat[s][m], B0[s][m]);
      ++cnt;
    }
  }
  if (cnt == 0) return std::nullopt;
  return sum / cnt;
}

// Mean absolute entrywise deviation of stacked coefficient matrices.
template <class D1, class D2>
double beta_mae(const Eigen::MatrixBase<D1>& betahat,
                const Eigen::MatrixBase<D2>& beta0) {
  if (betahat.rows() != beta0.rows() || betahat.cols() != beta0.cols())
    throw std::invalid_argument("beta_mae: shape mismatch");
  return (betahat - beta0).cwiseAbs().sum() /
         double(beta0.rows() * beta0.cols());
}

// Convenience overload stacking per-modality coefficient blocks.
template <class Scalar>
double beta_mae(const std::vector<MatrixX<Scalar>>& betahat,
                const std::vector<MatrixX<Scalar>>& beta0) {
  if (betahat.size() != beta0.size())
    throw std::invalid_argument("beta_mae: block count mismatch");
  double sum = 0.0;
  Eigen::Index cells = 0;
  for (std::size_t m = 0; m < beta0.size(); ++m) {
    if (betahat[m].rows() != beta0[m].rows() ||
        betahat[m].cols() != beta0[m].cols())
      throw std::invalid_argument("beta_mae: shape mismatch");
    sum += (betahat[m] - beta0[m]).cwiseAbs().sum();
    cells += beta0[m].size();
  }
  return sum / double(cells);
}

}  // namespace mmgfm
