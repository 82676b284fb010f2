// Post-fit canonicalization of the factor representation. The likelihood is
// invariant to invertible mixing of factors with loadings; this fixes the
// orthogonal part of that freedom so saved fits are comparable: stacked
// loadings are rotated to their left singular form (columns orthogonal,
// ordered by decreasing scale) and column signs are pinned.
#pragma once

#include <Eigen/SVD>

#include <mmgfm/types.hpp>

#include <vector>

namespace mmgfm {

namespace detail {

// Rotates the loading blocks to U*S from the thin SVD of their vertical
// stack and applies V (and sign flips) to the factor side.
template <class Scalar>
void align_block(std::vector<MatrixX<Scalar>>& loadings,
                 MatrixX<Scalar>* factors, MatrixX<Scalar>* cov,
                 std::vector<MatrixX<Scalar>*> extra_factors = {},
                 std::vector<MatrixX<Scalar>*> extra_covs = {}) {
  if (loadings.empty()) return;
  const Eigen::Index k = loadings.front().cols();
  if (k == 0) return;
  Eigen::Index rows = 0;
  for (const auto& L : loadings) rows += L.rows();
  MatrixX<Scalar> stack(rows, k);
  Eigen::Index at = 0;
  for (const auto& L : loadings) {
    stack.middleRows(at, L.rows()) = L;
    at += L.rows();
  }
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(
      stack, Eigen::ComputeThinU | Eigen::ComputeThinV);
  MatrixX<Scalar> US = svd.matrixU() * svd.singularValues().asDiagonal();
  MatrixX<Scalar> V = svd.matrixV();
  // pin signs: the entry of largest magnitude in each stacked column is
  // made positive (first such entry on ties)
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index imax = 0;
    US.col(c).cwiseAbs().maxCoeff(&imax);
    if (US(imax, c) < Scalar(0)) {
      US.col(c) = -US.col(c);
      V.col(c) = -V.col(c);
    }
  }
  at = 0;
  for (auto& L : loadings) {
    L = US.middleRows(at, L.rows());
    at += L.rows();
  }
  if (factors) *factors *= V;
  for (auto* f : extra_factors)
    if (f) *f *= V;
  if (cov) *cov = (V.transpose() * (*cov) * V).eval();
  for (auto* c : extra_covs)
    if (c) *c = (V.transpose() * (*c) * V).eval();
}

}  // namespace detail

// Canonicalizes theta/phi in place: shared loadings A (stacked over
// modalities) and, per study, the study loadings B_s (stacked over
// modalities), with factor means and covariances rotated to keep every
// predictor unchanged. Idempotent.
template <class Scalar>
void align(ModelParamsT<Scalar>& theta, VariationalParamsT<Scalar>& phi) {
  const std::size_t S = theta.B.size();
  if (!theta.A.empty() && theta.q > 0) {
    std::vector<MatrixX<Scalar>*> fs;
    for (auto& F : phi.MF) fs.push_back(&F);
    std::vector<MatrixX<Scalar>*> cs;
    for (auto& C : phi.SigmaF) cs.push_back(&C);
    detail::align_block(theta.A, static_cast<MatrixX<Scalar>*>(nullptr),
                        static_cast<MatrixX<Scalar>*>(nullptr), fs, cs);
  }
  for (std::size_t s = 0; s < S; ++s) {
    if (theta.qs.size() > s && theta.qs[s] == 0) continue;
    MatrixX<Scalar>* F = phi.OH.size() > s ? &phi.OH[s] : nullptr;
    MatrixX<Scalar>* C = phi.PhiH.size() > s ? &phi.PhiH[s] : nullptr;
    detail::align_block(theta.B[s], F, C);
  }
}

// Variant for ground-truth parameter sets carrying plain factor matrices.
template <class Scalar>
void align(ModelParamsT<Scalar>& theta, std::vector<MatrixX<Scalar>>& F,
           std::vector<MatrixX<Scalar>>& H) {
  if (!theta.A.empty() && theta.q > 0) {
    std::vector<MatrixX<Scalar>*> fs;
    for (auto& f : F) fs.push_back(&f);
    detail::align_block(theta.A, static_cast<MatrixX<Scalar>*>(nullptr),
                        static_cast<MatrixX<Scalar>*>(nullptr), fs);
  }
  for (std::size_t s = 0; s < theta.B.size(); ++s) {
    if (theta.qs.size() > s && theta.qs[s] == 0) continue;
    detail::align_block(theta.B[s], H.size() > s ? &H[s] : nullptr,
                        static_cast<MatrixX<Scalar>*>(nullptr));
  }
}

}  // namespace mmgfm
