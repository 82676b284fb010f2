#pragma once

// Step-wise singular-value-ratio selection of the shared factor count q and
// the study-specific counts q_s: fit once at the upper bounds, read q off the
// singular value ratios of the shared loadings, refit at the selected q, then
// read each q_s off the study loadings.

#include <mmgfm/types.hpp>
#include <mmgfm/vem.hpp>

#include <vector>

namespace mmgfm {

struct SelectionResult {
  int q_hat = 0;
  std::vector<int> qs_hat;        // one per study
  std::vector<int> per_modality_q;  // svr verdict per shared loading block
  // ratio_A(m, k-1) = theta_k / theta_{k+1} for the m-th shared loading;
  // ratio_B[s](m, k-1) likewise for the study-s loadings.
  MatrixX<double> ratio_A;
  std::vector<MatrixX<double>> ratio_B;
};

// argmax_{1 <= k <= kmax-1} of theta_k / theta_{k+1} over the singular values
// of L (descending); ties break to the smallest k, and ratios whose
// denominator falls below 1e-12 * theta_1 count as +infinity (the smallest
// such k wins). Throws std::invalid_argument if kmax < 2 or L is smaller than
// kmax in either dimension.
int svr(const MatrixX<double>& L, int kmax);

// Combination of per-modality verdicts: the maximum when all votes are
// distinct, otherwise the most frequent vote with ties broken toward the
// larger value. votes must be non-empty.
int combine_votes(const std::vector<int>& votes);

// Defaults when the caller has no better bounds (sized to the magnitudes the
// selection is expected to encounter in practice).
inline constexpr int default_q_max = 15;
inline constexpr int default_qs_max = 6;

// Two-step selection. cfg supplies the solver settings; its q/qs fields are
// overridden by the step bounds. Requires q_max >= 2 and qs_max >= 2.
SelectionResult select_factors(const Dataset& ds, int q_max, int qs_max,
                               const FitConfig& cfg);

}  // namespace mmgfm
