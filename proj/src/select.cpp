#include <mmgfm/select.hpp>

#include <Eigen/SVD>

#include <limits>
#include <stdexcept>

namespace mmgfm {

namespace {

using Mat = MatrixX<double>;
using Vec = VectorX<double>;

// Ratios theta_k / theta_{k+1}, k = 1..kmax-1, with the near-zero guard.
Vec sv_ratios(const Mat& L, int kmax) {
  if (kmax < 2) throw std::invalid_argument("svr: kmax must be at least 2");
  if (L.rows() < kmax || L.cols() < kmax)
    throw std::invalid_argument(
        "svr: matrix must have at least kmax rows and columns");
  const Vec sv = Eigen::JacobiSVD<Mat>(L).singularValues();
  const double guard = 1e-12 * sv[0];
  Vec ratios(kmax - 1);
  for (int k = 1; k < kmax; ++k)
    ratios[k - 1] = sv[k] < guard
                        ? std::numeric_limits<double>::infinity()
                        : sv[k - 1] / sv[k];
  return ratios;
}

int argmax_ratio(const Vec& ratios) {
  int best = 1;
  double bestv = -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= ratios.size(); ++k)
    if (ratios[k - 1] > bestv) {  // strict: ties keep the smallest k
      bestv = ratios[k - 1];
      best = k;
    }
  return best;
}

}  // namespace

int svr(const Mat& L, int kmax) { return argmax_ratio(sv_ratios(L, kmax)); }

// Both clauses of the documented rule equal the lexicographic maximum of
// (frequency, value): all-distinct means every frequency is 1, so the larger
// value wins, which is the maximum.
int combine_votes(const std::vector<int>& votes) {
  if (votes.empty())
    throw std::invalid_argument("combine_votes: no votes given");
  int best = votes.front(), bestc = 0;
  for (const int v : votes) {
    int c = 0;
    for (const int u : votes) c += (u == v);
    if (c > bestc || (c == bestc && v > best)) {
      best = v;
      bestc = c;
    }
  }
  return best;
}

SelectionResult select_factors(const Dataset& ds, int q_max, int qs_max,
                               const FitConfig& cfg) {
  if (q_max < 2 || qs_max < 2)
    throw std::invalid_argument(
        "select_factors: q_max and qs_max must be at least 2");
  const int S = ds.S(), M = ds.M();
  SelectionResult out;

  FitConfig step = cfg;
  step.q = q_max;
  step.qs.assign(S, qs_max);
  const FitResult first = fit(ds, step);
  out.per_modality_q.resize(M);
  out.ratio_A.resize(M, q_max - 1);
  for (int m = 0; m < M; ++m) {
    const Vec r = sv_ratios(first.theta.A[m], q_max);
    out.ratio_A.row(m) = r.transpose();
    out.per_modality_q[m] = argmax_ratio(r);
  }
  out.q_hat = combine_votes(out.per_modality_q);

  step.q = out.q_hat;
  const FitResult second = fit(ds, step);
  out.qs_hat.resize(S);
  out.ratio_B.resize(S);
  for (int s = 0; s < S; ++s) {
    out.ratio_B[s].resize(M, qs_max - 1);
    std::vector<int> votes(M);
    for (int m = 0; m < M; ++m) {
      const Vec r = sv_ratios(second.theta.B[s][m], qs_max);
      out.ratio_B[s].row(m) = r.transpose();
      votes[m] = argmax_ratio(r);
    }
    out.qs_hat[s] = combine_votes(votes);
  }
  return out;
}

}  // namespace mmgfm
