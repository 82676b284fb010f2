#include <mmgfm/vem.hpp>

#include <mmgfm/ident.hpp>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>
#include <utility>

namespace mmgfm {

namespace {

using Mat = MatrixX<double>;
using Vec = VectorX<double>;

constexpr int kNewtonMaxSteps = 120;  // cap on guarded Newton steps per cell
constexpr double kNewtonTol = 1e-11;  // gradient tolerance, scaled by the data
constexpr int kMstepCycles = 30;      // inner (coefficients, variances) cycles
constexpr double kMstepTol = 1e-9;    // relative coefficient change to stop
constexpr double kLambdaFloor = 1e-6;

int resolve_threads(const FitConfig& cfg) {
  if (!cfg.parallel) return 1;
  if (cfg.threads > 0) return cfg.threads;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

// Runs f(0..n-1) on up to `threads` workers. Tasks must write to disjoint
// locations; any reduction over task outputs is performed by the caller in
// index order, so results do not depend on the thread count.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        f(i);
      }
    });
  for (auto& th : pool) th.join();
}

std::vector<std::pair<int, int>> study_modality_pairs(const Dataset& ds) {
  std::vector<std::pair<int, int>> out;
  for (int s = 0; s < ds.S(); ++s)
    for (int m = 0; m < ds.M(); ++m) out.emplace_back(s, m);
  return out;
}

// Working response: the observed data for Continuous modalities, the
// posterior mode xi otherwise.
const Mat& umat(const Dataset& ds, const VariationalParams& phi, int s, int m) {
  const auto& mod = ds.studies[s].modalities[m];
  return mod.type == ModalityType::Continuous ? mod.X : phi.Xi[s][m];
}

// E[y] under the posterior: Z beta' + mF A' + oH B' + w + offsets.
Mat predictor(const Dataset& ds, const ModelParams& theta,
              const VariationalParams& phi, int s, int m) {
  const auto& st = ds.studies[s];
  Mat mu = st.Z * theta.beta[m].transpose();
  if (theta.q > 0) mu.noalias() += phi.MF[s] * theta.A[m].transpose();
  if (theta.qs[s] > 0) mu.noalias() += phi.OH[s] * theta.B[s][m].transpose();
  mu.colwise() += phi.WV[s].col(m);
  const auto& mod = st.modalities[m];
  if (mod.offsets.size() > 0) mu.colwise() += mod.offsets;
  return mu;
}

// Residual with every component except the requested one removed.
enum class Keep { F, H, V };
Mat partial_residual(const Dataset& ds, const ModelParams& theta,
                     const VariationalParams& phi, int s, int m, Keep keep) {
  const auto& st = ds.studies[s];
  Mat r = umat(ds, phi, s, m) - st.Z * theta.beta[m].transpose();
  if (keep != Keep::F && theta.q > 0)
    r.noalias() -= phi.MF[s] * theta.A[m].transpose();
  if (keep != Keep::H && theta.qs[s] > 0)
    r.noalias() -= phi.OH[s] * theta.B[s][m].transpose();
  if (keep != Keep::V) r.colwise() -= phi.WV[s].col(m);
  const auto& mod = st.modalities[m];
  if (mod.offsets.size() > 0) r.colwise() -= mod.offsets;
  return r;
}

// Per-variable quadratic forms diag(A Sig A'), length p.
Vec quad_rows(const Mat& A, const Mat& Sig) {
  if (A.cols() == 0) return Vec::Zero(A.rows());
  return ((A * Sig).cwiseProduct(A)).rowwise().sum();
}

// Data-dependent additive constants of the bound (log factorials, binomial
// coefficients); computed once per dataset traversal.
std::vector<std::vector<double>> data_constants(const Dataset& ds) {
  std::vector<std::vector<double>> c(ds.S(), std::vector<double>(ds.M(), 0.0));
  for (int s = 0; s < ds.S(); ++s)
    for (int m = 0; m < ds.M(); ++m) {
      const auto& mod = ds.studies[s].modalities[m];
      double acc = 0.0;
      if (mod.type == ModalityType::Count) {
        for (Eigen::Index i = 0; i < mod.X.rows(); ++i)
          for (Eigen::Index j = 0; j < mod.X.cols(); ++j)
            acc -= std::lgamma(mod.X(i, j) + 1.0);
      } else if (mod.type == ModalityType::Binomial) {
        for (Eigen::Index i = 0; i < mod.X.rows(); ++i)
          for (Eigen::Index j = 0; j < mod.X.cols(); ++j)
            acc += log_choose(mod.trials[j], mod.X(i, j));
      }
      c[s][m] = acc;
    }
  return c;
}

double elbo_impl(const ModelParams& theta, const VariationalParams& phi,
                 const Dataset& ds, const FitConfig& cfg,
                 const std::vector<std::vector<double>>& consts) {
  const auto pairs = study_modality_pairs(ds);
  std::vector<double> partial(pairs.size(), 0.0);
  parallel_for(
      static_cast<int>(pairs.size()), resolve_threads(cfg), [&](int t) {
        const auto [s, m] = pairs[t];
        const auto& mod = ds.studies[s].modalities[m];
        const Eigen::Index n = mod.n();
        const Vec& lam = theta.lambda[s][m];
        const Mat& U = umat(ds, phi, s, m);
        const Mat P = predictor(ds, theta, phi, s, m);
        Vec colquad = (U - P).colwise().squaredNorm().transpose();
        if (mod.type != ModalityType::Continuous)
          colquad += phi.S2y[s][m].colwise().sum().transpose();
        colquad += double(n) * (quad_rows(theta.A[m], phi.SigmaF[s]) +
                                quad_rows(theta.B[s][m], phi.PhiH[s]) +
                                Vec::Constant(mod.p(), phi.varsV(s, m)));
        double acc = -0.5 * (colquad.array() / lam.array()).sum() -
                     0.5 * double(n) *
                         (2.0 * M_PI * lam.array()).log().sum();
        acc += consts[s][m];
        if (mod.type == ModalityType::Count) {
          const auto& Xi = phi.Xi[s][m];
          const auto& S2 = phi.S2y[s][m];
          acc += (mod.X.array() * Xi.array()).sum();
          acc -= (Xi.array() + 0.5 * S2.array())
                     .min(nat_param_bound)
                     .max(-nat_param_bound)
                     .exp()
                     .sum();
        } else if (mod.type == ModalityType::Binomial) {
          const auto& Xi = phi.Xi[s][m];
          const auto& S2 = phi.S2y[s][m];
          acc += (mod.X.array() * Xi.array()).sum();
          for (Eigen::Index j = 0; j < mod.p(); ++j) {
            const double tr = mod.trials[j];
            for (Eigen::Index i = 0; i < n; ++i) {
              const double sg = logistic(Xi(i, j));
              acc -= tr * (log1pexp(Xi(i, j)) +
                           0.5 * S2(i, j) * sg * (1.0 - sg));
            }
          }
        }
        if (mod.type != ModalityType::Continuous)
          acc += 0.5 * ((2.0 * M_PI * phi.S2y[s][m].array()).log().sum() +
                        double(n * mod.p()));
        if (theta.sigma2(s, m) > 0.0) {
          const auto w = phi.WV[s].col(m);
          const double vs = phi.varsV(s, m);
          acc += -(w.squaredNorm() + double(n) * vs) /
                     (2.0 * theta.sigma2(s, m)) +
                 double(n) * (0.5 * std::log(vs / theta.sigma2(s, m)) + 0.5);
        }
        partial[t] = acc;
      });
  double total = 0.0;
  for (const double v : partial) total += v;  // fixed-order reduction
  for (int s = 0; s < ds.S(); ++s) {
    const double n = double(ds.studies[s].n());
    if (theta.q > 0) {
      Eigen::LLT<Mat> llt(phi.SigmaF[s]);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("elbo: shared-factor covariance is not SPD");
      const double logdet =
          2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      total += -0.5 * (phi.MF[s].squaredNorm() + n * phi.SigmaF[s].trace()) +
               0.5 * n * logdet + 0.5 * n * theta.q;
    }
    if (theta.qs[s] > 0) {
      Eigen::LLT<Mat> llt(phi.PhiH[s]);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("elbo: study-factor covariance is not SPD");
      const double logdet =
          2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      total += -0.5 * (phi.OH[s].squaredNorm() + n * phi.PhiH[s].trace()) +
               0.5 * n * logdet + 0.5 * n * theta.qs[s];
    }
  }
  return total;
}

}  // namespace

double elbo(const ModelParams& theta, const VariationalParams& phi,
            const Dataset& ds, const FitConfig& cfg) {
  return elbo_impl(theta, phi, ds, cfg, data_constants(ds));
}

void estep_y(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg) {
  const auto pairs = study_modality_pairs(ds);
  parallel_for(
      static_cast<int>(pairs.size()), resolve_threads(cfg), [&](int t) {
        const auto [s, m] = pairs[t];
        const auto& mod = ds.studies[s].modalities[m];
        if (mod.type == ModalityType::Continuous) return;
        const Mat mu = predictor(ds, theta, phi, s, m);
        Mat& Xi = phi.Xi[s][m];
        Mat& S2 = phi.S2y[s][m];
        for (Eigen::Index j = 0; j < mod.p(); ++j) {
          const double inv_lam = 1.0 / theta.lambda[s][m][j];
          const double tr =
              mod.type == ModalityType::Binomial ? mod.trials[j] : 1.0;
          for (Eigen::Index i = 0; i < mod.n(); ++i) {
            double xi = Xi(i, j);
            const double x = mod.X(i, j);
            // Newton runs to the maximizer of the per-cell integrand; warm
            // starts make one to three steps typical.  The objective gradient
            // is concave decreasing in xi, so the iteration is globally
            // convergent without damping; the clamp keeps exp() finite and
            // the repeat check stops cells pinned at the clamp boundary.
            const double gtol = kNewtonTol * (1.0 + std::abs(x));
            if (mod.type == ModalityType::Count) {
              for (int it = 0; it < kNewtonMaxSteps; ++it) {
                const double e = std::exp(clamp_nat(xi));
                const double g = x - e - (xi - mu(i, j)) * inv_lam;
                if (std::abs(g) <= gtol) break;
                const double h = -e - inv_lam;
                const double next = clamp_nat(xi - g / h);
                if (next == xi) break;
                xi = next;
              }
              S2(i, j) = 1.0 / (std::exp(clamp_nat(xi)) + inv_lam);
            } else {
              for (int it = 0; it < kNewtonMaxSteps; ++it) {
                const double sg = logistic(xi);
                const double g = x - tr * sg - (xi - mu(i, j)) * inv_lam;
                if (std::abs(g) <= gtol) break;
                const double h = -tr * sg * (1.0 - sg) - inv_lam;
                const double next = clamp_nat(xi - g / h);
                if (next == xi) break;
                xi = next;
              }
              const double sg = logistic(xi);
              S2(i, j) = 1.0 / (tr * sg * (1.0 - sg) + inv_lam);
            }
            Xi(i, j) = xi;
          }
        }
      });
}

void estep_f(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg) {
  if (theta.q == 0) return;
  parallel_for(ds.S(), resolve_threads(cfg), [&](int s) {
    const auto& st = ds.studies[s];
    Mat G = Mat::Identity(theta.q, theta.q);
    Mat rhs = Mat::Zero(st.n(), theta.q);
    for (int m = 0; m < ds.M(); ++m) {
      const Mat Ail =
          theta.lambda[s][m].cwiseInverse().asDiagonal() * theta.A[m];
      G.noalias() += theta.A[m].transpose() * Ail;
      rhs.noalias() += partial_residual(ds, theta, phi, s, m, Keep::F) * Ail;
    }
    phi.SigmaF[s] = G.llt().solve(Mat::Identity(theta.q, theta.q));
    phi.MF[s].noalias() = rhs * phi.SigmaF[s];
  });
}

void estep_h(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg) {
  parallel_for(ds.S(), resolve_threads(cfg), [&](int s) {
    const int qs = theta.qs[s];
    if (qs == 0) return;
    const auto& st = ds.studies[s];
    Mat G = Mat::Identity(qs, qs);
    Mat rhs = Mat::Zero(st.n(), qs);
    for (int m = 0; m < ds.M(); ++m) {
      const Mat Bil =
          theta.lambda[s][m].cwiseInverse().asDiagonal() * theta.B[s][m];
      G.noalias() += theta.B[s][m].transpose() * Bil;
      rhs.noalias() += partial_residual(ds, theta, phi, s, m, Keep::H) * Bil;
    }
    phi.PhiH[s] = G.llt().solve(Mat::Identity(qs, qs));
    phi.OH[s].noalias() = rhs * phi.PhiH[s];
  });
}

void estep_v(const ModelParams& theta, VariationalParams& phi,
             const Dataset& ds, const FitConfig& cfg) {
  const auto pairs = study_modality_pairs(ds);
  parallel_for(
      static_cast<int>(pairs.size()), resolve_threads(cfg), [&](int t) {
        const auto [s, m] = pairs[t];
        if (theta.sigma2(s, m) <= 0.0) {
          phi.WV[s].col(m).setZero();
          phi.varsV(s, m) = 0.0;
          return;
        }
        const Vec il = theta.lambda[s][m].cwiseInverse();
        const double vs = 1.0 / (1.0 / theta.sigma2(s, m) + il.sum());
        phi.WV[s].col(m).noalias() =
            vs * (partial_residual(ds, theta, phi, s, m, Keep::V) * il);
        phi.varsV(s, m) = vs;
      });
}

void mstep(ModelParams& theta, const VariationalParams& phi, const Dataset& ds,
           const FitConfig& cfg) {
  const int S = ds.S(), M = ds.M();
  const int d = static_cast<int>(ds.d());
  const int q = theta.q;
  const int threads = resolve_threads(cfg);

  // per-study designs over [Z, mF, oH] and their second moments
  std::vector<Mat> P(S), Gram(S), Gram0(S);
  std::vector<int> off(S);  // study block offset in the joint coefficient
  int Dtot = d + q;
  for (int s = 0; s < S; ++s) {
    off[s] = Dtot;
    Dtot += theta.qs[s];
  }
  for (int s = 0; s < S; ++s) {
    const auto& st = ds.studies[s];
    const int qs = theta.qs[s];
    P[s].resize(st.n(), d + q + qs);
    P[s].leftCols(d) = st.Z;
    if (q > 0) P[s].middleCols(d, q) = phi.MF[s];
    if (qs > 0) P[s].rightCols(qs) = phi.OH[s];
    Gram0[s].noalias() = P[s].transpose() * P[s];
    Gram[s] = Gram0[s];
    if (q > 0)
      Gram[s].block(d, d, q, q) += double(st.n()) * phi.SigmaF[s];
    if (qs > 0)
      Gram[s].block(d + q, d + q, qs, qs) += double(st.n()) * phi.PhiH[s];
  }
  // responses with the modality effect and offsets removed
  std::vector<std::vector<Mat>> T(S, std::vector<Mat>(M));
  std::vector<std::vector<Vec>> u2(S, std::vector<Vec>(M));
  std::vector<std::vector<Vec>> s2sum(S, std::vector<Vec>(M));
  const auto pairs = study_modality_pairs(ds);
  parallel_for(static_cast<int>(pairs.size()), threads, [&](int t) {
    const auto [s, m] = pairs[t];
    const auto& mod = ds.studies[s].modalities[m];
    Mat Ut = umat(ds, phi, s, m);
    Ut.colwise() -= phi.WV[s].col(m);
    if (mod.offsets.size() > 0) Ut.colwise() -= mod.offsets;
    T[s][m].noalias() = P[s].transpose() * Ut;
    u2[s][m] = Ut.colwise().squaredNorm().transpose();
    s2sum[s][m] = mod.type == ModalityType::Continuous
                      ? Vec::Zero(mod.p()).eval()
                      : phi.S2y[s][m].colwise().sum().transpose().eval();
  });

  std::vector<double> delta_m(M), norm_m(M);
  for (int cycle = 0; cycle < kMstepCycles; ++cycle) {
    parallel_for(M, threads, [&](int m) {
      const Eigen::Index p_m = ds.p(m);
      Mat Gj(Dtot, Dtot);
      Vec rj(Dtot);
      double delta = 0.0, norm = 0.0;
      for (Eigen::Index j = 0; j < p_m; ++j) {
        Gj.setZero();
        rj.setZero();
        for (int s = 0; s < S; ++s) {
          const double w = 1.0 / theta.lambda[s][m][j];
          const int qs = theta.qs[s];
          Gj.topLeftCorner(d + q, d + q) +=
              w * Gram[s].topLeftCorner(d + q, d + q);
          rj.head(d + q) += w * T[s][m].col(j).head(d + q);
          if (qs > 0) {
            Gj.block(0, off[s], d + q, qs) +=
                w * Gram[s].topRightCorner(d + q, qs);
            Gj.block(off[s], 0, qs, d + q) +=
                w * Gram[s].bottomLeftCorner(qs, d + q);
            Gj.block(off[s], off[s], qs, qs) +=
                w * Gram[s].bottomRightCorner(qs, qs);
            rj.segment(off[s], qs) += w * T[s][m].col(j).tail(qs);
          }
        }
        const Vec c = Gj.ldlt().solve(rj);
        auto track = [&](double oldv, double newv) {
          delta += (newv - oldv) * (newv - oldv);
          norm += oldv * oldv;
        };
        for (int k = 0; k < d; ++k) {
          track(theta.beta[m](j, k), c[k]);
          theta.beta[m](j, k) = c[k];
        }
        for (int k = 0; k < q; ++k) {
          track(theta.A[m](j, k), c[d + k]);
          theta.A[m](j, k) = c[d + k];
        }
        for (int s = 0; s < S; ++s)
          for (int k = 0; k < theta.qs[s]; ++k) {
            track(theta.B[s][m](j, k), c[off[s] + k]);
            theta.B[s][m](j, k) = c[off[s] + k];
          }
      }
      delta_m[m] = delta;
      norm_m[m] = norm;
    });
    double delta = 0.0, norm = 0.0;
    for (int m = 0; m < M; ++m) {
      delta += delta_m[m];
      norm += norm_m[m];
    }

    parallel_for(static_cast<int>(pairs.size()), threads, [&](int t) {
      const auto [s, m] = pairs[t];
      const double n = double(ds.studies[s].n());
      const int qs = theta.qs[s];
      const Vec aSa = quad_rows(theta.A[m], phi.SigmaF[s]);
      const Vec bPb = quad_rows(theta.B[s][m], phi.PhiH[s]);
      Vec cj(d + q + qs);
      for (Eigen::Index j = 0; j < ds.p(m); ++j) {
        cj.head(d) = theta.beta[m].row(j);
        if (q > 0) cj.segment(d, q) = theta.A[m].row(j);
        if (qs > 0) cj.tail(qs) = theta.B[s][m].row(j);
        const double quad = std::max(
            u2[s][m][j] - 2.0 * cj.dot(T[s][m].col(j)) +
                cj.dot(Gram0[s] * cj),
            0.0);
        theta.lambda[s][m][j] =
            std::max((quad + s2sum[s][m][j]) / n + aSa[j] + bPb[j] +
                         phi.varsV(s, m),
                     kLambdaFloor);
      }
    });
    if (norm > 0.0 && delta / norm < kMstepTol * kMstepTol) break;
  }

  for (int s = 0; s < S; ++s)
    for (int m = 0; m < M; ++m)
      if (theta.sigma2(s, m) > 0.0)
        theta.sigma2(s, m) =
            phi.WV[s].col(m).squaredNorm() / double(ds.studies[s].n()) +
            phi.varsV(s, m);
}

void init_params(const Dataset& ds, const FitConfig& cfg, ModelParams& theta,
                 VariationalParams& phi) {
  const int S = ds.S(), M = ds.M();
  const int d = static_cast<int>(ds.d());
  const int q = cfg.q;
  if (static_cast<int>(cfg.qs.size()) != S)
    throw std::invalid_argument("init: qs must have one entry per study");
  Eigen::Index N = 0, Ptot = 0;
  for (int s = 0; s < S; ++s) N += ds.studies[s].n();
  for (int m = 0; m < M; ++m) Ptot += ds.p(m);
  if (q < 0 || q > std::min(N, Ptot))
    throw std::invalid_argument("init: invalid shared factor count");

  theta = ModelParams{};
  phi = VariationalParams{};
  theta.q = q;
  theta.qs = cfg.qs;

  // link-scale data
  std::vector<std::vector<Mat>> L(S, std::vector<Mat>(M));
  for (int s = 0; s < S; ++s)
    for (int m = 0; m < M; ++m) {
      const auto& mod = ds.studies[s].modalities[m];
      switch (mod.type) {
        case ModalityType::Continuous:
          L[s][m] = mod.X;
          break;
        case ModalityType::Count:
          L[s][m] = mod.X.array().log1p();
          break;
        case ModalityType::Binomial:
          L[s][m].resize(mod.n(), mod.p());
          for (Eigen::Index j = 0; j < mod.p(); ++j)
            L[s][m].col(j) = ((mod.X.col(j).array() + 0.5) /
                              (mod.trials[j] - mod.X.col(j).array() + 0.5))
                                 .log()
                                 .matrix();
          break;
      }
      if (mod.offsets.size() > 0) L[s][m].colwise() -= mod.offsets;
    }

  // pooled least squares per modality
  Mat Zall(N, d);
  {
    Eigen::Index at = 0;
    for (int s = 0; s < S; ++s) {
      Zall.middleRows(at, ds.studies[s].n()) = ds.studies[s].Z;
      at += ds.studies[s].n();
    }
  }
  const Mat Gz = Zall.transpose() * Zall;
  Eigen::LDLT<Mat> zldlt(Gz);
  theta.beta.resize(M);
  Mat R(N, Ptot);
  {
    Eigen::Index col = 0;
    for (int m = 0; m < M; ++m) {
      Mat Lm(N, ds.p(m));
      Eigen::Index at = 0;
      for (int s = 0; s < S; ++s) {
        Lm.middleRows(at, ds.studies[s].n()) = L[s][m];
        at += ds.studies[s].n();
      }
      theta.beta[m] = zldlt.solve(Zall.transpose() * Lm).transpose();
      R.middleCols(col, ds.p(m)) = Lm - Zall * theta.beta[m].transpose();
      col += ds.p(m);
    }
  }
  R.rowwise() -= R.colwise().mean();

  // pooled residual SVD: shared loadings and factor means
  Mat Astack = Mat::Zero(Ptot, q);
  std::vector<Mat> MFs(S);
  if (q > 0) {
    Eigen::BDCSVD<Mat> svd(R, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Astack = svd.matrixV().leftCols(q) *
             (svd.singularValues().head(q) / std::sqrt(double(N))).asDiagonal();
    const Mat MFall = svd.matrixU().leftCols(q) * std::sqrt(double(N));
    Eigen::Index at = 0;
    for (int s = 0; s < S; ++s) {
      MFs[s] = MFall.middleRows(at, ds.studies[s].n());
      at += ds.studies[s].n();
    }
  } else {
    for (int s = 0; s < S; ++s) MFs[s] = Mat::Zero(ds.studies[s].n(), 0);
  }
  theta.A.resize(M);
  {
    Eigen::Index colat = 0;
    for (int m = 0; m < M; ++m) {
      theta.A[m] = Astack.middleRows(colat, ds.p(m));
      colat += ds.p(m);
    }
  }
  phi.MF = MFs;

  // per-study: modality-mean residuals seed the v effects so the study
  // factors do not absorb the modality-shared component, then SVD for (B, h)
  theta.B.assign(S, std::vector<Mat>(M));
  theta.lambda.assign(S, std::vector<Vec>(M));
  phi.OH.resize(S);
  phi.WV.resize(S);
  Eigen::Index rowat = 0;
  for (int s = 0; s < S; ++s) {
    const Eigen::Index n = ds.studies[s].n();
    const int qs = theta.qs[s];
    if (qs < 0 || qs > std::min(n, Ptot))
      throw std::invalid_argument("init: invalid study factor count");
    Mat Rs = R.middleRows(rowat, n);
    rowat += n;
    if (q > 0) Rs.noalias() -= phi.MF[s] * Astack.transpose();
    phi.WV[s].resize(n, M);
    {
      Eigen::Index colat = 0;
      for (int m = 0; m < M; ++m) {
        phi.WV[s].col(m) =
            Rs.middleCols(colat, ds.p(m)).rowwise().mean();
        Rs.middleCols(colat, ds.p(m)).colwise() -= phi.WV[s].col(m);
        colat += ds.p(m);
      }
    }
    Mat Bstack = Mat::Zero(Ptot, qs);
    if (qs > 0) {
      Eigen::BDCSVD<Mat> svd(Rs, Eigen::ComputeThinU | Eigen::ComputeThinV);
      Bstack = svd.matrixV().leftCols(qs) *
               (svd.singularValues().head(qs) / std::sqrt(double(n)))
                   .asDiagonal();
      phi.OH[s] = svd.matrixU().leftCols(qs) * std::sqrt(double(n));
      Rs.noalias() -= phi.OH[s] * Bstack.transpose();
    } else {
      phi.OH[s] = Mat::Zero(n, 0);
    }
    Vec lamstack = (Rs.rowwise() - Rs.colwise().mean())
                       .colwise()
                       .squaredNorm()
                       .transpose() /
                   double(n);
    lamstack = lamstack.cwiseMax(1e-4);
    Eigen::Index colat = 0;
    for (int m = 0; m < M; ++m) {
      theta.B[s][m] = Bstack.middleRows(colat, ds.p(m));
      theta.lambda[s][m] = lamstack.segment(colat, ds.p(m));
      colat += ds.p(m);
    }
  }

  theta.sigma2 = Mat::Constant(S, M, 1e-2);
  phi.varsV = Mat::Constant(S, M, 1e-2);
  phi.Xi.assign(S, std::vector<Mat>(M));
  phi.S2y.assign(S, std::vector<Mat>(M));
  for (int s = 0; s < S; ++s)
    for (int m = 0; m < M; ++m)
      if (ds.type(m) != ModalityType::Continuous) {
        phi.Xi[s][m] = L[s][m];
        if (ds.studies[s].modalities[m].offsets.size() > 0)
          phi.Xi[s][m].colwise() +=
              ds.studies[s].modalities[m].offsets;  // xi approximates y itself
        phi.S2y[s][m] = Mat::Ones(ds.studies[s].n(), ds.p(m));
      }
  phi.SigmaF.assign(S, Mat::Identity(q, q));
  phi.PhiH.resize(S);
  for (int s = 0; s < S; ++s)
    phi.PhiH[s] = Mat::Identity(theta.qs[s], theta.qs[s]);
}

FitResult fit(const Dataset& ds, const FitConfig& cfg) {
  FitResult res;
  init_params(ds, cfg, res.theta, res.phi);
  const auto consts = data_constants(ds);
  double prev = 0.0;
  for (int it = 0; it < cfg.max_iters; ++it) {
    estep_y(res.theta, res.phi, ds, cfg);
    estep_f(res.theta, res.phi, ds, cfg);
    estep_h(res.theta, res.phi, ds, cfg);
    estep_v(res.theta, res.phi, ds, cfg);
    mstep(res.theta, res.phi, ds, cfg);
    const double e = elbo_impl(res.theta, res.phi, ds, cfg, consts);
    res.elbo_trace.push_back(e);
    if (it > 0 && std::abs(e - prev) < cfg.rel_tol * std::abs(prev)) {
      res.converged = true;
      break;
    }
    prev = e;
  }
  res.iterations = static_cast<int>(res.elbo_trace.size());
  align(res.theta, res.phi);
  return res;
}

FactorEstimates extract_factors(const VariationalParams& phi,
                                const FitConfig&) {
  return FactorEstimates{phi.MF, phi.OH, phi.WV};
}

}  // namespace mmgfm
