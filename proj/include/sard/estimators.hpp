#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#if defined(SARD_HAVE_LAPACKE)
#include <lapacke.h>
#endif

#include "common.hpp"
#include "design.hpp"
#include "geometry.hpp"

namespace sard {

enum class FitMethod { ols_naive, ols, iv, ml };

inline const char* method_name(FitMethod m) {
  switch (m) {
    case FitMethod::ols_naive: return "OLS-NAIVE";
    case FitMethod::ols: return "OLS";
    case FitMethod::iv: return "IV";
    case FitMethod::ml: return "ML";
  }
  return "?";
}

struct SardFit {
  FitMethod method = FitMethod::ols;
  bool has_S = false;
  TildeCoefficients coef;
  double lambda = 0.0;
  double sigma2 = 0.0;
  double loglik = 0.0;
  int k = 0;  // estimated parameters including sigma2 (and lambda when free)
  int n = 0;

  Eigen::VectorXd beta;  // stacked coefficients, order given by names
  std::vector<std::string> names;
  Eigen::MatrixXd cov;        // classical covariance of beta
  Eigen::VectorXd se;         // classical standard errors
  Eigen::VectorXd se_robust;  // heteroskedasticity-robust, OLS and IV only
  Eigen::VectorXd residuals;  // dy minus fitted systematic part

  Eigen::VectorXd first_stage_F;  // IV only, one per endogenous regressor
  bool weak_instruments = false;

  bool converged = true;  // ML outer optimizer status
  int iterations = 0;
  std::vector<double> ml_trace;  // best log-likelihood so far per evaluation
};

namespace detail {

struct LsResult {
  Eigen::VectorXd beta;
  Eigen::MatrixXd xtx_inv;
  Eigen::VectorXd resid;
  double ssr = 0.0;
};

// column-scaled QR solve with explicit rank check
inline LsResult least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const int p = static_cast<int>(X.cols());
  Eigen::VectorXd norms(p);
  for (int j = 0; j < p; ++j) norms[j] = std::max(X.col(j).norm(), 1e-300);
  const Eigen::MatrixXd Xn = X * norms.cwiseInverse().asDiagonal();

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xn);
  qr.setThreshold(1e-10);
  if (qr.rank() < p)
    throw RankDeficient("least squares: design matrix is rank deficient");

  LsResult r;
  const Eigen::VectorXd bn = qr.solve(y);
  r.beta = bn.cwiseQuotient(norms);
  r.resid = y - X * r.beta;
  r.ssr = r.resid.squaredNorm();

  const Eigen::MatrixXd inv_n =
      (Xn.transpose() * Xn).ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  r.xtx_inv = norms.cwiseInverse().asDiagonal() * inv_n *
              norms.cwiseInverse().asDiagonal();
  return r;
}

inline Eigen::MatrixXd hc1_cov(const Eigen::MatrixXd& X,
                               const Eigen::MatrixXd& xtx_inv,
                               const Eigen::VectorXd& resid) {
  const int n = static_cast<int>(X.rows()), p = static_cast<int>(X.cols());
  const Eigen::MatrixXd meat =
      X.transpose() * resid.array().square().matrix().asDiagonal() * X;
  return (static_cast<double>(n) / (n - p)) * xtx_inv * meat * xtx_inv;
}

inline double gaussian_loglik(double ssr, int n) {
  return -0.5 * n * (std::log(2.0 * M_PI * ssr / n) + 1.0);
}

inline Eigen::MatrixXd exog_block(const SardDesign& d) {
  const int n = d.size();
  Eigen::MatrixXd X(n, d.has_S ? 6 : 5);
  int c = 0;
  X.col(c++).setOnes();
  X.col(c++) = d.y;
  if (d.has_S) X.col(c++) = d.x_S;
  X.col(c++) = d.x_A;
  X.col(c++) = d.x_R;
  X.col(c++) = d.x_D;
  return X;
}

inline std::vector<const CorrectionMatrix*> active_corrections(const SardDesign& d) {
  std::vector<const CorrectionMatrix*> v;
  if (d.has_S) v.push_back(&d.M_S);
  v.push_back(&d.M_A);
  v.push_back(&d.M_R);
  v.push_back(&d.M_D);
  return v;
}

inline std::vector<std::string> coef_names(bool has_S, bool with_corrections) {
  std::vector<std::string> n{"alpha", "phi"};
  if (has_S) n.push_back("gamma_S");
  n.insert(n.end(), {"gamma_A", "gamma_R", "gamma_D"});
  if (with_corrections) {
    if (has_S) n.push_back("rho_S");
    n.insert(n.end(), {"rho_A", "rho_R", "rho_D"});
  }
  return n;
}

inline void map_coefficients(SardFit& f) {
  for (std::size_t i = 0; i < f.names.size(); ++i) {
    const double v = f.beta[static_cast<Eigen::Index>(i)];
    const std::string& nm = f.names[i];
    if (nm == "alpha") f.coef.alpha = v;
    else if (nm == "phi") f.coef.phi = v;
    else if (nm == "gamma_S") f.coef.gamma_S = v;
    else if (nm == "gamma_A") f.coef.gamma_A = v;
    else if (nm == "gamma_R") f.coef.gamma_R = v;
    else if (nm == "gamma_D") f.coef.gamma_D = v;
    else if (nm == "rho_S") f.coef.rho_S = v;
    else if (nm == "rho_A") f.coef.rho_A = v;
    else if (nm == "rho_R") f.coef.rho_R = v;
    else if (nm == "rho_D") f.coef.rho_D = v;
  }
}

// log |det A| through an in-place LU; -inf when singular
inline double log_abs_det_inplace(Eigen::MatrixXd& A) {
  const int n = static_cast<int>(A.rows());
#if defined(SARD_HAVE_LAPACKE)
  std::vector<lapack_int> piv(n);
  const lapack_int info =
      LAPACKE_dgetrf(LAPACK_COL_MAJOR, n, n, A.data(), n, piv.data());
  if (info != 0) return -std::numeric_limits<double>::infinity();
#else
  Eigen::PartialPivLU<Eigen::Ref<Eigen::MatrixXd>> lu(A);
#endif
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = std::abs(A(i, i));
    if (!(d > 0.0)) return -std::numeric_limits<double>::infinity();
    s += std::log(d);
  }
  return s;
}

}  // namespace detail

inline SardFit fit_ols(const SardDesign& d, bool naive = false) {
  const int n = d.size();
  const Eigen::MatrixXd X = detail::exog_block(d);
  Eigen::MatrixXd W;
  if (naive) {
    W = X;
  } else {
    const auto ms = detail::active_corrections(d);
    W.resize(n, X.cols() + static_cast<Eigen::Index>(ms.size()));
    W.leftCols(X.cols()) = X;
    for (std::size_t j = 0; j < ms.size(); ++j)
      W.col(X.cols() + static_cast<Eigen::Index>(j)) = ms[j]->apply(d.dy);
  }

  const auto ls = detail::least_squares(W, d.dy);
  const int p = static_cast<int>(W.cols());

  SardFit f;
  f.method = naive ? FitMethod::ols_naive : FitMethod::ols;
  f.has_S = d.has_S;
  f.n = n;
  f.k = p + 1;
  f.beta = ls.beta;
  f.names = detail::coef_names(d.has_S, !naive);
  f.residuals = ls.resid;
  f.sigma2 = ls.ssr / (n - p);
  f.cov = f.sigma2 * ls.xtx_inv;
  f.se = f.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  f.se_robust =
      detail::hc1_cov(W, ls.xtx_inv, ls.resid).diagonal().cwiseMax(0.0).cwiseSqrt();
  f.loglik = detail::gaussian_loglik(ls.ssr, n);
  detail::map_coefficients(f);
  return f;
}

namespace detail {

struct TwoStageResult {
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov_classical, cov_robust;
  Eigen::VectorXd resid;
  double ssr = 0.0;
  Eigen::VectorXd first_F;
  int z_rank = 0;
};

// 2SLS of y on [X C] with instrument set Z (X is included exogenous, C the
// instrumented block); first-stage F statistics test the excluded instruments
inline TwoStageResult two_stage(const Eigen::MatrixXd& X, const Eigen::MatrixXd& C,
                                const Eigen::MatrixXd& Z, const Eigen::VectorXd& y) {
  const int n = static_cast<int>(y.size());
  const int px = static_cast<int>(X.cols()), pc = static_cast<int>(C.cols());
  const int p = px + pc;

  Eigen::MatrixXd W(n, p);
  W.leftCols(px) = X;
  W.rightCols(pc) = C;

  // orthonormal basis of the instrument span
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> zqr(Z);
  zqr.setThreshold(1e-10);
  const int zr = static_cast<int>(zqr.rank());
  if (zr < p)
    throw RankDeficient("two_stage: instrument span smaller than regressor count");
  Eigen::MatrixXd Q = zqr.householderQ() * Eigen::MatrixXd::Identity(n, zr);
  auto project = [&](const Eigen::MatrixXd& m) -> Eigen::MatrixXd {
    return Q * (Q.transpose() * m);
  };

  const Eigen::MatrixXd What = project(W);
  const auto ls = least_squares(What, y);

  TwoStageResult r;
  r.z_rank = zr;
  r.beta = ls.beta;
  r.resid = y - W * r.beta;
  r.ssr = r.resid.squaredNorm();
  const double sigma2 = r.ssr / (n - p);
  r.cov_classical = sigma2 * ls.xtx_inv;
  r.cov_robust = hc1_cov(What, ls.xtx_inv, r.resid);

  // first stage: each endogenous column on all instruments vs X alone
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> xqr(X);
  xqr.setThreshold(1e-10);
  const int xr = static_cast<int>(xqr.rank());
  Eigen::MatrixXd Qx = xqr.householderQ() * Eigen::MatrixXd::Identity(n, xr);
  const int m = zr - xr;
  r.first_F.resize(pc);
  for (int j = 0; j < pc; ++j) {
    const Eigen::VectorXd cj = C.col(j);
    const double ssr_full = (cj - Q * (Q.transpose() * cj)).squaredNorm();
    const double ssr_restr = (cj - Qx * (Qx.transpose() * cj)).squaredNorm();
    r.first_F[j] = ((ssr_restr - ssr_full) / std::max(m, 1)) /
                   std::max(ssr_full / (n - zr), 1e-300);
  }
  return r;
}

}  // namespace detail

inline SardFit fit_iv(const SardDesign& d) {
  const int n = d.size();
  const Eigen::MatrixXd X = detail::exog_block(d);
  const auto ms = detail::active_corrections(d);
  const int pc = static_cast<int>(ms.size());

  Eigen::MatrixXd C(n, pc);
  for (int j = 0; j < pc; ++j) C.col(j) = ms[j]->apply(d.dy);

  // instruments: the exogenous block and its squared-correction images
  Eigen::MatrixXd Z(n, X.cols() * (1 + pc));
  Z.leftCols(X.cols()) = X;
  for (int j = 0; j < pc; ++j)
    for (int c = 0; c < X.cols(); ++c)
      Z.col(X.cols() * (1 + j) + c) = ms[j]->apply(ms[j]->apply(X.col(c)));

  const auto ts = detail::two_stage(X, C, Z, d.dy);
  const int p = static_cast<int>(X.cols()) + pc;

  SardFit f;
  f.method = FitMethod::iv;
  f.has_S = d.has_S;
  f.n = n;
  f.k = p + 1;
  f.beta = ts.beta;
  f.names = detail::coef_names(d.has_S, true);
  f.residuals = ts.resid;
  f.sigma2 = ts.ssr / (n - p);
  f.cov = ts.cov_classical;
  f.se = f.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  f.se_robust = ts.cov_robust.diagonal().cwiseMax(0.0).cwiseSqrt();
  f.loglik = detail::gaussian_loglik(ts.ssr, n);
  f.first_stage_F = ts.first_F;
  f.weak_instruments = ts.first_F.minCoeff() < 10.0;
  detail::map_coefficients(f);
  return f;
}

struct ErrorWeights {
  Eigen::SparseMatrix<double> W;  // symmetric, zero diagonal
  Eigen::VectorXd ell;            // ring coefficients, orders 1..Q
  Eigen::VectorXd se;
  Eigen::VectorXd tstat;
  int Q_hat = 0;
};

// Residual spatial-dependence weights: regress the residual on its exclusive
// contiguity-ring images (no intercept) and keep the contiguous prefix of
// orders significant at the 5% level.
inline ErrorWeights estimate_error_weights(const Eigen::VectorXd& resid,
                                           const ContiguityStructure& contig,
                                           int Q) {
  const int n = static_cast<int>(resid.size());
  if (Q < 1) throw OutOfRange("estimate_error_weights: Q must be at least 1");
  if (Q > contig.max_order)
    throw OutOfRange("estimate_error_weights: Q exceeds available contiguity orders");
  if (static_cast<int>(contig.reach.size()) != n)
    throw DimensionMismatch("estimate_error_weights: residual/contiguity size mismatch");

  std::vector<Eigen::SparseMatrix<double>> bands;
  Eigen::MatrixXd Xr(n, Q);
  for (int q = 1; q <= Q; ++q) {
    bands.push_back(contig.band_matrix(q));
    if (bands.back().nonZeros() == 0)
      throw RankDeficient("estimate_error_weights: empty contiguity band");
    Xr.col(q - 1) = bands.back() * resid;
  }

  const auto ls = detail::least_squares(Xr, resid);
  const double sigma2 = ls.ssr / std::max(n - Q, 1);

  ErrorWeights w;
  w.ell = ls.beta;
  w.se = (sigma2 * ls.xtx_inv).diagonal().cwiseMax(0.0).cwiseSqrt();
  w.tstat = w.ell.cwiseQuotient(w.se.cwiseMax(1e-300));

  const double crit = 1.959963984540054;
  while (w.Q_hat < Q && std::abs(w.tstat[w.Q_hat]) >= crit) ++w.Q_hat;

  Eigen::SparseMatrix<double> acc(n, n);
  for (int q = 0; q < w.Q_hat; ++q)
    acc = acc + Eigen::SparseMatrix<double>(w.ell[q] * bands[q]);
  w.W = acc;
  return w;
}

struct MlOptions {
  std::optional<double> fixed_lambda;
  bool fix_rho_zero = false;
  int max_evals = 600;
  double ftol = 1e-9;
  std::optional<Eigen::VectorXd> start_rho;  // one entry per active channel
};

namespace detail {

// standard Nelder-Mead minimization with best-so-far tracking
inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x0,
                                   const Eigen::VectorXd& step, int max_evals,
                                   double ftol, int* evals_out, bool* converged,
                                   std::vector<double>* best_trace) {
  const int p = static_cast<int>(x0.size());
  int evals = 0;
  double best = std::numeric_limits<double>::infinity();
  auto eval = [&](const Eigen::VectorXd& x) {
    const double v = f(x);
    ++evals;
    best = std::min(best, v);
    if (best_trace) best_trace->push_back(-best);
    return v;
  };

  std::vector<Eigen::VectorXd> xs(p + 1, x0);
  Eigen::VectorXd fs(p + 1);
  for (int i = 1; i <= p; ++i) xs[i][i - 1] += step[i - 1];
  for (int i = 0; i <= p; ++i) fs[i] = eval(xs[i]);

  bool conv = false;
  std::vector<int> ord(p + 1);
  while (evals < max_evals) {
    for (int i = 0; i <= p; ++i) ord[i] = i;
    std::sort(ord.begin(), ord.end(), [&](int a, int b) { return fs[a] < fs[b]; });
    const int lo = ord[0], hi = ord[p], nhi = ord[p - 1];
    if (std::isfinite(fs[hi]) &&
        fs[hi] - fs[lo] <= ftol * (std::abs(fs[lo]) + 1e-12)) {
      conv = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(p);
    for (int i = 0; i <= p; ++i)
      if (i != hi) centroid += xs[i];
    centroid /= p;

    const Eigen::VectorXd xr = centroid + (centroid - xs[hi]);
    const double fr = eval(xr);
    if (fr < fs[lo]) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs[hi]);
      const double fe = eval(xe);
      if (fe < fr) {
        xs[hi] = xe;
        fs[hi] = fe;
      } else {
        xs[hi] = xr;
        fs[hi] = fr;
      }
    } else if (fr < fs[nhi]) {
      xs[hi] = xr;
      fs[hi] = fr;
    } else {
      const Eigen::VectorXd xc = centroid + 0.5 * (xs[hi] - centroid);
      const double fc = eval(xc);
      if (fc < fs[hi]) {
        xs[hi] = xc;
        fs[hi] = fc;
      } else {
        for (int i = 0; i <= p; ++i) {
          if (i == lo) continue;
          xs[i] = xs[lo] + 0.5 * (xs[i] - xs[lo]);
          fs[i] = eval(xs[i]);
          if (evals >= max_evals) break;
        }
      }
    }
  }

  int lo = 0;
  for (int i = 1; i <= p; ++i)
    if (fs[i] < fs[lo]) lo = i;
  if (evals_out) *evals_out = evals;
  if (converged) *converged = conv;
  return xs[lo];
}

}  // namespace detail

// Maximum likelihood under the reduced form: filtering the observed change by
// the correction channels and the residual by the spatial error weights, with
// the coefficient block and the noise variance concentrated out analytically.
inline SardFit fit_ml(const SardDesign& d, const ErrorWeights* ew = nullptr,
                      const MlOptions& opt = {}) {
  const int n = d.size();
  const Eigen::MatrixXd X = detail::exog_block(d);
  const int px = static_cast<int>(X.cols());
  const auto ms = detail::active_corrections(d);
  const int pc = static_cast<int>(ms.size());
  for (const auto* m : ms)
    if (!m->dense)
      throw OutOfRange("fit_ml: problem too large for dense likelihood evaluation");

  std::vector<Eigen::VectorXd> mdy(pc);
  for (int j = 0; j < pc; ++j) mdy[j] = ms[j]->apply(d.dy);

  const bool have_weps = ew != nullptr && ew->W.nonZeros() > 0;
  Eigen::VectorXd mu;
  double lam_lo = 0.0, lam_hi = 0.0;
  if (have_weps) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(ew->W),
                                                       Eigen::EigenvaluesOnly);
    mu = eig.eigenvalues();
    const double mu_min = mu.minCoeff(), mu_max = mu.maxCoeff();
    if (!(mu_min < 0.0 && mu_max > 0.0))
      throw LambdaOutOfRange("fit_ml: error-weight spectrum does not bracket zero");
    lam_lo = 1.0 / mu_min;
    lam_hi = 1.0 / mu_max;
  }

  bool lambda_free = have_weps && !opt.fixed_lambda.has_value();
  double lambda_fixed = 0.0;
  if (opt.fixed_lambda) {
    lambda_fixed = *opt.fixed_lambda;
    if (lambda_fixed != 0.0 && !have_weps)
      throw LambdaOutOfRange("fit_ml: nonzero lambda without error weights");
    if (have_weps && (lambda_fixed <= lam_lo || lambda_fixed >= lam_hi))
      throw LambdaOutOfRange("fit_ml: fixed lambda outside the admissible interval");
  }

  const int n_rho = opt.fix_rho_zero ? 0 : pc;
  const int dim = n_rho + (lambda_free ? 1 : 0);

  const double inf = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd Pbuf(n, n);
  Eigen::VectorXd beta_out;
  double sigma2_out = 0.0, loglik_out = -inf;

  auto eval = [&](const Eigen::VectorXd& th, bool keep) -> double {
    Eigen::VectorXd rho = Eigen::VectorXd::Zero(pc);
    for (int j = 0; j < n_rho; ++j) rho[j] = th[j];
    const double lambda = lambda_free ? th[n_rho] : lambda_fixed;
    if (have_weps && (lambda <= lam_lo + 1e-10 || lambda >= lam_hi - 1e-10))
      return inf;

    Eigen::VectorXd u = d.dy;
    for (int j = 0; j < pc; ++j)
      if (rho[j] != 0.0) u -= rho[j] * mdy[j];

    double logdetP = 0.0;
    if (rho.cwiseAbs().maxCoeff() > 0.0) {
      Pbuf.setIdentity();
      for (int j = 0; j < pc; ++j)
        if (rho[j] != 0.0) ms[j]->add_scaled(Pbuf, -rho[j]);
      logdetP = detail::log_abs_det_inplace(Pbuf);
      if (!std::isfinite(logdetP)) return inf;
    }

    Eigen::VectorXd yt = u;
    Eigen::MatrixXd Xt = X;
    double logdetS = 0.0;
    if (lambda != 0.0) {
      yt -= lambda * (ew->W * u);
      Xt -= lambda * (ew->W * X);
      for (int i = 0; i < mu.size(); ++i) {
        const double a = 1.0 - lambda * mu[i];
        if (!(a > 0.0)) return inf;
        logdetS += std::log(a);
      }
    }

    Eigen::VectorXd b;
    double ssr;
    try {
      const auto ls = detail::least_squares(Xt, yt);
      b = ls.beta;
      ssr = ls.ssr;
    } catch (const RankDeficient&) {
      return inf;
    }
    if (!(ssr > 0.0)) return inf;
    const double ll = detail::gaussian_loglik(ssr, n) + logdetP + logdetS;
    if (keep && ll > loglik_out) {
      loglik_out = ll;
      beta_out = b;
      sigma2_out = ssr / n;
    }
    return -ll;
  };

  SardFit f;
  f.method = FitMethod::ml;
  f.has_S = d.has_S;
  f.n = n;

  Eigen::VectorXd theta(std::max(dim, 1));
  if (dim == 0) {
    theta.resize(0);
    eval(theta, true);
    f.converged = true;
    f.iterations = 1;
  } else {
    Eigen::VectorXd x0(dim), step(dim);
    Eigen::VectorXd rho0 = Eigen::VectorXd::Zero(pc);
    if (opt.start_rho) {
      if (opt.start_rho->size() != pc)
        throw DimensionMismatch("fit_ml: start_rho length mismatch");
      rho0 = *opt.start_rho;
    } else if (n_rho > 0) {
      try {
        const SardFit iv = fit_iv(d);
        int c = 0;
        if (d.has_S) rho0[c++] = iv.coef.rho_S;
        rho0[c++] = iv.coef.rho_A;
        rho0[c++] = iv.coef.rho_R;
        rho0[c++] = iv.coef.rho_D;
      } catch (const Error&) {
        rho0.setZero();
      }
    }
    for (int j = 0; j < n_rho; ++j) {
      x0[j] = rho0[j];
      step[j] = std::max(0.5 * std::abs(rho0[j]), 1e-4);
    }
    if (lambda_free) {
      x0[n_rho] = 0.4 * lam_hi;
      step[n_rho] = 0.25 * lam_hi;
    }

    theta = detail::nelder_mead([&](const Eigen::VectorXd& t) { return eval(t, true); },
                                x0, step, opt.max_evals, opt.ftol, &f.iterations,
                                &f.converged, &f.ml_trace);
    eval(theta, true);
    if (!std::isfinite(loglik_out)) {
      theta.setZero();
      eval(theta, true);
      f.converged = false;
    }
  }

  Eigen::VectorXd rho = Eigen::VectorXd::Zero(pc);
  for (int j = 0; j < n_rho; ++j) rho[j] = theta[j];
  f.lambda = lambda_free ? theta[n_rho] : lambda_fixed;
  f.sigma2 = sigma2_out;
  f.loglik = loglik_out;
  f.k = px + n_rho + (lambda_free ? 1 : 0) + 1;

  f.beta.resize(px + pc);
  f.beta.head(px) = beta_out;
  f.beta.tail(pc) = rho;
  f.names = detail::coef_names(d.has_S, true);

  // residual of the systematic part and conditional covariance of the block
  Eigen::VectorXd u = d.dy;
  for (int j = 0; j < pc; ++j)
    if (rho[j] != 0.0) u -= rho[j] * mdy[j];
  f.residuals = u - X * beta_out;

  Eigen::MatrixXd Xt = X;
  if (f.lambda != 0.0) Xt -= f.lambda * (ew->W * X);
  const Eigen::MatrixXd xtx_inv =
      (Xt.transpose() * Xt).ldlt().solve(Eigen::MatrixXd::Identity(px, px));
  f.cov = Eigen::MatrixXd::Zero(px + pc, px + pc);
  f.cov.topLeftCorner(px, px) = f.sigma2 * xtx_inv;
  f.se = f.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  detail::map_coefficients(f);
  return f;
}

// Bootstrap standard errors by residual resampling. OLS and IV regenerate the
// observed change through the fitted reduced form so the correction
// regressors react to each draw; the naive fit resamples in place.
inline Eigen::VectorXd bootstrap_se(const SardDesign& d, const SardFit& fit,
                                    int replications = 500,
                                    std::uint64_t seed = 1) {
  if (fit.method == FitMethod::ml)
    throw OutOfRange("bootstrap_se: provided for OLS and IV fits only");
  if (replications < 2) throw OutOfRange("bootstrap_se: too few replications");

  const int n = d.size();
  const Eigen::MatrixXd X = detail::exog_block(d);
  const int px = static_cast<int>(X.cols());
  const auto ms = detail::active_corrections(d);
  const int pc = static_cast<int>(ms.size());
  const int p = static_cast<int>(fit.beta.size());

  Eigen::VectorXd eps = fit.residuals;
  eps.array() -= eps.mean();
  const Eigen::VectorXd systematic = X * fit.beta.head(px);

  std::optional<Eigen::PartialPivLU<Eigen::MatrixXd>> lu;
  Eigen::MatrixXd Z;
  if (fit.method != FitMethod::ols_naive) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n);
    for (int j = 0; j < pc; ++j)
      ms[j]->add_scaled(P, -fit.beta[px + j]);
    lu.emplace(P);
    if (fit.method == FitMethod::iv) {
      Z.resize(n, px * (1 + pc));
      Z.leftCols(px) = X;
      for (int j = 0; j < pc; ++j)
        for (int c = 0; c < px; ++c)
          Z.col(px * (1 + j) + c) = ms[j]->apply(ms[j]->apply(X.col(c)));
    }
  }

  Rng rng(seed);
  Eigen::MatrixXd draws(replications, p);
  Eigen::VectorXd estar(n), dystar(n);
  Eigen::MatrixXd Cstar(n, pc);
  for (int b = 0; b < replications; ++b) {
    for (int i = 0; i < n; ++i) estar[i] = eps[static_cast<int>(rng.index(n))];
    if (fit.method == FitMethod::ols_naive) {
      dystar = systematic + estar;
      draws.row(b) = detail::least_squares(X, dystar).beta.transpose();
    } else {
      dystar = lu->solve(systematic + estar);
      for (int j = 0; j < pc; ++j) Cstar.col(j) = ms[j]->apply(dystar);
      if (fit.method == FitMethod::ols) {
        Eigen::MatrixXd W(n, px + pc);
        W.leftCols(px) = X;
        W.rightCols(pc) = Cstar;
        draws.row(b) = detail::least_squares(W, dystar).beta.transpose();
      } else {
        draws.row(b) = detail::two_stage(X, Cstar, Z, dystar).beta.transpose();
      }
    }
  }

  const Eigen::RowVectorXd mean = draws.colwise().mean();
  Eigen::VectorXd se(p);
  for (int j = 0; j < p; ++j)
    se[j] = std::sqrt((draws.col(j).array() - mean[j]).square().sum() /
                      (replications - 1));
  return se;
}

}  // namespace sard
