#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "diagnostics.hpp"
#include "estimators.hpp"
#include "geometry.hpp"

namespace sard {

enum class BaselineModel {
  income_lag,
  alt_income_lag,
  s_income_lag,
  slx,
  spatial_lag,
  spatial_durbin
};

inline const char* baseline_name(BaselineModel m) {
  switch (m) {
    case BaselineModel::income_lag: return "INCOME-LAG";
    case BaselineModel::alt_income_lag: return "ALT-INCOME-LAG";
    case BaselineModel::s_income_lag: return "S-INCOME-LAG";
    case BaselineModel::slx: return "SLX";
    case BaselineModel::spatial_lag: return "SPATIAL-LAG";
    case BaselineModel::spatial_durbin: return "SPATIAL-DURBIN";
  }
  return "?";
}

// inverse-squared-distance weights truncated at dbar, zero diagonal; the raw
// matrix is symmetric, the working matrix is row-standardized (rows without
// neighbors stay zero)
struct DistanceWeights {
  double dbar = 0.0;
  Eigen::SparseMatrix<double> W;    // row-standardized
  Eigen::SparseMatrix<double> raw;  // symmetric 1/d^2
  Eigen::VectorXd degree;           // raw row sums
};

inline DistanceWeights inverse_distance_weights(const SpatialDomain& dom,
                                                double dbar) {
  if (!(dbar > 0.0))
    throw OutOfRange("inverse_distance_weights: threshold must be positive");
  const int n = dom.size();

  CellIndex idx(dom.z, dom.topology, dom.width, dom.height, dbar);
  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector2d p = dom.z.row(i);
    idx.for_each_within(p, dbar, [&](int j, double d2) {
      if (j != i) trip.emplace_back(i, j, 1.0 / d2);
    });
  }

  DistanceWeights w;
  w.dbar = dbar;
  w.raw.resize(n, n);
  w.raw.setFromTriplets(trip.begin(), trip.end());
  w.degree = w.raw * Eigen::VectorXd::Ones(n);

  Eigen::VectorXd inv_deg(n);
  for (int i = 0; i < n; ++i)
    inv_deg[i] = w.degree[i] > 0.0 ? 1.0 / w.degree[i] : 0.0;
  w.W = inv_deg.asDiagonal() * w.raw;
  return w;
}

namespace detail {

// eigenvalues of the row-standardized matrix through the symmetric
// similarity D^{-1/2} raw D^{-1/2} on the connected rows; isolated rows
// contribute zeros
inline Eigen::VectorXd sar_eigenvalues(const DistanceWeights& w) {
  const int n = static_cast<int>(w.degree.size());
  std::vector<int> keep;
  for (int i = 0; i < n; ++i)
    if (w.degree[i] > 0.0) keep.push_back(i);
  const int m = static_cast<int>(keep.size());
  if (m == 0) throw EmptyBand("sar_eigenvalues: no pairs within the threshold");

  std::vector<int> pos(n, -1);
  for (int a = 0; a < m; ++a) pos[keep[a]] = a;

  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(m, m);
  for (int k = 0; k < w.raw.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(w.raw, k); it; ++it) {
      const int a = pos[it.row()], b = pos[it.col()];
      if (a >= 0 && b >= 0)
        S(a, b) = it.value() / std::sqrt(w.degree[it.row()] * w.degree[it.col()]);
    }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(S, Eigen::EigenvaluesOnly);
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(n);
  mu.head(m) = eig.eigenvalues();
  return mu;
}

}  // namespace detail

struct BaselineFit {
  BaselineModel model = BaselineModel::income_lag;
  double dbar = 0.0;  // zero for models without a weight matrix
  Eigen::VectorXd beta;
  std::vector<std::string> names;
  double rho = 0.0;  // spatial-lag coefficient, ML models only
  double sigma2 = 0.0;
  double loglik = 0.0;
  double aicc_value = 0.0;
  int k = 0;
  int n = 0;
  Eigen::VectorXd residuals;
  Eigen::VectorXd se;
  bool converged = true;
};

namespace detail {

inline bool baseline_needs_weights(BaselineModel m) {
  return m == BaselineModel::slx || m == BaselineModel::spatial_lag ||
         m == BaselineModel::spatial_durbin;
}

inline bool baseline_needs_alt(BaselineModel m) {
  return m != BaselineModel::income_lag && m != BaselineModel::s_income_lag;
}

inline bool baseline_is_ml(BaselineModel m) {
  return m == BaselineModel::spatial_lag || m == BaselineModel::spatial_durbin;
}

inline BaselineFit fit_baseline_at(BaselineModel model,
                                   const Eigen::VectorXd& y0,
                                   const Eigen::VectorXd& dy,
                                   const Eigen::VectorXd& alt,
                                   const Eigen::VectorXd& x_S,
                                   const DistanceWeights* w) {
  const int n = static_cast<int>(y0.size());

  Eigen::MatrixXd X;
  std::vector<std::string> names{"alpha", "phi"};
  switch (model) {
    case BaselineModel::income_lag:
      X.resize(n, 2);
      break;
    case BaselineModel::alt_income_lag:
    case BaselineModel::spatial_lag:
      X.resize(n, 3);
      X.col(2) = alt;
      names.push_back("gamma_alt");
      break;
    case BaselineModel::s_income_lag:
      X.resize(n, 3);
      X.col(2) = x_S;
      names.push_back("gamma_S");
      break;
    case BaselineModel::slx:
    case BaselineModel::spatial_durbin:
      X.resize(n, 5);
      X.col(2) = alt;
      X.col(3) = w->W * y0;
      X.col(4) = w->W * alt;
      names.insert(names.end(), {"gamma_alt", "theta", "theta_alt"});
      break;
  }
  X.col(0).setOnes();
  X.col(1) = y0;
  const int p = static_cast<int>(X.cols());

  BaselineFit f;
  f.model = model;
  f.names = std::move(names);
  f.n = n;
  f.dbar = w ? w->dbar : 0.0;

  if (!baseline_is_ml(model)) {
    const auto ls = least_squares(X, dy);
    f.beta = ls.beta;
    f.residuals = ls.resid;
    f.sigma2 = ls.ssr / (n - p);
    f.se = (f.sigma2 * ls.xtx_inv).diagonal().cwiseMax(0.0).cwiseSqrt();
    f.loglik = gaussian_loglik(ls.ssr, n);
    f.k = p + 1;
    f.aicc_value = aicc(f.loglik, f.k, n);
    return f;
  }

  // spatial-lag likelihood, concentrated in beta and sigma^2
  const Eigen::VectorXd mu = sar_eigenvalues(*w);
  const double mu_min = mu.minCoeff(), mu_max = mu.maxCoeff();
  if (!(mu_max > 0.0))
    throw EmptyBand("fit_baseline: weight matrix has no positive spectrum");
  const double lo = (mu_min < 0.0 ? 1.0 / mu_min : -1e6) + 1e-8;
  const double hi = 1.0 / mu_max - 1e-8;

  const Eigen::VectorXd Wdy = w->W * dy;
  double best_beta_ssr = 0.0;
  Eigen::VectorXd best_beta;
  auto loglik_at = [&](double rho) {
    const Eigen::VectorXd u = dy - rho * Wdy;
    const auto ls = least_squares(X, u);
    double logdet = 0.0;
    for (int i = 0; i < mu.size(); ++i) {
      const double a = 1.0 - rho * mu[i];
      if (!(a > 0.0)) return -std::numeric_limits<double>::infinity();
      logdet += std::log(a);
    }
    best_beta = ls.beta;
    best_beta_ssr = ls.ssr;
    return gaussian_loglik(ls.ssr, n) + logdet;
  };

  // coarse scan, then golden-section refinement inside the best bracket
  const int grid = 64;
  double best_rho = 0.0, best_ll = -std::numeric_limits<double>::infinity();
  for (int g = 0; g <= grid; ++g) {
    const double rho = lo + (hi - lo) * g / grid;
    const double ll = loglik_at(rho);
    if (ll > best_ll) {
      best_ll = ll;
      best_rho = rho;
    }
  }
  double a = std::max(lo, best_rho - (hi - lo) / grid);
  double b = std::min(hi, best_rho + (hi - lo) / grid);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = loglik_at(x1), f2 = loglik_at(x2);
  for (int it = 0; it < 80 && (b - a) > 1e-10; ++it) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = loglik_at(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = loglik_at(x1);
    }
  }
  double rho_hat = best_rho, ll_hat = best_ll;
  for (const double cand : {x1, x2}) {
    const double ll = loglik_at(cand);
    if (ll > ll_hat) {
      ll_hat = ll;
      rho_hat = cand;
    }
  }
  f.rho = rho_hat;
  f.loglik = loglik_at(rho_hat);  // refresh the concentrated block

  f.beta = best_beta;
  f.residuals = dy - f.rho * Wdy - X * f.beta;
  f.sigma2 = best_beta_ssr / n;
  const Eigen::MatrixXd xtx_inv =
      (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  f.se = (f.sigma2 * xtx_inv).diagonal().cwiseMax(0.0).cwiseSqrt();
  f.k = p + 2;  // sigma^2 and rho on top of the coefficients
  f.aicc_value = aicc(f.loglik, f.k, n);
  return f;
}

}  // namespace detail

// Comparison models over inverse-squared-distance weights; the threshold is
// selected inside the supplied grid by lowest AICc.
inline BaselineFit fit_baseline(BaselineModel model, const SpatialDomain& dom,
                                const Eigen::VectorXd& y0,
                                const Eigen::VectorXd& dy,
                                const Eigen::VectorXd& alt,
                                const Eigen::VectorXd& x_S,
                                const std::vector<double>& dbar_grid) {
  const int n = dom.size();
  if (y0.size() != n || dy.size() != n)
    throw DimensionMismatch("fit_baseline: field length does not match domain");
  if (detail::baseline_needs_alt(model) && alt.size() != n)
    throw DimensionMismatch("fit_baseline: model needs an altimetry field");
  if (model == BaselineModel::s_income_lag && x_S.size() != n)
    throw DimensionMismatch("fit_baseline: model needs the topography regressor");

  if (!detail::baseline_needs_weights(model))
    return detail::fit_baseline_at(model, y0, dy, alt, x_S, nullptr);

  if (dbar_grid.empty())
    throw OutOfRange("fit_baseline: threshold grid is empty");

  std::optional<BaselineFit> best;
  for (double dbar : dbar_grid) {
    const DistanceWeights w = inverse_distance_weights(dom, dbar);
    BaselineFit f = detail::fit_baseline_at(model, y0, dy, alt, x_S, &w);
    if (!best || f.aicc_value < best->aicc_value) best = std::move(f);
  }
  return *best;
}

}  // namespace sard
