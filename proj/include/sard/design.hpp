#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <vector>

#include "common.hpp"
#include "gfdm.hpp"
#include "kernels.hpp"
#include "pde.hpp"

namespace sard {

// N x N linear map representing the dependence of the second-order time
// remainder on the observed change of the field. Dense below the same size
// threshold used for interaction matrices, sparse above it.
struct CorrectionMatrix {
  bool dense = true;
  Eigen::MatrixXd Md;
  Eigen::SparseMatrix<double> Ms;

  int rows() const { return dense ? static_cast<int>(Md.rows()) : static_cast<int>(Ms.rows()); }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    if (v.size() != rows())
      throw DimensionMismatch("correction apply: vector length does not match matrix size");
    return dense ? Eigen::VectorXd(Md * v) : Eigen::VectorXd(Ms * v);
  }

  // target += c * M; used when forming the reduced-form filter densely
  void add_scaled(Eigen::MatrixXd& target, double c) const {
    if (target.rows() != rows() || target.cols() != rows())
      throw DimensionMismatch("correction add_scaled: target size mismatch");
    if (dense) {
      target.noalias() += c * Md;
    } else {
      for (int k = 0; k < Ms.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(Ms, k); it; ++it)
          target(it.row(), it.col()) += c * it.value();
    }
  }
};

namespace detail {

inline bool correction_dense(int n) { return n <= 3000; }

inline CorrectionMatrix correction_from_sparse(const Eigen::SparseMatrix<double>& m) {
  CorrectionMatrix c;
  c.dense = correction_dense(static_cast<int>(m.rows()));
  if (c.dense)
    c.Md = Eigen::MatrixXd(m);
  else
    c.Ms = m;
  return c;
}

}  // namespace detail

// Correction map for one interaction channel: the derivative of
// M_z1(y ⊙ M_z1 W y) + M_z2(y ⊙ M_z2 W y) with respect to y, assembled one
// basis image (= matrix column) at a time.
inline CorrectionMatrix interaction_correction(const Eigen::VectorXd& y,
                                               const OperatorSet& ops,
                                               const InteractionMatrix& W) {
  const int n = static_cast<int>(y.size());
  if (ops.M_z1.rows() != n || W.rows() != n)
    throw DimensionMismatch("interaction_correction: inconsistent sizes");

  const Eigen::VectorXd Wy = W.apply(y);
  const Eigen::VectorXd g1 = ops.M_z1 * Wy;
  const Eigen::VectorXd g2 = ops.M_z2 * Wy;

  CorrectionMatrix c;
  c.dense = detail::correction_dense(n);
  if (c.dense) c.Md.setZero(n, n);

  std::vector<Eigen::Triplet<double>> trip;
  Eigen::VectorXd col(n);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd w = W.column(i);
    col.noalias() = ops.M_z1 * y.cwiseProduct(ops.M_z1 * w);
    col.noalias() += ops.M_z2 * y.cwiseProduct(ops.M_z2 * w);
    for (Eigen::SparseMatrix<double>::InnerIterator it(ops.M_z1, i); it; ++it)
      col(it.row()) += g1(i) * it.value();
    for (Eigen::SparseMatrix<double>::InnerIterator it(ops.M_z2, i); it; ++it)
      col(it.row()) += g2(i) * it.value();
    if (c.dense) {
      c.Md.col(i) = col;
    } else {
      for (int r = 0; r < n; ++r)
        if (col(r) != 0.0) trip.emplace_back(r, i, col(r));
    }
  }
  if (!c.dense) {
    c.Ms.resize(n, n);
    c.Ms.setFromTriplets(trip.begin(), trip.end());
  }
  return c;
}

struct CorrectionSet {
  CorrectionMatrix S, A, R, D;
};

// Correction maps for all four channels, from the initial field. An empty s
// yields a zero topography correction.
inline CorrectionSet build_corrections(const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& s,
                                       const OperatorSet& ops,
                                       const InteractionMatrix& W_A,
                                       const InteractionMatrix& W_R) {
  const int n = static_cast<int>(y.size());
  if (ops.M_z1.rows() != n)
    throw DimensionMismatch("build_corrections: field/operator size mismatch");
  if (s.size() != 0 && s.size() != n)
    throw DimensionMismatch("build_corrections: topography field size mismatch");

  CorrectionSet set;
  if (s.size() == 0) {
    Eigen::SparseMatrix<double> zero(n, n);
    set.S = detail::correction_from_sparse(zero);
  } else {
    const Eigen::VectorXd g1 = ops.M_z1 * s;
    const Eigen::VectorXd g2 = ops.M_z2 * s;
    Eigen::SparseMatrix<double> m1 = ops.M_z1 * g1.asDiagonal();
    Eigen::SparseMatrix<double> m2 = ops.M_z2 * g2.asDiagonal();
    Eigen::SparseMatrix<double> m = m1 + m2;
    set.S = detail::correction_from_sparse(m);
  }
  set.A = interaction_correction(y, ops, W_A);
  set.R = interaction_correction(y, ops, W_R);
  set.D = detail::correction_from_sparse(
      Eigen::SparseMatrix<double>(ops.M_z1z1 + ops.M_z2z2));
  return set;
}

struct Regressors {
  Eigen::VectorXd x_S, x_A, x_R, x_D;
};

// x_S from the topography field, x_A and x_R from the kernel-smoothed field,
// x_D from the discrete Laplacian; all evaluated at the initial field.
inline Regressors build_regressors(const Eigen::VectorXd& y,
                                   const Eigen::VectorXd& s,
                                   const OperatorSet& ops,
                                   const InteractionMatrix& W_A,
                                   const InteractionMatrix& W_R) {
  const int n = static_cast<int>(y.size());
  if (ops.M_z1.rows() != n || W_A.rows() != n || W_R.rows() != n)
    throw DimensionMismatch("build_regressors: inconsistent sizes");
  if (s.size() != 0 && s.size() != n)
    throw DimensionMismatch("build_regressors: topography field size mismatch");

  Regressors r;
  if (s.size() == 0) {
    r.x_S = Eigen::VectorXd::Zero(n);
  } else {
    r.x_S = detail::divergence_term(y, ops.M_z1 * s, ops.M_z2 * s, ops);
  }
  const Eigen::VectorXd wa = W_A.apply(y);
  const Eigen::VectorXd wr = W_R.apply(y);
  r.x_A = detail::divergence_term(y, ops.M_z1 * wa, ops.M_z2 * wa, ops);
  r.x_R = detail::divergence_term(y, ops.M_z1 * wr, ops.M_z2 * wr, ops);
  r.x_D = (ops.M_z1z1 + ops.M_z2z2) * y;
  return r;
}

// Everything the estimators need for one two-period cross-section.
struct SardDesign {
  double tau = 1.0;
  bool has_S = false;
  Eigen::VectorXd y;   // initial field, density units
  Eigen::VectorXd dy;  // (y(tau) - y(0)) / tau
  Eigen::VectorXd s;   // topography field; empty when absent
  Eigen::VectorXd x_S, x_A, x_R, x_D;
  CorrectionMatrix M_S, M_A, M_R, M_D;

  int size() const { return static_cast<int>(y.size()); }
};

inline SardDesign build_design(const Eigen::VectorXd& y0,
                               const Eigen::VectorXd& y1,
                               const Eigen::VectorXd& s, double tau,
                               const OperatorSet& ops,
                               const InteractionMatrix& W_A,
                               const InteractionMatrix& W_R) {
  if (!(tau > 0.0)) throw OutOfRange("build_design: tau must be positive");
  if (y1.size() != y0.size())
    throw DimensionMismatch("build_design: field length mismatch between periods");

  SardDesign d;
  d.tau = tau;
  d.has_S = s.size() != 0;
  d.y = y0;
  d.dy = (y1 - y0) / tau;
  d.s = s;

  Regressors r = build_regressors(y0, s, ops, W_A, W_R);
  d.x_S = std::move(r.x_S);
  d.x_A = std::move(r.x_A);
  d.x_R = std::move(r.x_R);
  d.x_D = std::move(r.x_D);

  CorrectionSet c = build_corrections(y0, s, ops, W_A, W_R);
  d.M_S = std::move(c.S);
  d.M_A = std::move(c.A);
  d.M_R = std::move(c.R);
  d.M_D = std::move(c.D);
  return d;
}

// Reduced-form coefficients as they come out of a fit.
struct TildeCoefficients {
  double alpha = 0.0, phi = 0.0;
  double gamma_S = 0.0, gamma_A = 0.0, gamma_R = 0.0, gamma_D = 0.0;
  double rho_S = 0.0, rho_A = 0.0, rho_R = 0.0, rho_D = 0.0;
};

struct StructuralParams {
  double alpha = 0.0, phi = 0.0;
  double gamma_S = 0.0, gamma_A = 0.0, gamma_R = 0.0, gamma_D = 0.0;
  double rho_phi = 0.0, rho_S = 0.0, rho_A = 0.0, rho_R = 0.0, rho_D = 0.0;
  double scale = 1.0;  // 1 - tau*rho_phi/2
};

// Identification of the scale factor from the aggregate dynamics: the
// aggregate follows Y(t) = (Y0 + c) e^{phi t} - c with c = alpha*|Omega|/phi,
// and the ratio (Y(tau)+c)/(Y0+c) pins down rho_phi given the fitted tilde
// coefficients (the scale cancels inside c).
inline StructuralParams back_solve(const TildeCoefficients& t, double Y0,
                                   double Ytau, double tau,
                                   double total_area = 1.0) {
  if (!(tau > 0.0)) throw OutOfRange("back_solve: tau must be positive");
  if (t.phi == 0.0)
    throw ZeroPhiTilde("back_solve: tilde phi is zero, scale not identified");
  const double shift = t.alpha * total_area / t.phi;
  const double den = Y0 + shift;
  const double ratio = (Ytau + shift) / den;
  if (!(ratio > 0.0) || !std::isfinite(ratio))
    throw DegenerateAggregate("back_solve: aggregate ratio nonpositive or undefined");

  StructuralParams p;
  p.rho_phi = (2.0 / tau) * (1.0 - std::log(ratio) / (t.phi * tau));
  p.scale = 1.0 - tau * p.rho_phi / 2.0;
  p.alpha = t.alpha * p.scale;
  p.phi = t.phi * p.scale;
  p.gamma_S = t.gamma_S * p.scale;
  p.gamma_A = t.gamma_A * p.scale;
  p.gamma_R = t.gamma_R * p.scale;
  p.gamma_D = t.gamma_D * p.scale;
  p.rho_S = 2.0 * t.rho_S * p.scale / tau;
  p.rho_A = 2.0 * t.rho_A * p.scale / tau;
  p.rho_R = 2.0 * t.rho_R * p.scale / tau;
  p.rho_D = 2.0 * t.rho_D * p.scale / tau;
  return p;
}

}  // namespace sard
