#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "sard/common.hpp"
#include "sard/geometry.hpp"

namespace sard {

// Quartic distance-decay weight for the star least squares.
inline double gfdm_weight(double d, double dm) {
  if (!(dm > 0.0) || d < 0.0 || d > dm * (1.0 + 1e-12))
    throw OutOfRange("gfdm_weight: need 0 <= d <= dm, dm > 0");
  const double r = d / dm;
  return 1.0 - 6.0 * r * r + 8.0 * r * r * r - 3.0 * r * r * r * r;
}

// Per-star weighted least-squares system for the five partials
// (d/dz1, d/dz2, d2/dz1^2, d2/dz2^2, d2/dz1dz2).
//
// The Taylor expansion is written in neighbor-minus-center offsets; the Star
// stores center-minus-neighbor offsets, so the sign is flipped on entry.
// Offsets are normalized by dm before forming the normal matrix, which keeps
// its condition number independent of the grid scale; the de-normalization
// is folded into D's rows afterward.
//
// On exactly symmetric stars the farthest members carry zero weight and the
// normal matrix can be singular in the cross-derivative direction only (the
// model uses no cross term). That direction is projected out; a star is
// rejected only if one of the four model partials is unidentified.
struct StarSystem {
  Eigen::Matrix<double, 5, 5> A;  // normal matrix (normalized offsets)
  Eigen::MatrixXd B;              // 5 x (1 + n_s); column 0 is the center
  Eigen::MatrixXd D;              // de-normalized pseudo-solve of A D = B
  double condition = 0.0;         // over the identified directions
  bool cross_identified = true;
};

inline StarSystem assemble_star(const Star& star) {
  const int ns = static_cast<int>(star.members.size());
  if (ns < 5)
    throw SingularStar("assemble_star: star at location " +
                       std::to_string(star.center) + " has fewer than 5 members");
  if (!(star.dm > 0.0))
    throw SingularStar("assemble_star: degenerate star radius at location " +
                       std::to_string(star.center));

  StarSystem sys;
  sys.A.setZero();
  sys.B.setZero(5, ns + 1);

  for (int m = 0; m < ns; ++m) {
    const double h = -star.offsets[m].x() / star.dm;  // neighbor minus center
    const double k = -star.offsets[m].y() / star.dm;
    const double d = star.offsets[m].norm();
    const double w = gfdm_weight(d, star.dm);
    const double w2 = w * w;
    Eigen::Matrix<double, 5, 1> c;
    c << h, k, 0.5 * h * h, 0.5 * k * k, h * k;
    sys.A.noalias() += w2 * c * c.transpose();
    sys.B.col(0) -= w2 * c;
    sys.B.col(m + 1) = w2 * c;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 5, 5>> eig(sys.A);
  const Eigen::Matrix<double, 5, 1>& lam = eig.eigenvalues();
  const Eigen::Matrix<double, 5, 5>& V = eig.eigenvectors();
  const double lmax = lam.maxCoeff();
  if (!(lmax > 0.0))
    throw SingularStar("assemble_star: zero normal matrix at location " +
                       std::to_string(star.center));

  const double null_tol = lmax * 1e-12;
  double lmin_identified = lmax;
  Eigen::Matrix<double, 5, 1> inv_lam;
  bool any_null = false;
  for (int r = 0; r < 5; ++r) {
    if (lam[r] <= null_tol) {
      inv_lam[r] = 0.0;
      any_null = true;
      // a null direction touching a model partial makes the star unusable
      for (int p = 0; p < 4; ++p)
        if (std::abs(V(p, r)) > 1e-8)
          throw SingularStar("assemble_star: partial " + std::to_string(p) +
                             " unidentified at location " +
                             std::to_string(star.center));
      if (std::abs(V(4, r)) > 1e-8) sys.cross_identified = false;
    } else {
      inv_lam[r] = 1.0 / lam[r];
      lmin_identified = std::min(lmin_identified, lam[r]);
    }
  }
  sys.condition = lmax / lmin_identified;
  if (sys.condition > 1e12)
    throw SingularStar("assemble_star: ill-conditioned star at location " +
                       std::to_string(star.center));

  sys.D = V * inv_lam.asDiagonal() * V.transpose() * sys.B;
  if (any_null && !sys.cross_identified) sys.D.row(4).setZero();
  // undo the dm normalization: first derivatives scale 1/dm, second 1/dm^2
  sys.D.topRows(2) /= star.dm;
  sys.D.bottomRows(3) /= star.dm * star.dm;
  return sys;
}

// Sparse derivative operators. Row i of each matrix has nonzeros only on
// {i} union star(i); applied to a field they estimate the named partial.
struct OperatorSet {
  Eigen::SparseMatrix<double> M_z1, M_z2, M_z1z1, M_z2z2;
  // cross-derivative operator: part of the star solve, unused by the model
  Eigen::SparseMatrix<double> M_z1z2;

  // convenience: the discrete Laplacian M_z1z1 + M_z2z2
  Eigen::SparseMatrix<double> laplacian() const { return M_z1z1 + M_z2z2; }
};

inline OperatorSet build_operators(const SpatialDomain& domain,
                                   const std::vector<Star>& stars) {
  const int n = domain.size();
  if (static_cast<int>(stars.size()) != n)
    throw DimensionMismatch("build_operators: one star per location required");

  std::vector<Eigen::Triplet<double>> t1, t2, t11, t22, t12;
  const std::size_t guess = static_cast<std::size_t>(n) *
                            (stars.empty() ? 9 : stars[0].members.size() + 1);
  t1.reserve(guess);
  t2.reserve(guess);
  t11.reserve(guess);
  t22.reserve(guess);
  t12.reserve(guess);

  for (const Star& s : stars) {
    const StarSystem sys = assemble_star(s);
    const int i = s.center;
    t1.emplace_back(i, i, sys.D(0, 0));
    t2.emplace_back(i, i, sys.D(1, 0));
    t11.emplace_back(i, i, sys.D(2, 0));
    t22.emplace_back(i, i, sys.D(3, 0));
    t12.emplace_back(i, i, sys.D(4, 0));
    for (std::size_t m = 0; m < s.members.size(); ++m) {
      const int j = s.members[m];
      const int col = static_cast<int>(m) + 1;
      t1.emplace_back(i, j, sys.D(0, col));
      t2.emplace_back(i, j, sys.D(1, col));
      t11.emplace_back(i, j, sys.D(2, col));
      t22.emplace_back(i, j, sys.D(3, col));
      t12.emplace_back(i, j, sys.D(4, col));
    }
  }

  OperatorSet ops;
  auto make = [&](std::vector<Eigen::Triplet<double>>& t) {
    Eigen::SparseMatrix<double> m(n, n);
    m.setFromTriplets(t.begin(), t.end());
    m.makeCompressed();
    return m;
  };
  ops.M_z1 = make(t1);
  ops.M_z2 = make(t2);
  ops.M_z1z1 = make(t11);
  ops.M_z2z2 = make(t22);
  ops.M_z1z2 = make(t12);
  return ops;
}

}  // namespace sard
