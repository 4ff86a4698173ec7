#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "sard/common.hpp"
#include "sard/geometry.hpp"

namespace sard {

// Truncated distance-decay kernel
//   K_h(z) = (c_K/h)^2 / (||z||/h + 1)^2   for ||z|| <= h, else 0,
// with c_K chosen so the integral over the radius-h disc is exactly 1.
struct KernelSpec {
  double h = 1.0;

  static double c_K() {
    static const double c = 1.0 / std::sqrt(2.0 * M_PI * (std::log(2.0) - 0.5));
    return c;
  }
};

inline double kernel_value(const KernelSpec& spec, double dist) {
  if (!(spec.h > 0.0)) throw OutOfRange("kernel_value: bandwidth must be positive");
  // tiny relative slack keeps support membership consistent when distances
  // land exactly on the (discontinuous) boundary up to rounding
  if (dist > spec.h * (1.0 + 1e-12)) return 0.0;
  const double ck_h = KernelSpec::c_K() / spec.h;
  const double u = dist / spec.h + 1.0;
  return ck_h * ck_h / (u * u);
}

inline double kernel_value(const KernelSpec& spec, const Eigen::Vector2d& z) {
  return kernel_value(spec, z.norm());
}

// Analytic gradient of K_h; zero at the origin, on the support boundary and
// outside it (the kernel is not differentiable at those radii — the
// measure-zero set is assigned zero).
inline Eigen::Vector2d kernel_gradient(const KernelSpec& spec,
                                       const Eigen::Vector2d& z) {
  const double r = z.norm();
  if (!(spec.h > 0.0)) throw OutOfRange("kernel_gradient: bandwidth must be positive");
  if (r <= 0.0 || r >= spec.h) return Eigen::Vector2d::Zero();
  const double ck_h = KernelSpec::c_K() / spec.h;
  const double u = r / spec.h + 1.0;
  const double dKdr = -2.0 * ck_h * ck_h / (u * u * u) / spec.h;
  return (dKdr / r) * z;
}

// Discrete interaction matrix W with (W)_{ij} = K_h(z_i - z_j) * A_j.
// Dense when the kernel support covers a substantial share of all pairs
// (repeated dense products are faster and the memory is affordable), sparse
// otherwise.
struct InteractionMatrix {
  double h = 0.0;
  bool dense = true;
  Eigen::MatrixXd Wd;
  Eigen::SparseMatrix<double> Ws;  // row-major storage not required; CSC

  int rows() const { return dense ? static_cast<int>(Wd.rows()) : static_cast<int>(Ws.rows()); }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    return dense ? Eigen::VectorXd(Wd * v) : Eigen::VectorXd(Ws * v);
  }

  Eigen::VectorXd column(int j) const {
    if (dense) return Wd.col(j);
    return Eigen::VectorXd(Ws.col(j));
  }

  Eigen::VectorXd row_sums() const {
    if (dense) return Wd.rowwise().sum();
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(Ws.cols());
    return Ws * ones;
  }

  double coeff(int i, int j) const { return dense ? Wd(i, j) : Ws.coeff(i, j); }
};

enum class InteractionStorage { automatic_, dense_, sparse_ };

inline InteractionMatrix build_interaction(
    const SpatialDomain& domain, const KernelSpec& spec,
    InteractionStorage storage = InteractionStorage::automatic_) {
  if (!(spec.h > 0.0))
    throw OutOfRange("build_interaction: bandwidth must be positive");
  const int n = domain.size();

  bool use_dense;
  if (storage == InteractionStorage::dense_) {
    use_dense = true;
  } else if (storage == InteractionStorage::sparse_) {
    use_dense = false;
  } else {
    double extent_area;
    if (domain.topology == Topology::torus) {
      extent_area = domain.width * domain.height;
    } else {
      const double wx = domain.z.col(0).maxCoeff() - domain.z.col(0).minCoeff();
      const double wy = domain.z.col(1).maxCoeff() - domain.z.col(1).minCoeff();
      extent_area = std::max(wx * wy, 1e-300);
    }
    const double support_fraction =
        std::min(1.0, M_PI * spec.h * spec.h / extent_area);
    use_dense = n <= 3000 || support_fraction > 0.25;
  }

  InteractionMatrix W;
  W.h = spec.h;
  W.dense = use_dense;

  if (use_dense) {
    W.Wd.setZero(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double v = kernel_value(spec, domain.distance(i, j));
        if (v != 0.0) W.Wd(i, j) = v * domain.area[j];
      }
    }
  } else {
    CellIndex index(domain, spec.h);
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector2d p = domain.z.row(i);
      index.for_each_within(p, spec.h * (1.0 + 1e-12), [&](int j, double d2) {
        const double v = kernel_value(spec, std::sqrt(d2));
        if (v != 0.0) trip.emplace_back(i, j, v * domain.area[j]);
      });
    }
    W.Ws.resize(n, n);
    W.Ws.setFromTriplets(trip.begin(), trip.end());
    W.Ws.makeCompressed();
  }
  return W;
}

}  // namespace sard
