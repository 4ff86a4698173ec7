#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sard/kernels.hpp"

using namespace sard;

namespace {

// Gauss-Legendre quadrature of the kernel over its support disc:
// integral = 2*pi * int_0^h K(r) r dr, used as the normalization oracle.
double kernel_disc_integral(double h, int npts = 64) {
  // 64-point Gauss-Legendre nodes via Newton iteration on Legendre P_n
  std::vector<double> x(npts), w(npts);
  const int m = (npts + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double xi = std::cos(M_PI * (i + 0.75) / (npts + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < npts; ++j) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * xi * p1 - j * p2) / (j + 1.0);
      }
      pp = npts * (xi * p0 - p1) / (xi * xi - 1.0);
      double dx = p0 / pp;
      xi -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    x[i] = -xi;
    x[npts - 1 - i] = xi;
    w[i] = 2.0 / ((1.0 - xi * xi) * pp * pp);
    w[npts - 1 - i] = w[i];
  }
  KernelSpec spec{h};
  double sum = 0.0;
  for (int i = 0; i < npts; ++i) {
    const double r = 0.5 * h * (x[i] + 1.0);
    sum += w[i] * kernel_value(spec, r) * r;
  }
  return 2.0 * M_PI * 0.5 * h * sum;
}

}  // namespace

TEST_CASE("kernel value at the origin and support edge", "[kernels]") {
  KernelSpec k1{1.0};
  const double ck2 = 1.0 / (2.0 * M_PI * (std::log(2.0) - 0.5));
  REQUIRE(kernel_value(k1, Eigen::Vector2d{0.0, 0.0}) == Catch::Approx(ck2));
  REQUIRE(ck2 == Catch::Approx(0.8239).margin(5e-4));
  REQUIRE(kernel_value(k1, 1.0) == Catch::Approx(ck2 / 4.0));
  REQUIRE(kernel_value(k1, 1.01) == 0.0);

  KernelSpec kh{0.15};
  REQUIRE(kernel_value(kh, 0.0) == Catch::Approx(ck2 / (0.15 * 0.15)));
  REQUIRE(kernel_value(kh, 0.1505) == 0.0);
}

TEST_CASE("kernel scaling law", "[kernels]") {
  KernelSpec k1{1.0}, kh{0.4};
  for (double r : {0.05, 0.1, 0.2, 0.39}) {
    REQUIRE(kernel_value(kh, r) ==
            Catch::Approx(kernel_value(k1, r / 0.4) / (0.4 * 0.4)));
  }
}

TEST_CASE("kernel integrates to one over its support disc", "[kernels]") {
  REQUIRE(kernel_disc_integral(0.15) == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(kernel_disc_integral(0.4) == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(kernel_disc_integral(1.0) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("kernel gradient matches finite differences and vanishes at edges",
          "[kernels]") {
  KernelSpec k{0.3};
  Eigen::Vector2d z{0.11, -0.07};
  Eigen::Vector2d g = kernel_gradient(k, z);
  const double eps = 1e-7;
  for (int c = 0; c < 2; ++c) {
    Eigen::Vector2d zp = z, zm = z;
    zp[c] += eps;
    zm[c] -= eps;
    const double fd = (kernel_value(k, zp) - kernel_value(k, zm)) / (2.0 * eps);
    REQUIRE(g[c] == Catch::Approx(fd).margin(1e-6));
  }
  REQUIRE(kernel_gradient(k, {0.0, 0.0}).norm() == 0.0);
  REQUIRE(kernel_gradient(k, {0.3, 0.0}).norm() == 0.0);
  REQUIRE(kernel_gradient(k, {0.5, 0.0}).norm() == 0.0);
  // gradient points toward the origin (kernel decreasing in distance)
  REQUIRE(g.dot(z) < 0.0);
}

TEST_CASE("interaction matrix has kernel diagonal and area weighting", "[kernels]") {
  SpatialDomain d = uniform_torus_grid(12, 12);
  KernelSpec spec{0.15};
  InteractionMatrix W = build_interaction(d, spec);
  const double ck2 = 1.0 / (2.0 * M_PI * (std::log(2.0) - 0.5));
  for (int i = 0; i < d.size(); ++i)
    REQUIRE(W.coeff(i, i) ==
            Catch::Approx(ck2 / (0.15 * 0.15) * d.area[i]));
  // symmetric for uniform areas, circulant on the torus: row sums all equal
  Eigen::VectorXd rs = W.row_sums();
  REQUIRE((W.Wd - W.Wd.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE(rs.maxCoeff() - rs.minCoeff() < 1e-12);
}

TEST_CASE("tiny bandwidth produces a diagonal interaction matrix", "[kernels]") {
  SpatialDomain d = uniform_torus_grid(6, 6);
  KernelSpec spec{0.05};  // below the 1/6 grid spacing
  InteractionMatrix W = build_interaction(d, spec);
  const double ck2 = 1.0 / (2.0 * M_PI * (std::log(2.0) - 0.5));
  for (int i = 0; i < d.size(); ++i)
    for (int j = 0; j < d.size(); ++j) {
      if (i == j)
        REQUIRE(W.coeff(i, i) == Catch::Approx(ck2 / (0.05 * 0.05) * d.area[i]));
      else
        REQUIRE(W.coeff(i, j) == 0.0);
    }
}

TEST_CASE("sparse and dense interaction storage agree", "[kernels]") {
  SpatialDomain d = uniform_torus_grid(15, 15);
  KernelSpec spec{0.2};
  InteractionMatrix Wd = build_interaction(d, spec, InteractionStorage::dense_);
  InteractionMatrix Ws = build_interaction(d, spec, InteractionStorage::sparse_);
  Eigen::VectorXd v(d.size());
  for (int i = 0; i < d.size(); ++i) v[i] = std::sin(0.37 * i);
  REQUIRE((Wd.apply(v) - Ws.apply(v)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("discrete row sums approach the continuous unit integral", "[kernels]") {
  auto row_sum_err = [](int n, double h) {
    SpatialDomain d = uniform_torus_grid(n, n);
    InteractionMatrix W = build_interaction(d, KernelSpec{h});
    Eigen::VectorXd rs = W.row_sums();
    return std::abs(rs[0] - 1.0);
  };
  // refinement improves the Riemann approximation of the unit integral
  REQUIRE(row_sum_err(50, 0.15) < row_sum_err(12, 0.15));
  REQUIRE(row_sum_err(50, 0.15) < 0.02);
  REQUIRE(row_sum_err(50, 0.4) < 0.02);
}
