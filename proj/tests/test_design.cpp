#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sard/design.hpp"

using namespace sard;

namespace {

struct Setup {
  SpatialDomain d;
  OperatorSet ops;
  InteractionMatrix WA, WR;
};

Setup make_setup(int n, double hA = 0.15, double hR = 0.4) {
  Setup s{uniform_torus_grid(n, n), {}, {}, {}};
  s.ops = build_operators(s.d, build_stars(s.d, 8));
  s.WA = build_interaction(s.d, KernelSpec{hA});
  s.WR = build_interaction(s.d, KernelSpec{hR});
  return s;
}

Eigen::VectorXd bumpy_field(const SpatialDomain& d) {
  Eigen::VectorXd y(d.size());
  for (int i = 0; i < d.size(); ++i) {
    const double x = d.z(i, 0), yy = d.z(i, 1);
    y[i] = 1.5 + 0.5 * std::sin(2.0 * M_PI * x) * std::cos(2.0 * M_PI * yy) +
           0.25 * std::cos(2.0 * M_PI * yy);
  }
  return y;
}

Eigen::VectorXd wavy_topography(const SpatialDomain& d) {
  Eigen::VectorXd s(d.size());
  for (int i = 0; i < d.size(); ++i)
    s[i] = 0.4 * std::sin(2.0 * M_PI * d.z(i, 1)) +
           0.3 * std::cos(2.0 * M_PI * d.z(i, 0));
  return s;
}

Eigen::VectorXd pseudo_random(int n, double lo, double hi) {
  Rng rng(4212);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * rng.uniform();
  return v;
}

// the interaction-channel correction map written directly as a function,
// independent of the matrix assembly
Eigen::VectorXd channel_map(const Eigen::VectorXd& v, const Eigen::VectorXd& y,
                            const OperatorSet& ops, const InteractionMatrix& W) {
  const Eigen::VectorXd Wy = W.apply(y);
  const Eigen::VectorXd g1 = ops.M_z1 * Wy;
  const Eigen::VectorXd g2 = ops.M_z2 * Wy;
  const Eigen::VectorXd Wv = W.apply(v);
  return ops.M_z1 * v.cwiseProduct(g1) + ops.M_z2 * v.cwiseProduct(g2) +
         ops.M_z1 * y.cwiseProduct(ops.M_z1 * Wv) +
         ops.M_z2 * y.cwiseProduct(ops.M_z2 * Wv);
}

Eigen::VectorXd topography_map(const Eigen::VectorXd& v, const Eigen::VectorXd& s,
                               const OperatorSet& ops) {
  return ops.M_z1 * v.cwiseProduct(ops.M_z1 * s) +
         ops.M_z2 * v.cwiseProduct(ops.M_z2 * s);
}

}  // namespace

TEST_CASE("diffusion regressor equals the Laplacian image", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y = bumpy_field(s.d);
  Regressors r = build_regressors(y, Eigen::VectorXd(), s.ops, s.WA, s.WR);
  const Eigen::VectorXd lap = (s.ops.M_z1z1 + s.ops.M_z2z2) * y;
  REQUIRE((r.x_D - lap).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(r.x_S.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constant field on a flat torus produces zero regressors", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(s.d.size(), 1.7);
  Regressors r = build_regressors(y, Eigen::VectorXd(), s.ops, s.WA, s.WR);
  REQUIRE(r.x_A.cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE(r.x_R.cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE(r.x_D.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("affine topography contributes nothing for a constant field", "[design]") {
  // planar cloud: affine fields are smooth only without the torus wrap
  const int n1 = 14;
  std::vector<Eigen::Vector2d> pts;
  Rng rng(99);
  for (int iy = 0; iy < n1; ++iy)
    for (int ix = 0; ix < n1; ++ix)
      pts.emplace_back((ix + 0.5) / n1 + 0.012 * (rng.uniform() - 0.5),
                       (iy + 0.5) / n1 + 0.012 * (rng.uniform() - 0.5));
  SpatialDomain d = build_domain(
      pts, std::vector<double>(n1 * n1, 1.0 / (n1 * n1)), Topology::planar);
  OperatorSet ops = build_operators(d, build_stars(d, 8));
  InteractionMatrix WA = build_interaction(d, KernelSpec{0.15});
  InteractionMatrix WR = build_interaction(d, KernelSpec{0.4});

  Eigen::VectorXd s(d.size());
  for (int i = 0; i < d.size(); ++i) s[i] = 0.3 + 0.2 * d.z(i, 0) - 0.1 * d.z(i, 1);
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(d.size(), 2.4);
  Regressors r = build_regressors(y, s, ops, WA, WR);
  REQUIRE(r.x_S.cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("interaction regressors swap with their kernels", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y = bumpy_field(s.d);
  const Eigen::VectorXd topo = wavy_topography(s.d);
  Regressors r1 = build_regressors(y, topo, s.ops, s.WA, s.WR);
  Regressors r2 = build_regressors(y, topo, s.ops, s.WR, s.WA);
  REQUIRE((r1.x_A - r2.x_R).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((r1.x_R - r2.x_A).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((r1.x_S - r2.x_S).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("reallocation regressors are negative at an isolated peak", "[design]") {
  Setup s = make_setup(20);
  Eigen::VectorXd y(s.d.size());
  int peak = 0;
  for (int i = 0; i < s.d.size(); ++i) {
    const double dx = s.d.z(i, 0) - 0.475, dy = s.d.z(i, 1) - 0.525;
    y[i] = 0.5 + 3.0 * std::exp(-(dx * dx + dy * dy) / 0.02);
    if (y[i] > y[peak]) peak = i;
  }
  Regressors r = build_regressors(y, Eigen::VectorXd(), s.ops, s.WA, s.WR);
  REQUIRE(r.x_A[peak] < 0.0);
  REQUIRE(r.x_R[peak] < 0.0);
  // with attraction negative and repulsion positive the two channel
  // contributions pull the peak in opposite directions
  REQUIRE((-0.00175) * r.x_A[peak] * (0.0025 * r.x_R[peak]) < 0.0);
}

TEST_CASE("area-weighted regressor sums vanish on the study grids", "[design]") {
  // symmetric grid stars give derivative operators whose columns sum to
  // zero, so the discrete reallocation integrals are conserved to rounding
  for (int n : {12, 20, 30, 40, 50}) {
    Setup s = make_setup(n);
    const Eigen::VectorXd y = bumpy_field(s.d);
    Regressors r = build_regressors(y, wavy_topography(s.d), s.ops, s.WA, s.WR);
    for (const Eigen::VectorXd* x : {&r.x_S, &r.x_A, &r.x_R, &r.x_D}) {
      INFO("n=" << n);
      REQUIRE(std::abs(x->dot(s.d.area)) < 1e-12);
    }
  }
}

TEST_CASE("smooth-channel truncation error shrinks under refinement", "[design]") {
  const double tp = 2.0 * M_PI;
  std::vector<double> err_s, err_d;
  for (int n : {12, 20, 30}) {
    std::vector<Eigen::Vector2d> pts;
    std::vector<double> areas(n * n, 1.0 / (n * n));
    Rng rng(500 + n);
    const double dx = 1.0 / n;
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix)
        pts.emplace_back((ix + 0.5 + 0.25 * (rng.uniform() - 0.5)) * dx,
                         (iy + 0.5 + 0.25 * (rng.uniform() - 0.5)) * dx);
    SpatialDomain d = build_domain(pts, areas, Topology::torus, 1.0, 1.0);
    OperatorSet ops = build_operators(d, build_stars(d, 8));
    InteractionMatrix WA = build_interaction(d, KernelSpec{0.15});
    InteractionMatrix WR = build_interaction(d, KernelSpec{0.4});

    const int N = d.size();
    Eigen::VectorXd y(N), s(N), xs_true(N), xd_true(N);
    for (int i = 0; i < N; ++i) {
      const double x = d.z(i, 0), v = d.z(i, 1);
      y[i] = 1.5 + 0.5 * std::sin(tp * x) * std::cos(tp * v) +
             0.25 * std::cos(tp * v);
      s[i] = 0.4 * std::sin(tp * v) + 0.3 * std::cos(tp * x);
      const double y1 = 0.5 * tp * std::cos(tp * x) * std::cos(tp * v);
      const double y2 = -0.5 * tp * std::sin(tp * x) * std::sin(tp * v) -
                        0.25 * tp * std::sin(tp * v);
      const double s1 = -0.3 * tp * std::sin(tp * x);
      const double s11 = -0.3 * tp * tp * std::cos(tp * x);
      const double s2 = 0.4 * tp * std::cos(tp * v);
      const double s22 = -0.4 * tp * tp * std::sin(tp * v);
      xs_true[i] = y1 * s1 + y[i] * s11 + y2 * s2 + y[i] * s22;
      xd_true[i] = -tp * tp * std::sin(tp * x) * std::cos(tp * v) -
                   0.25 * tp * tp * std::cos(tp * v);
    }
    Regressors r = build_regressors(y, s, ops, WA, WR);
    err_s.push_back(std::sqrt((r.x_S - xs_true).squaredNorm() / N));
    err_d.push_back(std::sqrt((r.x_D - xd_true).squaredNorm() / N));
  }
  REQUIRE(err_s[1] < err_s[0]);
  REQUIRE(err_s[2] < err_s[1]);
  REQUIRE(err_d[1] < err_d[0]);
  REQUIRE(err_d[2] < err_d[1]);
  REQUIRE(err_s[2] < 0.55);
  REQUIRE(err_d[2] < 0.55);
}

TEST_CASE("correction matrices represent the channel maps", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y = bumpy_field(s.d);
  const Eigen::VectorXd topo = wavy_topography(s.d);
  CorrectionSet c = build_corrections(y, topo, s.ops, s.WA, s.WR);

  const int n = s.d.size();
  const Eigen::VectorXd u = pseudo_random(n, -1.0, 1.0);
  const Eigen::VectorXd v = pseudo_random(n, 0.0, 2.0).cwiseSqrt();

  auto close = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).cwiseAbs().maxCoeff() <
           1e-10 * std::max(1.0, b.cwiseAbs().maxCoeff());
  };
  REQUIRE(close(c.A.apply(v), channel_map(v, y, s.ops, s.WA)));
  REQUIRE(close(c.R.apply(v), channel_map(v, y, s.ops, s.WR)));
  REQUIRE(close(c.S.apply(v), topography_map(v, topo, s.ops)));
  REQUIRE(close(c.D.apply(v), (s.ops.M_z1z1 + s.ops.M_z2z2) * v));
  // linearity through the assembled matrices
  REQUIRE(close(c.A.apply(u + v), c.A.apply(u) + c.A.apply(v)));
  REQUIRE(close(c.A.apply(u + v),
                channel_map(u, y, s.ops, s.WA) + channel_map(v, y, s.ops, s.WA)));
}

TEST_CASE("interaction corrections vanish for a zero field", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(s.d.size());
  CorrectionSet c = build_corrections(y, Eigen::VectorXd(), s.ops, s.WA, s.WR);
  const Eigen::VectorXd v = pseudo_random(s.d.size(), -1.0, 1.0);
  REQUIRE(c.A.apply(v).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(c.R.apply(v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("diffusion correction annihilates constants", "[design]") {
  Setup s = make_setup(12);
  CorrectionSet c = build_corrections(bumpy_field(s.d), Eigen::VectorXd(), s.ops,
                                      s.WA, s.WR);
  REQUIRE(c.D.apply(Eigen::VectorXd::Ones(s.d.size())).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("single-channel filter matches the diffusion-only closed form", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y = bumpy_field(s.d);
  CorrectionSet c = build_corrections(y, Eigen::VectorXd(), s.ops, s.WA, s.WR);

  const int n = s.d.size();
  const double tau = 0.5, rho_phi = 0.01, rho_D = 0.00525;
  const double scale = 1.0 - tau * rho_phi / 2.0;

  Eigen::MatrixXd P = scale * Eigen::MatrixXd::Identity(n, n);
  c.S.add_scaled(P, -tau * 0.0 / 2.0);
  c.A.add_scaled(P, -tau * 0.0 / 2.0);
  c.R.add_scaled(P, -tau * 0.0 / 2.0);
  c.D.add_scaled(P, -tau * rho_D / 2.0);

  Eigen::MatrixXd P_direct =
      scale * Eigen::MatrixXd::Identity(n, n) -
      (tau * rho_D / 2.0) * Eigen::MatrixXd(s.ops.M_z1z1 + s.ops.M_z2z2);

  const Eigen::VectorXd rhs_vec =
      Eigen::VectorXd::Constant(n, 0.01) + 0.01 * y +
      0.00525 * ((s.ops.M_z1z1 + s.ops.M_z2z2) * y);
  const Eigen::VectorXd d1 = P.partialPivLu().solve(rhs_vec);
  const Eigen::VectorXd d2 = P_direct.partialPivLu().solve(rhs_vec);
  REQUIRE((d1 - d2).cwiseAbs().maxCoeff() < 1e-12 * d1.cwiseAbs().maxCoeff());
}

TEST_CASE("design bundles the two periods consistently", "[design]") {
  Setup s = make_setup(12);
  const Eigen::VectorXd y0 = bumpy_field(s.d);
  const Eigen::VectorXd y1 = y0 * 1.05;
  SardDesign d = build_design(y0, y1, Eigen::VectorXd(), 0.25, s.ops, s.WA, s.WR);
  REQUIRE(d.tau == 0.25);
  REQUIRE_FALSE(d.has_S);
  REQUIRE((d.dy - (y1 - y0) / 0.25).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE(d.size() == s.d.size());

  REQUIRE_THROWS_AS(
      build_design(y0, y1.head(10), Eigen::VectorXd(), 0.25, s.ops, s.WA, s.WR),
      DimensionMismatch);
  REQUIRE_THROWS_AS(
      build_design(y0, y1, Eigen::VectorXd(), 0.0, s.ops, s.WA, s.WR), OutOfRange);
}

TEST_CASE("scale identification inverts exactly on exponential aggregates", "[design]") {
  const double tau = 0.75, phi = 0.01, alpha = 0.01, area = 2.5;
  const double rho_phi = 0.013;
  const double scale = 1.0 - tau * rho_phi / 2.0;

  TildeCoefficients t;
  t.alpha = alpha / scale;
  t.phi = phi / scale;
  t.gamma_A = -0.00175 / scale;
  t.gamma_R = 0.0025 / scale;
  t.gamma_D = 0.00525 / scale;
  t.rho_A = (tau * -0.00175 / 2.0) / scale;
  t.rho_D = (tau * 0.00525 / 2.0) / scale;

  const double c = alpha * area / phi;
  const double Y0 = 1.3;
  const double Ytau = (Y0 + c) * std::exp(phi * tau) - c;

  StructuralParams p = back_solve(t, Y0, Ytau, tau, area);
  REQUIRE(p.rho_phi == Catch::Approx(rho_phi).margin(1e-12));
  REQUIRE(p.scale == Catch::Approx(scale).margin(1e-12));
  REQUIRE(p.alpha == Catch::Approx(alpha).margin(1e-12));
  REQUIRE(p.phi == Catch::Approx(phi).margin(1e-12));
  REQUIRE(p.gamma_A == Catch::Approx(-0.00175).margin(1e-12));
  REQUIRE(p.gamma_R == Catch::Approx(0.0025).margin(1e-12));
  REQUIRE(p.gamma_D == Catch::Approx(0.00525).margin(1e-12));
  REQUIRE(p.rho_A == Catch::Approx(-0.00175).margin(1e-12));
  REQUIRE(p.rho_D == Catch::Approx(0.00525).margin(1e-12));
}

TEST_CASE("scale factor anchor converts the topography coefficient", "[design]") {
  const double tau = 1.0;
  TildeCoefficients t;
  t.phi = 0.03;
  t.gamma_S = 1.08e-05;
  const double Y0 = 1.0;
  const double Ytau = std::exp(t.phi * tau * 0.8282);

  StructuralParams p = back_solve(t, Y0, Ytau, tau);
  REQUIRE(p.scale == Catch::Approx(0.8282).margin(1e-12));
  REQUIRE(p.gamma_S == Catch::Approx(1.08e-05 * 0.8282).margin(1e-18));
  REQUIRE(p.gamma_S == Catch::Approx(8.94e-06).margin(5e-9));
}

TEST_CASE("degenerate aggregates are rejected", "[design]") {
  TildeCoefficients t;
  t.phi = 0.0;
  REQUIRE_THROWS_AS(back_solve(t, 1.0, 1.1, 1.0), ZeroPhiTilde);
  t.phi = 0.02;
  REQUIRE_THROWS_AS(back_solve(t, 1.0, -0.5, 1.0), DegenerateAggregate);
  REQUIRE_THROWS_AS(back_solve(t, 1.0, 1.1, 0.0), OutOfRange);
}
