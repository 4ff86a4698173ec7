#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sard/particles.hpp"

using namespace sard;

TEST_CASE("free particles perform Brownian motion with variance 2 gamma_D t",
          "[particles]") {
  ModelParams p;
  p.gamma_D = 0.005;
  Rng rng(901);
  // start everyone at the center of a large torus so wrapping never bites
  ParticleEnsemble e;
  e.width = 10.0;
  e.height = 10.0;
  e.X.resize(20000, 2);
  e.X.col(0).setConstant(5.0);
  e.X.col(1).setConstant(5.0);

  const double dt = 0.01;
  for (int s = 0; s < 100; ++s) particle_step(e, p, dt, rng);
  const double t = 1.0;
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd x = e.X.col(c);
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / (x.size() - 1);
    REQUIRE(var == Catch::Approx(2.0 * p.gamma_D * t).epsilon(0.05));
  }
}

TEST_CASE("negative aggregation parameter pulls nearby agents together",
          "[particles]") {
  ModelParams p;
  p.gamma_A = -0.01;
  p.gamma_D = 0.0;
  p.kernel_A = KernelSpec{0.15};
  Rng rng(902);
  ParticleEnsemble e;
  e.X.resize(2, 2);
  e.X << 0.45, 0.5, 0.55, 0.5;
  const double d0 = 0.1;
  particle_step(e, p, 0.05, rng);
  const double d1 = std::abs(e.X(0, 0) - e.X(1, 0));
  REQUIRE(d1 < d0);

  // flipping the sign repels them
  ParticleEnsemble e2;
  e2.X.resize(2, 2);
  e2.X << 0.45, 0.5, 0.55, 0.5;
  p.gamma_A = 0.01;
  Rng rng2(902);
  particle_step(e2, p, 0.05, rng2);
  REQUIRE(std::abs(e2.X(0, 0) - e2.X(1, 0)) > d0);

  // out-of-range agents do not interact
  ParticleEnsemble e3;
  e3.X.resize(2, 2);
  e3.X << 0.3, 0.5, 0.6, 0.5;
  Rng rng3(903);
  particle_step(e3, p, 0.05, rng3);
  REQUIRE(std::abs(e3.X(0, 0) - e3.X(1, 0)) == Catch::Approx(0.3));
}

TEST_CASE("particle dynamics require zero growth terms", "[particles]") {
  ModelParams p;
  p.phi = 0.01;
  Rng rng(904);
  ParticleEnsemble e;
  e.X.resize(1, 2);
  e.X << 0.5, 0.5;
  REQUIRE_THROWS_AS(particle_step(e, p, 0.01, rng), OutOfRange);
}

TEST_CASE("same seed reproduces the trajectory exactly", "[particles]") {
  ModelParams p;
  p.gamma_A = -0.002;
  p.gamma_D = 0.004;
  p.kernel_A = KernelSpec{0.2};
  Eigen::VectorXd dens = Eigen::VectorXd::Ones(64);

  auto run = [&]() {
    Rng rng(905);
    ParticleEnsemble e = sample_particles(dens, 8, 8, 1.0, 1.0, 500, rng);
    for (int s = 0; s < 20; ++s) particle_step(e, p, 0.01, rng);
    return e.X;
  };
  Eigen::MatrixXd a = run(), b = run();
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sampled positions match the source density and stay in bounds",
          "[particles]") {
  // density concentrated in the left half
  const int n1 = 10, n2 = 10;
  Eigen::VectorXd dens(100);
  for (int iy = 0; iy < n2; ++iy)
    for (int ix = 0; ix < n1; ++ix)
      dens[iy * n1 + ix] = ix < 5 ? 3.0 : 1.0;
  Rng rng(906);
  ParticleEnsemble e = sample_particles(dens, n1, n2, 1.0, 1.0, 40000, rng);
  REQUIRE(e.X.minCoeff() >= 0.0);
  REQUIRE(e.X.maxCoeff() < 1.0);
  const double left =
      (e.X.col(0).array() < 0.5).cast<double>().sum() / e.count();
  REQUIRE(left == Catch::Approx(0.75).margin(0.01));
}

TEST_CASE("kernel density estimate integrates to one and finds the mass",
          "[particles]") {
  Rng rng(907);
  // two-level density: heavy band in the middle third, x-direction
  const int n1 = 30, n2 = 30;
  Eigen::VectorXd dens(900);
  for (int iy = 0; iy < n2; ++iy)
    for (int ix = 0; ix < n1; ++ix)
      dens[iy * n1 + ix] = (ix >= 10 && ix < 20) ? 4.0 : 0.5;
  dens /= dens.sum() / 900.0;  // unit mean so it is a unit-mass density

  ParticleEnsemble e = sample_particles(dens, n1, n2, 1.0, 1.0, 30000, rng);
  Eigen::VectorXd kde = particle_kde(e, n1, n2, 0.04);
  REQUIRE(kde.sum() / 900.0 == Catch::Approx(1.0).margin(1e-12));

  double l1 = 0.0;
  for (int i = 0; i < 900; ++i) l1 += std::abs(kde[i] - dens[i]) / 900.0;
  REQUIRE(l1 < 0.35);  // smoothing bias at the band edges dominates
}

TEST_CASE("ensemble density tracks the field equation in L1", "[particles]") {
  // aggregation + diffusion, short horizon, modest ensemble
  ModelParams p;
  p.gamma_A = -0.004;
  p.gamma_D = 0.004;
  p.kernel_A = KernelSpec{0.15};

  const int g = 30;
  SpatialDomain d = uniform_torus_grid(g, g);
  OperatorSet ops = build_operators(d, build_stars(d, 8));
  InteractionMatrix WA = build_interaction(d, p.kernel_A);
  InteractionMatrix WR = build_interaction(d, p.kernel_R);

  Eigen::VectorXd y0(d.size());
  for (int i = 0; i < d.size(); ++i) {
    const double dx = d.z(i, 0) - 0.5, dy = d.z(i, 1) - 0.5;
    y0[i] = std::exp(-(dx * dx + dy * dy) / (2.0 * 0.15 * 0.15));
  }
  y0 /= y0.dot(d.area);

  const double T = 0.25;
  Trajectory tr =
      integrate({0.0, y0}, p, ops, WA, WR, {T}, cfl_dt(1.0 / g, p));

  auto l1_for = [&](int n_agents, std::uint64_t seed) {
    Rng rng(seed);
    ParticleEnsemble e = sample_particles(y0, g, g, 1.0, 1.0, n_agents, rng);
    const int steps = 50;
    for (int s = 0; s < steps; ++s) particle_step(e, p, T / steps, rng);
    Eigen::VectorXd kde = particle_kde(e, g, g, 0.045);
    double l1 = 0.0;
    for (int i = 0; i < d.size(); ++i)
      l1 += std::abs(kde[i] - tr.states[0][i]) * d.area[i];
    return l1;
  };

  const double e_small = l1_for(3000, 31);
  const double e_big = l1_for(12000, 31);
  REQUIRE(e_big < e_small);
  REQUIRE(e_big < 0.5);
}
