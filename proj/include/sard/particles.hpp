#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "sard/common.hpp"
#include "sard/geometry.hpp"
#include "sard/kernels.hpp"
#include "sard/pde.hpp"

namespace sard {

// Interacting-agent system on the torus: each agent diffuses with intensity
// sqrt(2 gamma_D) and drifts down/up the kernel-smoothed density of the
// others. Used as the mean-field cross-check of the field equation, so the
// growth terms are absent by construction (phi = 0, a = 0).
struct ParticleEnsemble {
  Eigen::Matrix<double, Eigen::Dynamic, 2> X;
  double t = 0.0;
  double width = 1.0, height = 1.0;

  int count() const { return static_cast<int>(X.rows()); }
};

// Draw initial positions from a density given on an n1 x n2 uniform torus
// grid: pick a cell proportional to its mass, then uniformly within it.
inline ParticleEnsemble sample_particles(const Eigen::VectorXd& density, int n1,
                                         int n2, double width, double height,
                                         int n_agents, Rng& rng) {
  if (density.size() != static_cast<Eigen::Index>(n1) * n2)
    throw DimensionMismatch("sample_particles: density size mismatch");
  if (density.minCoeff() < 0.0)
    throw OutOfRange("sample_particles: negative density");
  const int n = n1 * n2;
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += density[i];
    cdf[i] = acc;
  }
  if (!(acc > 0.0)) throw OutOfRange("sample_particles: zero total density");
  const double dx = width / n1, dy = height / n2;

  ParticleEnsemble e;
  e.width = width;
  e.height = height;
  e.X.resize(n_agents, 2);
  for (int a = 0; a < n_agents; ++a) {
    const double u = rng.uniform() * acc;
    const int cell = static_cast<int>(
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    const int ix = cell % n1, iy = cell / n1;
    e.X(a, 0) = (ix + rng.uniform()) * dx;
    e.X(a, 1) = (iy + rng.uniform()) * dy;
  }
  return e;
}

// One Euler-Maruyama step. Pair interactions are summed over a cell list
// with cutoff max(h_A, h_R) in deterministic index order.
inline void particle_step(
    ParticleEnsemble& e, const ModelParams& p, double dt, Rng& rng,
    const std::function<Eigen::Vector2d(const Eigen::Vector2d&)>& grad_S = {}) {
  if (p.phi != 0.0 || p.alpha != 0.0)
    throw OutOfRange("particle_step: agent system requires phi = 0 and a = 0");
  const int n = e.count();
  if (n == 0) return;

  const bool use_A = p.gamma_A != 0.0;
  const bool use_R = p.gamma_R != 0.0;
  double cutoff = 0.0;
  if (use_A) cutoff = std::max(cutoff, p.kernel_A.h);
  if (use_R) cutoff = std::max(cutoff, p.kernel_R.h);

  Eigen::Matrix<double, Eigen::Dynamic, 2> drift(n, 2);
  drift.setZero();

  if (cutoff > 0.0) {
    CellIndex index(e.X, Topology::torus, e.width, e.height,
                    std::max(cutoff, 1e-6));
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector2d xi = e.X.row(i);
      Eigen::Vector2d sum_A = Eigen::Vector2d::Zero();
      Eigen::Vector2d sum_R = Eigen::Vector2d::Zero();
      index.for_each_within(xi, cutoff, [&](int j, double d2) {
        if (j == i) return;
        Eigen::Vector2d off = xi - Eigen::Vector2d(e.X.row(j));
        off.x() -= e.width * std::round(off.x() / e.width);
        off.y() -= e.height * std::round(off.y() / e.height);
        (void)d2;
        if (use_A) sum_A += kernel_gradient(p.kernel_A, off);
        if (use_R) sum_R += kernel_gradient(p.kernel_R, off);
      });
      Eigen::Vector2d d = -p.gamma_A * inv_n * sum_A - p.gamma_R * inv_n * sum_R;
      drift.row(i) = d;
    }
  }
  if (p.gamma_S != 0.0 && grad_S) {
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector2d g = grad_S(Eigen::Vector2d(e.X.row(i)));
      drift.row(i) -= p.gamma_S * g;
    }
  }

  const double noise = std::sqrt(2.0 * std::max(p.gamma_D, 0.0) * dt);
  for (int i = 0; i < n; ++i) {
    double x = e.X(i, 0) + dt * drift(i, 0) + noise * rng.normal();
    double y = e.X(i, 1) + dt * drift(i, 1) + noise * rng.normal();
    x -= e.width * std::floor(x / e.width);
    y -= e.height * std::floor(y / e.height);
    e.X(i, 0) = x;
    e.X(i, 1) = y;
  }
  e.t += dt;
}

// Gaussian kernel-density estimate of the ensemble on a uniform torus grid,
// normalized to unit mass. Minimum-image distances, 4-sigma truncation.
inline Eigen::VectorXd particle_kde(const ParticleEnsemble& e, int n1, int n2,
                                    double bandwidth) {
  if (!(bandwidth > 0.0)) throw OutOfRange("particle_kde: bandwidth must be positive");
  const double dx = e.width / n1, dy = e.height / n2;
  Eigen::VectorXd dens = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n1) * n2);
  const double r = 4.0 * bandwidth;
  const int rx = static_cast<int>(std::ceil(r / dx));
  const int ry = static_cast<int>(std::ceil(r / dy));
  const double inv2s2 = 1.0 / (2.0 * bandwidth * bandwidth);

  for (int a = 0; a < e.count(); ++a) {
    const double px = e.X(a, 0), py = e.X(a, 1);
    const int cx = static_cast<int>(std::floor(px / dx));
    const int cy = static_cast<int>(std::floor(py / dy));
    for (int gy = cy - ry; gy <= cy + ry; ++gy) {
      const int wy = ((gy % n2) + n2) % n2;
      double oy = (gy + 0.5) * dy - py;
      for (int gx = cx - rx; gx <= cx + rx; ++gx) {
        const int wx = ((gx % n1) + n1) % n1;
        const double ox = (gx + 0.5) * dx - px;
        const double d2 = ox * ox + oy * oy;
        if (d2 <= r * r)
          dens[static_cast<Eigen::Index>(wy) * n1 + wx] += std::exp(-d2 * inv2s2);
      }
    }
  }
  const double mass = dens.sum() * dx * dy;
  if (mass > 0.0) dens /= mass;
  return dens;
}

}  // namespace sard
