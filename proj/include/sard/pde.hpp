#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "sard/common.hpp"
#include "sard/fftconv.hpp"
#include "sard/gfdm.hpp"
#include "sard/geometry.hpp"
#include "sard/kernels.hpp"

namespace sard {

// Parameters of the growth-and-reallocation field equation
//   dy/dt = a + phi*y + gamma_S div(y grad S) + gamma_A div(y grad K_hA*y)
//         + gamma_R div(y grad K_hR*y) + gamma_D lap(y).
struct ModelParams {
  double alpha = 0.0;  // constant source a(t,z) = alpha
  double phi = 0.0;
  double gamma_S = 0.0;
  double gamma_A = 0.0;
  double gamma_R = 0.0;
  double gamma_D = 0.0;
  KernelSpec kernel_A{0.15};
  KernelSpec kernel_R{0.4};
  Eigen::VectorXd s;  // exogenous S field; empty disables the S term

  void validate() const {
    if (gamma_D < 0.0)
      throw OutOfRange("ModelParams: gamma_D must be nonnegative (ill-posed otherwise)");
  }
};

struct PdeState {
  double t = 0.0;
  Eigen::VectorXd y;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> states;
};

namespace detail {

// reallocation divergence term: M_z1(y .* M_z1 g) + M_z2(y .* M_z2 g)
inline Eigen::VectorXd divergence_term(const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& g1,
                                       const Eigen::VectorXd& g2,
                                       const OperatorSet& ops) {
  return ops.M_z1 * y.cwiseProduct(g1) + ops.M_z2 * y.cwiseProduct(g2);
}

}  // namespace detail

// Time derivative of the field. The operator-based overload is the hot path;
// the matrix overload wraps it for callers holding interaction matrices.
inline Eigen::VectorXd rhs(const Eigen::VectorXd& y, const ModelParams& p,
                           const OperatorSet& ops, const InteractionOp& WA,
                           const InteractionOp& WR) {
  if (!y.allFinite()) throw NonFiniteField("rhs: non-finite field");
  const int n = static_cast<int>(y.size());
  Eigen::VectorXd out = Eigen::VectorXd::Constant(n, p.alpha);
  if (p.phi != 0.0) out += p.phi * y;
  if (p.gamma_S != 0.0 && p.s.size() > 0) {
    if (p.s.size() != n) throw DimensionMismatch("rhs: S field size mismatch");
    out += p.gamma_S * detail::divergence_term(y, ops.M_z1 * p.s, ops.M_z2 * p.s, ops);
  }
  if (p.gamma_A != 0.0) {
    const Eigen::VectorXd wy = WA.apply(y);
    out += p.gamma_A * detail::divergence_term(y, ops.M_z1 * wy, ops.M_z2 * wy, ops);
  }
  if (p.gamma_R != 0.0) {
    const Eigen::VectorXd wy = WR.apply(y);
    out += p.gamma_R * detail::divergence_term(y, ops.M_z1 * wy, ops.M_z2 * wy, ops);
  }
  if (p.gamma_D != 0.0) out += p.gamma_D * (ops.M_z1z1 * y + ops.M_z2z2 * y);
  return out;
}

inline Eigen::VectorXd rhs(const PdeState& state, const ModelParams& p,
                           const OperatorSet& ops, const InteractionMatrix& WA,
                           const InteractionMatrix& WR) {
  MatrixInteractionOp a(WA), r(WR);
  return rhs(state.y, p, ops, a, r);
}

// Diffusion stability bound for the explicit integrator.
inline double cfl_dt(double grid_spacing, const ModelParams& p, double c = 0.2) {
  if (p.gamma_D <= 0.0) return c * grid_spacing;  // advective fallback scale
  return c * grid_spacing * grid_spacing / p.gamma_D;
}

// Classic fourth-order Runge-Kutta with fixed step within each sampling
// interval; the step is shrunk to land exactly on every requested sample
// time. Field blow-up is detected and reported rather than propagated.
inline Trajectory integrate(const PdeState& state0, const ModelParams& p,
                            const OperatorSet& ops, const InteractionOp& WA,
                            const InteractionOp& WR,
                            const std::vector<double>& sample_times,
                            double dt_max) {
  p.validate();
  if (!(dt_max > 0.0)) throw OutOfRange("integrate: dt must be positive");
  for (std::size_t k = 0; k < sample_times.size(); ++k) {
    const double prev = k == 0 ? state0.t : sample_times[k - 1];
    if (sample_times[k] < prev)
      throw OutOfRange("integrate: sample times must be nondecreasing");
  }

  constexpr double kBlowup = 1e12;
  Trajectory traj;
  Eigen::VectorXd y = state0.y;
  double t = state0.t;

  auto check = [&](const Eigen::VectorXd& v) {
    if (!v.allFinite()) throw NonFiniteField("integrate: non-finite field");
    if (v.cwiseAbs().maxCoeff() > kBlowup)
      throw StabilityViolation("integrate: field blow-up, reduce dt");
  };

  check(y);
  for (double target : sample_times) {
    if (target > t) {
      const long steps =
          std::max(1L, static_cast<long>(std::ceil((target - t) / dt_max - 1e-12)));
      const double h = (target - t) / static_cast<double>(steps);
      for (long s = 0; s < steps; ++s) {
        const Eigen::VectorXd k1 = rhs(y, p, ops, WA, WR);
        const Eigen::VectorXd k2 = rhs(y + 0.5 * h * k1, p, ops, WA, WR);
        const Eigen::VectorXd k3 = rhs(y + 0.5 * h * k2, p, ops, WA, WR);
        const Eigen::VectorXd k4 = rhs(y + h * k3, p, ops, WA, WR);
        y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        check(y);
      }
      t = target;
    }
    traj.times.push_back(target);
    traj.states.push_back(y);
  }
  return traj;
}

inline Trajectory integrate(const PdeState& state0, const ModelParams& p,
                            const OperatorSet& ops, const InteractionMatrix& WA,
                            const InteractionMatrix& WR,
                            const std::vector<double>& sample_times,
                            double dt_max) {
  MatrixInteractionOp a(WA), r(WR);
  return integrate(state0, p, ops, a, r, sample_times, dt_max);
}

// area-weighted aggregate level Y = sum_i y_i A_i
inline double aggregate_level(const SpatialDomain& d, const Eigen::VectorXd& y) {
  return y.dot(d.area);
}

// Closed-form aggregate under pure growth: Y(t) = (Y0 + aA/phi) e^{phi t} - aA/phi
// with aA = alpha * total area; reallocation terms are aggregate-neutral.
inline double aggregate_closed_form(double Y0, double alpha_total, double phi,
                                    double t) {
  if (phi == 0.0) return Y0 + alpha_total * t;
  const double c = alpha_total / phi;
  return (Y0 + c) * std::exp(phi * t) - c;
}

}  // namespace sard
