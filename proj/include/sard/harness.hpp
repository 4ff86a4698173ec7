#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "sard/common.hpp"
#include "sard/design.hpp"
#include "sard/diagnostics.hpp"
#include "sard/estimators.hpp"
#include "sard/fftconv.hpp"
#include "sard/gfdm.hpp"
#include "sard/io.hpp"
#include "sard/kernels.hpp"
#include "sard/pde.hpp"

namespace sard {

inline constexpr const char* kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// initial fields

struct FieldBump {
  double cx = 0.5, cy = 0.5;
  double amplitude = 1.0;
  double sigma = 0.1;
};

struct PlateauSpec {
  double cx = 0.5, cy = 0.5;
  double r_flat = 0.2;   // flat at the level inside this radius
  double r_zero = 0.45;  // zero outside this radius
  double level = 1.0;
  bool square = false;  // square level sets (Chebyshev radius) if set
};

namespace detail {

inline Eigen::Vector2d wrapped_offset(const SpatialDomain& d, int i, double cx,
                                      double cy) {
  Eigen::Vector2d v(d.z(i, 0) - cx, d.z(i, 1) - cy);
  if (d.topology == Topology::torus) {
    v.x() -= d.width * std::round(v.x() / d.width);
    v.y() -= d.height * std::round(v.y() / d.height);
  }
  return v;
}

}  // namespace detail

// base level plus gaussian bumps, nearest-image distances on the torus
inline Eigen::VectorXd mixture_field(const SpatialDomain& d,
                                     const std::vector<FieldBump>& bumps,
                                     double base) {
  const int n = d.size();
  Eigen::VectorXd y = Eigen::VectorXd::Constant(n, base);
  for (const FieldBump& b : bumps) {
    if (!(b.sigma > 0.0))
      throw OutOfRange("mixture_field: sigma must be positive");
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int i = 0; i < n; ++i) {
      const double r2 = detail::wrapped_offset(d, i, b.cx, b.cy).squaredNorm();
      y[i] += b.amplitude * std::exp(-r2 * inv);
    }
  }
  return y;
}

// symmetric plateau: flat centre, smoothstep taper, zero rim; level sets are
// circles by default or squares when the spec asks for the Chebyshev radius
inline Eigen::VectorXd plateau_field(const SpatialDomain& d,
                                     const PlateauSpec& p) {
  if (!(p.r_zero > p.r_flat) || !(p.r_flat >= 0.0))
    throw OutOfRange("plateau_field: need 0 <= r_flat < r_zero");
  const int n = d.size();
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector2d off = detail::wrapped_offset(d, i, p.cx, p.cy);
    const double r = p.square ? off.cwiseAbs().maxCoeff() : off.norm();
    if (r <= p.r_flat) {
      y[i] = p.level;
    } else if (r >= p.r_zero) {
      y[i] = 0.0;
    } else {
      const double u = (r - p.r_flat) / (p.r_zero - p.r_flat);
      y[i] = p.level * (1.0 - u * u * (3.0 - 2.0 * u));
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// experiment configuration

struct ExperimentConfig {
  // synthetic domain: unit torus sampled on a fine reference grid
  int ref_grid = 200;
  double width = 1.0, height = 1.0;
  std::vector<long> grid_sizes = {144, 400, 900, 1600, 2500};  // cell counts
  std::vector<double> taus = {0.1, 0.25, 0.5, 0.75, 1.0};
  double tau = 1.0;  // single-design operations

  // observed data instead of a synthetic run
  std::string data_file;
  Topology data_topology = Topology::planar;

  double h_A = 0.15, h_R = 0.4;
  std::vector<double> hA_grid, hR_grid;

  ModelParams truth;  // data-generating parameters for simulation
  std::vector<FieldBump> bumps;
  double base_level = 0.5;
  std::string field_shape = "peaks";  // peaks | plateau
  PlateauSpec plateau;

  double dt_max = 0.0;  // 0: diffusion stability bound
  int error_orders = 10;
  int ml_max_evals = 600;
  long boot_reps = 0;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
  std::vector<FitMethod> methods = {FitMethod::ols_naive, FitMethod::ols,
                                    FitMethod::iv, FitMethod::ml};
  double horizon = 0.0;  // forecast/decomposition years; 0 -> tau
  int snapshots = 10;

  int profile_grid = 100;
  long profile_boot = 200;
  double profile_bandwidth = 0.0;  // 0: Silverman's rule

  ExperimentConfig() {
    truth.alpha = 0.01;
    truth.phi = 0.01;
    truth.gamma_A = -0.00175;
    truth.gamma_R = 0.0025;
    truth.gamma_D = 0.00525;
    truth.kernel_A.h = 0.15;
    truth.kernel_R.h = 0.4;
    bumps = {{0.25, 0.50, 4.0, 0.08},
             {0.70, 0.44, 3.0, 0.06},
             {0.70, 0.56, 3.0, 0.06}};
  }

  void validate() const {
    if (ref_grid < 2) throw ConfigError("ref_grid must be at least 2");
    if (!(width > 0.0) || !(height > 0.0))
      throw ConfigError("domain extent must be positive");
    if (grid_sizes.empty()) throw ConfigError("grid_sizes must be nonempty");
    for (long N : grid_sizes) {
      const long side = std::lround(std::sqrt(static_cast<double>(N)));
      if (side < 2 || side * side != N)
        throw ConfigError("grid size " + std::to_string(N) +
                          " is not a square cell count");
    }
    if (taus.empty()) throw ConfigError("taus must be nonempty");
    for (double t : taus)
      if (!(t > 0.0)) throw ConfigError("taus must be positive");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(h_A > 0.0) || !(h_R > 0.0))
      throw ConfigError("bandwidths must be positive");
    if (error_orders < 1) throw ConfigError("error_orders must be >= 1");
    if (methods.empty()) throw ConfigError("methods must be nonempty");
  }

  static ExperimentConfig from(const Config& c) {
    ExperimentConfig e;
    e.ref_grid = static_cast<int>(c.get_int("ref_grid", e.ref_grid));
    e.width = c.get_double("width", e.width);
    e.height = c.get_double("height", e.height);
    if (c.has("grid_sizes")) e.grid_sizes = c.get_int_list("grid_sizes");
    if (c.has("taus")) e.taus = c.get_double_list("taus");
    e.tau = c.get_double("tau", e.tau);
    e.data_file = c.get_string("data_file", "");
    const std::string topo = c.get_string("topology",
                                          e.data_file.empty() ? "torus" : "planar");
    if (topo == "torus")
      e.data_topology = Topology::torus;
    else if (topo == "planar")
      e.data_topology = Topology::planar;
    else
      throw ConfigError("topology must be torus or planar");
    e.h_A = c.get_double("h_A", e.h_A);
    e.h_R = c.get_double("h_R", e.h_R);
    e.hA_grid = c.get_double_list("hA_grid");
    e.hR_grid = c.get_double_list("hR_grid");
    e.truth.alpha = c.get_double("alpha", e.truth.alpha);
    e.truth.phi = c.get_double("phi", e.truth.phi);
    e.truth.gamma_S = c.get_double("gamma_S", e.truth.gamma_S);
    e.truth.gamma_A = c.get_double("gamma_A", e.truth.gamma_A);
    e.truth.gamma_R = c.get_double("gamma_R", e.truth.gamma_R);
    e.truth.gamma_D = c.get_double("gamma_D", e.truth.gamma_D);
    e.truth.kernel_A.h = e.h_A;
    e.truth.kernel_R.h = e.h_R;

    if (c.has("peak1")) e.bumps.clear();
    for (int k = 1; c.has("peak" + std::to_string(k)); ++k) {
      const auto v = c.get_double_list("peak" + std::to_string(k));
      if (v.size() != 4)
        throw ConfigError("peak" + std::to_string(k) +
                          " must be cx,cy,amplitude,sigma");
      e.bumps.push_back({v[0], v[1], v[2], v[3]});
    }
    e.base_level = c.get_double("base_level", e.base_level);
    e.field_shape = c.get_string("field_shape", e.field_shape);
    if (e.field_shape != "peaks" && e.field_shape != "plateau" &&
        e.field_shape != "plateau_square")
      throw ConfigError("field_shape must be peaks, plateau or plateau_square");
    if (c.has("plateau")) {
      const auto v = c.get_double_list("plateau");
      if (v.size() != 5)
        throw ConfigError("plateau must be cx,cy,r_flat,r_zero,level");
      e.plateau = {v[0], v[1], v[2], v[3], v[4]};
    }
    e.plateau.square = e.field_shape == "plateau_square";

    e.dt_max = c.get_double("dt_max", e.dt_max);
    e.error_orders = static_cast<int>(c.get_int("error_orders", e.error_orders));
    e.ml_max_evals = static_cast<int>(c.get_int("ml_max_evals", e.ml_max_evals));
    e.boot_reps = c.get_int("boot_reps", e.boot_reps);
    e.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<long>(e.seed)));
    e.out_dir = c.get_string("out_dir", e.out_dir);
    if (c.has("methods")) {
      e.methods.clear();
      for (const std::string& part :
           detail::split(c.get_string("methods", ""), ',')) {
        const std::string m = detail::trim(part);
        if (m == "naive")
          e.methods.push_back(FitMethod::ols_naive);
        else if (m == "ols")
          e.methods.push_back(FitMethod::ols);
        else if (m == "iv")
          e.methods.push_back(FitMethod::iv);
        else if (m == "ml")
          e.methods.push_back(FitMethod::ml);
        else if (!m.empty())
          throw ConfigError("unknown method: " + m);
      }
    }
    e.horizon = c.get_double("horizon", e.horizon);
    e.snapshots = static_cast<int>(c.get_int("snapshots", e.snapshots));
    e.profile_grid = static_cast<int>(c.get_int("profile_grid", e.profile_grid));
    e.profile_boot = c.get_int("profile_boot", e.profile_boot);
    e.profile_bandwidth = c.get_double("profile_bandwidth", e.profile_bandwidth);
    e.validate();
    return e;
  }

  Eigen::VectorXd initial_field(const SpatialDomain& d) const {
    return field_shape == "peaks" ? mixture_field(d, bumps, base_level)
                                  : plateau_field(d, plateau);
  }
};

inline std::vector<std::pair<std::string, std::string>> provenance(
    std::uint64_t seed) {
  return {{"tool_version", kToolVersion},
          {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION)},
          {"fftw_version", fftw_version},
          {"seed", std::to_string(seed)}};
}

// ---------------------------------------------------------------------------
// reference simulation and aggregation to cells

struct ReferenceSolution {
  SpatialDomain grid;
  int n1 = 0, n2 = 0;
  Eigen::VectorXd y0;
  std::vector<double> times;
  std::vector<Eigen::VectorXd> states;

  const Eigen::VectorXd& at(double t) const {
    for (std::size_t i = 0; i < times.size(); ++i)
      if (times[i] == t) return states[i];
    throw OutOfRange("reference solution: time not sampled");
  }
};

// truth on the fine torus grid via the fourth-order integrator with FFT
// kernel products; sample_times must be positive and ascending
inline ReferenceSolution simulate_reference(const ExperimentConfig& cfg,
                                            std::vector<double> sample_times) {
  std::sort(sample_times.begin(), sample_times.end());
  sample_times.erase(std::unique(sample_times.begin(), sample_times.end()),
                     sample_times.end());

  ReferenceSolution ref;
  ref.n1 = cfg.ref_grid;
  ref.n2 = cfg.ref_grid;
  ref.grid = uniform_torus_grid(ref.n1, ref.n2, cfg.width, cfg.height);
  ref.y0 = cfg.initial_field(ref.grid);

  const OperatorSet ops = build_operators(ref.grid, build_stars(ref.grid, 8));
  const TorusConvolution WA(ref.n1, ref.n2, cfg.width, cfg.height,
                            cfg.truth.kernel_A);
  const TorusConvolution WR(ref.n1, ref.n2, cfg.width, cfg.height,
                            cfg.truth.kernel_R);

  const double dx = std::min(cfg.width / ref.n1, cfg.height / ref.n2);
  const double dt = cfg.dt_max > 0.0 ? cfg.dt_max : cfl_dt(dx, cfg.truth);

  const Trajectory traj =
      integrate({0.0, ref.y0}, cfg.truth, ops, WA, WR, sample_times, dt);
  ref.times = traj.times;
  ref.states = traj.states;
  return ref;
}

namespace detail {

// exact overlap weights of nc coarse intervals against nf fine intervals
inline std::vector<std::vector<std::pair<int, double>>> overlap_1d(
    int nf, int nc, double extent) {
  const double wf = extent / nf, wc = extent / nc;
  std::vector<std::vector<std::pair<int, double>>> out(
      static_cast<std::size_t>(nc));
  for (int ic = 0; ic < nc; ++ic) {
    const double lo = ic * wc, hi = lo + wc;
    int f0 = static_cast<int>(std::floor(lo / wf));
    int f1 = static_cast<int>(std::ceil(hi / wf));
    f0 = std::max(f0, 0);
    f1 = std::min(f1, nf);
    for (int f = f0; f < f1; ++f) {
      const double ov = std::min(hi, (f + 1) * wf) - std::max(lo, f * wf);
      if (ov > 1e-12 * wf) out[static_cast<std::size_t>(ic)].push_back({f, ov});
    }
  }
  return out;
}

}  // namespace detail

// area-weighted average of a fine uniform-grid density onto a coarse uniform
// partition of the same rectangle; overlaps are exact, so mass is preserved
inline Eigen::VectorXd aggregate_field(const Eigen::VectorXd& fine, int n1f,
                                       int n2f, int n1c, int n2c, double width,
                                       double height) {
  if (fine.size() != static_cast<Eigen::Index>(n1f) * n2f)
    throw DimensionMismatch("aggregate_field: field does not match fine grid");
  if (n1c < 1 || n2c < 1 || n1c > n1f || n2c > n2f)
    throw OutOfRange("aggregate_field: coarse grid must be coarser");

  const auto ox = detail::overlap_1d(n1f, n1c, width);
  const auto oy = detail::overlap_1d(n2f, n2c, height);
  const double inv_area = 1.0 / ((width / n1c) * (height / n2c));

  Eigen::VectorXd out(static_cast<Eigen::Index>(n1c) * n2c);
  for (int icy = 0; icy < n2c; ++icy) {
    for (int icx = 0; icx < n1c; ++icx) {
      double acc = 0.0;
      for (const auto& [fy, wy] : oy[static_cast<std::size_t>(icy)])
        for (const auto& [fx, wx] : ox[static_cast<std::size_t>(icx)])
          acc += fine[static_cast<Eigen::Index>(fy) * n1f + fx] * wx * wy;
      out[static_cast<Eigen::Index>(icy) * n1c + icx] = acc * inv_area;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// estimation workspace for one cell partition

struct GridWorkspace {
  SpatialDomain domain;
  int side = 0;
  OperatorSet ops;
  InteractionMatrix WA, WR;
  ContiguityStructure contig;
};

inline GridWorkspace make_grid_workspace(long cells,
                                         const ExperimentConfig& cfg) {
  GridWorkspace ws;
  ws.side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cells))));
  ws.domain = uniform_torus_grid(ws.side, ws.side, cfg.width, cfg.height);
  ws.ops = build_operators(ws.domain, build_stars(ws.domain, 8));
  ws.WA = build_interaction(ws.domain, {cfg.h_A});
  ws.WR = build_interaction(ws.domain, {cfg.h_R});
  ws.contig = contiguity(ws.domain, ContiguityMethod::rook_on_grid,
                         cfg.error_orders);
  return ws;
}

// ---------------------------------------------------------------------------
// Monte Carlo driver

struct McCell {
  long N = 0;
  double tau = 0.0;
  std::vector<SardFit> fits;          // aligned with the requested methods
  std::vector<Eigen::VectorXd> boot;  // bootstrap SEs; empty when skipped
  ErrorWeights ew;
};

namespace detail {

inline std::string format_tau(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", tau);
  return buf;
}

inline std::string cell_filename(long N, double tau) {
  return "mc_N" + std::to_string(N) + "_tau" + format_tau(tau) + ".csv";
}

inline std::uint64_t cell_seed(std::uint64_t base, long N, double tau) {
  return base * 1000003ULL + static_cast<std::uint64_t>(N) * 101ULL +
         static_cast<std::uint64_t>(std::lround(tau * 1000.0));
}

// pull one named coefficient (and its errors) out of a fit, empty if absent
inline void push_named(std::vector<std::string>& row, const SardFit& fit,
                       const Eigen::VectorXd* boot, const std::string& name,
                       int what) {
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    if (fit.names[i] != name) continue;
    const Eigen::Index k = static_cast<Eigen::Index>(i);
    if (what == 0)
      row.push_back(fmt17(fit.beta[k]));
    else if (what == 1)
      row.push_back(fmt17(fit.se[k]));
    else
      row.push_back(boot && boot->size() > 0 ? fmt17((*boot)[k]) : "");
    return;
  }
  row.push_back("");
}

}  // namespace detail

// column layout of a per-cell result file; gamma_S never appears because the
// synthetic experiment has no topography channel
inline std::vector<std::string> mc_cell_columns() {
  return {"method",      "alpha",       "phi",          "gamma_A",
          "gamma_R",     "gamma_D",     "rho_A",        "rho_R",
          "rho_D",       "lambda",      "se_alpha",     "se_phi",
          "se_gamma_A",  "se_gamma_R",  "se_gamma_D",   "boot_alpha",
          "boot_phi",    "boot_gamma_A","boot_gamma_R", "boot_gamma_D",
          "loglik",      "aicc",        "mse",          "sigma2",
          "k",           "n",           "min_F",        "weak",
          "converged",   "q_hat"};
}

// one Monte Carlo cell: aggregate the truth, build the design, run the
// requested estimators; the error-weight rings come from the IV residuals
// (OLS when IV is unavailable)
inline McCell run_mc_cell(const GridWorkspace& ws, const Eigen::VectorXd& y0c,
                          const Eigen::VectorXd& y1c, double tau,
                          const ExperimentConfig& cfg) {
  McCell cell;
  cell.N = ws.domain.size();
  cell.tau = tau;

  const SardDesign d = build_design(y0c, y1c, Eigen::VectorXd(), tau, ws.ops,
                                    ws.WA, ws.WR);

  bool need_ml = false;
  for (FitMethod m : cfg.methods) need_ml |= m == FitMethod::ml;
  if (need_ml) {
    Eigen::VectorXd seed_resid;
    try {
      seed_resid = fit_iv(d).residuals;
    } catch (const Error&) {
      seed_resid = fit_ols(d).residuals;
    }
    cell.ew = estimate_error_weights(seed_resid, ws.contig, cfg.error_orders);
  }

  const std::uint64_t bseed = detail::cell_seed(cfg.seed, cell.N, tau);
  for (FitMethod m : cfg.methods) {
    SardFit fit;
    switch (m) {
      case FitMethod::ols_naive:
        fit = fit_ols(d, true);
        break;
      case FitMethod::ols:
        fit = fit_ols(d);
        break;
      case FitMethod::iv:
        fit = fit_iv(d);
        break;
      case FitMethod::ml: {
        MlOptions opt;
        opt.max_evals = cfg.ml_max_evals;
        fit = fit_ml(d, &cell.ew, opt);
        break;
      }
    }
    Eigen::VectorXd bse;
    if (cfg.boot_reps > 1 && m != FitMethod::ml)
      bse = bootstrap_se(d, fit, static_cast<int>(cfg.boot_reps), bseed);
    cell.fits.push_back(std::move(fit));
    cell.boot.push_back(std::move(bse));
  }
  return cell;
}

inline TextTable mc_cell_table(const McCell& cell) {
  TextTable t;
  t.names = mc_cell_columns();
  for (std::size_t f = 0; f < cell.fits.size(); ++f) {
    const SardFit& fit = cell.fits[f];
    const Eigen::VectorXd* boot = &cell.boot[f];
    std::vector<std::string> row;
    row.push_back(method_name(fit.method));
    for (const char* nm : {"alpha", "phi", "gamma_A", "gamma_R", "gamma_D",
                           "rho_A", "rho_R", "rho_D"})
      detail::push_named(row, fit, nullptr, nm, 0);
    row.push_back(fit.method == FitMethod::ml ? fmt17(fit.lambda) : "");
    for (const char* nm : {"alpha", "phi", "gamma_A", "gamma_R", "gamma_D"})
      detail::push_named(row, fit, nullptr, nm, 1);
    for (const char* nm : {"alpha", "phi", "gamma_A", "gamma_R", "gamma_D"})
      detail::push_named(row, fit, boot, nm, 2);
    row.push_back(fmt17(fit.loglik));
    row.push_back(fmt17(aicc(fit.loglik, fit.k, fit.n)));
    row.push_back(fmt17(mse(fit)));
    row.push_back(fmt17(fit.sigma2));
    row.push_back(std::to_string(fit.k));
    row.push_back(std::to_string(fit.n));
    row.push_back(fit.first_stage_F.size() > 0
                      ? fmt17(fit.first_stage_F.minCoeff())
                      : "");
    row.push_back(fit.weak_instruments ? "1" : "0");
    row.push_back(fit.converged ? "1" : "0");
    row.push_back(std::to_string(cell.ew.Q_hat));
    t.rows.push_back(std::move(row));
  }
  return t;
}

// summary across completed cells, regenerated by parsing the per-cell files
// so resumed and fresh runs emit identical bytes
inline TextTable mc_summary_from_files(const ExperimentConfig& cfg) {
  TextTable s;
  s.names = {"N",        "tau",       "method",   "alpha",   "phi",
             "gamma_A",  "gamma_R",   "gamma_D",  "bias_alpha",
             "bias_phi", "bias_gamma_A", "bias_gamma_R", "bias_gamma_D",
             "lambda",   "loglik",    "aicc",     "mse",     "q_hat"};
  const double truth[5] = {cfg.truth.alpha, cfg.truth.phi, cfg.truth.gamma_A,
                           cfg.truth.gamma_R, cfg.truth.gamma_D};
  for (long N : cfg.grid_sizes) {
    for (double tau : cfg.taus) {
      const std::string path =
          (std::filesystem::path(cfg.out_dir) / detail::cell_filename(N, tau))
              .string();
      const TextTable cell = read_table(path);
      const int cm = cell.require_col("method");
      const int cq = cell.require_col("q_hat");
      const int cl = cell.require_col("lambda");
      const int ccoef[5] = {cell.require_col("alpha"),
                            cell.require_col("phi"),
                            cell.require_col("gamma_A"),
                            cell.require_col("gamma_R"),
                            cell.require_col("gamma_D")};
      const int cll = cell.require_col("loglik");
      const int cai = cell.require_col("aicc");
      const int cms = cell.require_col("mse");
      for (const auto& row : cell.rows) {
        std::vector<std::string> out;
        out.push_back(std::to_string(N));
        out.push_back(detail::format_tau(tau));
        out.push_back(row[static_cast<std::size_t>(cm)]);
        for (int j = 0; j < 5; ++j)
          out.push_back(row[static_cast<std::size_t>(ccoef[j])]);
        for (int j = 0; j < 5; ++j) {
          const std::string& est = row[static_cast<std::size_t>(ccoef[j])];
          out.push_back(
              est.empty() ? ""
                          : fmt17(parse_double(est, "summary") - truth[j]));
        }
        out.push_back(row[static_cast<std::size_t>(cl)]);
        out.push_back(row[static_cast<std::size_t>(cll)]);
        out.push_back(row[static_cast<std::size_t>(cai)]);
        out.push_back(row[static_cast<std::size_t>(cms)]);
        out.push_back(row[static_cast<std::size_t>(cq)]);
        s.rows.push_back(std::move(out));
      }
    }
  }
  return s;
}

// Full experiment sweep. Every completed cell is written immediately, cells
// whose file already exists are skipped, and the run is fully deterministic,
// so interrupted sweeps resume where they stopped and produce the same bytes.
inline TextTable run_montecarlo(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);

  std::vector<std::pair<long, double>> pending;
  for (long N : cfg.grid_sizes)
    for (double tau : cfg.taus)
      if (!std::filesystem::exists(std::filesystem::path(cfg.out_dir) /
                                   detail::cell_filename(N, tau)))
        pending.push_back({N, tau});

  if (!pending.empty()) {
    const ReferenceSolution ref = simulate_reference(cfg, cfg.taus);
    long current_N = -1;
    GridWorkspace ws;
    Eigen::VectorXd y0c;
    for (const auto& [N, tau] : pending) {
      if (N != current_N) {
        ws = make_grid_workspace(N, cfg);
        y0c = aggregate_field(ref.y0, ref.n1, ref.n2, ws.side, ws.side,
                              cfg.width, cfg.height);
        current_N = N;
      }
      const Eigen::VectorXd y1c = aggregate_field(
          ref.at(tau), ref.n1, ref.n2, ws.side, ws.side, cfg.width, cfg.height);
      const McCell cell = run_mc_cell(ws, y0c, y1c, tau, cfg);
      const std::filesystem::path path =
          std::filesystem::path(cfg.out_dir) / detail::cell_filename(N, tau);
      const std::filesystem::path tmp = path.string() + ".tmp";
      write_table(tmp.string(), mc_cell_table(cell));
      std::filesystem::rename(tmp, path);
    }
  }

  const TextTable summary = mc_summary_from_files(cfg);
  write_table(
      (std::filesystem::path(cfg.out_dir) / "mc_summary.csv").string(),
      summary);
  return summary;
}

// ---------------------------------------------------------------------------
// bandwidth grid search

struct BandwidthCell {
  double h_A = 0.0, h_R = 0.0;
  double aicc_value = 0.0;
  SardFit fit;
};

struct BandwidthSearchResult {
  std::vector<BandwidthCell> table;
  int best = -1;
};

// ML fit per bandwidth combination, lowest AICc wins; the GFDM operators are
// bandwidth-independent and shared
inline BandwidthSearchResult bandwidth_search(
    const SpatialDomain& dom, const OperatorSet& ops,
    const ContiguityStructure& contig, const Eigen::VectorXd& y0,
    const Eigen::VectorXd& y1, const Eigen::VectorXd& s, double tau,
    const std::vector<double>& hA_grid, const std::vector<double>& hR_grid,
    int error_orders, const MlOptions& opt = {}) {
  if (hA_grid.empty() || hR_grid.empty())
    throw OutOfRange("bandwidth_search: empty bandwidth grid");

  BandwidthSearchResult res;
  for (double hA : hA_grid) {
    const InteractionMatrix WA = build_interaction(dom, {hA});
    for (double hR : hR_grid) {
      const InteractionMatrix WR = build_interaction(dom, {hR});
      const SardDesign d = build_design(y0, y1, s, tau, ops, WA, WR);
      Eigen::VectorXd seed_resid;
      try {
        seed_resid = fit_iv(d).residuals;
      } catch (const Error&) {
        seed_resid = fit_ols(d).residuals;
      }
      const ErrorWeights ew =
          estimate_error_weights(seed_resid, contig, error_orders);
      BandwidthCell cell;
      cell.h_A = hA;
      cell.h_R = hR;
      cell.fit = fit_ml(d, &ew, opt);
      cell.aicc_value = aicc(cell.fit.loglik, cell.fit.k, cell.fit.n);
      res.table.push_back(std::move(cell));
    }
  }
  for (std::size_t i = 0; i < res.table.size(); ++i)
    if (res.best < 0 ||
        res.table[i].aicc_value <
            res.table[static_cast<std::size_t>(res.best)].aicc_value)
      res.best = static_cast<int>(i);
  return res;
}

// ---------------------------------------------------------------------------
// forward maps: decomposition and forecasting

// everything needed to advance a field on the estimation domain
struct ForwardModel {
  const SpatialDomain* domain = nullptr;
  const OperatorSet* ops = nullptr;
  const InteractionMatrix* WA = nullptr;
  const InteractionMatrix* WR = nullptr;
  Eigen::VectorXd s;  // empty when the model has no topography channel
};

// one step of the fitted discrete-time model: the equation is solved for the
// rate dy, with the correction matrices rebuilt from the current field, and
// the field advanced by step * dy
inline Eigen::VectorXd one_step(const ForwardModel& fm,
                                const TildeCoefficients& c,
                                const Eigen::VectorXd& y, double step) {
  if (!fm.domain || !fm.ops || !fm.WA || !fm.WR)
    throw DimensionMismatch("one_step: incomplete forward model");
  const int n = static_cast<int>(y.size());
  if (fm.domain->size() != n)
    throw DimensionMismatch("one_step: field/domain size mismatch");

  const Regressors reg = build_regressors(y, fm.s, *fm.ops, *fm.WA, *fm.WR);
  Eigen::VectorXd b = Eigen::VectorXd::Constant(n, c.alpha);
  b += c.phi * y;
  if (fm.s.size() > 0) b += c.gamma_S * reg.x_S;
  b += c.gamma_A * reg.x_A + c.gamma_R * reg.x_R + c.gamma_D * reg.x_D;

  const CorrectionSet ms = build_corrections(y, fm.s, *fm.ops, *fm.WA, *fm.WR);
  const bool has_S = fm.s.size() > 0;

  Eigen::VectorXd dy;
  if (ms.A.dense) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n);
    if (has_S) ms.S.add_scaled(P, -c.rho_S);
    ms.A.add_scaled(P, -c.rho_A);
    ms.R.add_scaled(P, -c.rho_R);
    ms.D.add_scaled(P, -c.rho_D);
    dy = P.partialPivLu().solve(b);
  } else {
    Eigen::SparseMatrix<double> P(n, n);
    P.setIdentity();
    if (has_S) P -= c.rho_S * ms.S.Ms;
    P -= c.rho_A * ms.A.Ms;
    P -= c.rho_R * ms.R.Ms;
    P -= c.rho_D * ms.D.Ms;
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(P);
    if (lu.info() != Eigen::Success)
      throw StabilityViolation("one_step: singular reduced-form filter");
    dy = lu.solve(b);
  }
  if (!dy.allFinite())
    throw NonFiniteField("one_step: non-finite rate");
  return y + step * dy;
}

// fitted growth and per-channel counterfactual contributions
struct Decomposition {
  double horizon = 0.0;
  Eigen::VectorXd y_T;          // fitted terminal field
  Eigen::VectorXd g;            // annualized fitted growth
  Eigen::VectorXd g_S, g_A, g_R, g_D;  // contributions; g_S empty without S
  Eigen::VectorXd interaction;  // g minus the sum of contributions
  std::vector<int> negative;    // locations where annualization is undefined
};

namespace detail {

inline Eigen::VectorXd annualized_growth(const Eigen::VectorXd& yT,
                                         const Eigen::VectorXd& y0,
                                         double horizon,
                                         std::vector<int>* negative) {
  const int n = static_cast<int>(y0.size());
  Eigen::VectorXd g(n);
  for (int i = 0; i < n; ++i) {
    const double ratio = yT[i] / y0[i];
    if (!(ratio > 0.0) || !std::isfinite(ratio)) {
      g[i] = std::numeric_limits<double>::quiet_NaN();
      if (negative) negative->push_back(i);
    } else {
      g[i] = std::pow(ratio, 1.0 / horizon) - 1.0;
    }
  }
  return g;
}

inline Eigen::VectorXd iterate_map(const ForwardModel& fm,
                                   const TildeCoefficients& c,
                                   Eigen::VectorXd y, int steps, double step) {
  for (int k = 0; k < steps; ++k) y = one_step(fm, c, y, step);
  return y;
}

}  // namespace detail

// Counterfactual growth decomposition: the fitted map is iterated in annual
// steps, each channel is switched off by zeroing its gamma (the correction
// coefficients are left untouched), and the channel contribution is the
// difference of annualized growth rates. Nothing is re-estimated.
inline Decomposition decompose(const ForwardModel& fm,
                               const TildeCoefficients& coef,
                               const Eigen::VectorXd& y0, double horizon,
                               int steps = 0) {
  if (!(horizon > 0.0)) throw OutOfRange("decompose: horizon must be positive");
  if (steps <= 0)
    steps = std::max(1, static_cast<int>(std::lround(horizon)));
  const double step = horizon / steps;

  Decomposition out;
  out.horizon = horizon;
  out.y_T = detail::iterate_map(fm, coef, y0, steps, step);
  out.g = detail::annualized_growth(out.y_T, y0, horizon, &out.negative);

  auto counterfactual =
      [&](double TildeCoefficients::*member) -> Eigen::VectorXd {
    TildeCoefficients cf = coef;
    cf.*member = 0.0;
    const Eigen::VectorXd yT = detail::iterate_map(fm, cf, y0, steps, step);
    return out.g - detail::annualized_growth(yT, y0, horizon, nullptr);
  };

  if (fm.s.size() > 0) out.g_S = counterfactual(&TildeCoefficients::gamma_S);
  out.g_A = counterfactual(&TildeCoefficients::gamma_A);
  out.g_R = counterfactual(&TildeCoefficients::gamma_R);
  out.g_D = counterfactual(&TildeCoefficients::gamma_D);

  out.interaction = out.g - out.g_A - out.g_R - out.g_D;
  if (out.g_S.size() > 0) out.interaction -= out.g_S;
  return out;
}

// structural forward integration of the continuous model
struct Forecast {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> levels;
  Eigen::VectorXd growth;  // annualized over the whole horizon
  std::vector<int> negative;
};

inline Forecast forecast(const ForwardModel& fm, const StructuralParams& sp,
                         double h_A, double h_R, const Eigen::VectorXd& y0,
                         double years, int snapshots = 10,
                         double dt_max = 0.0) {
  if (!(years > 0.0)) throw OutOfRange("forecast: horizon must be positive");
  if (snapshots < 1) throw OutOfRange("forecast: need at least one snapshot");

  ModelParams p;
  p.alpha = sp.alpha;
  p.phi = sp.phi;
  p.gamma_S = sp.gamma_S;
  p.gamma_A = sp.gamma_A;
  p.gamma_R = sp.gamma_R;
  p.gamma_D = sp.gamma_D;
  p.kernel_A.h = h_A;
  p.kernel_R.h = h_R;
  p.s = fm.s;

  std::vector<double> times(static_cast<std::size_t>(snapshots));
  for (int i = 0; i < snapshots; ++i)
    times[static_cast<std::size_t>(i)] = years * (i + 1) / snapshots;

  double spacing = std::sqrt(fm.domain->area.minCoeff());
  const double dt = dt_max > 0.0 ? dt_max : cfl_dt(spacing, p);

  const Trajectory traj =
      integrate({0.0, y0}, p, *fm.ops, *fm.WA, *fm.WR, times, dt);

  Forecast f;
  f.times = traj.times;
  f.levels = traj.states;
  f.growth =
      detail::annualized_growth(traj.states.back(), y0, years, &f.negative);
  return f;
}

// ---------------------------------------------------------------------------
// convergence profile

struct ProfileCurve {
  Eigen::VectorXd x;  // log initial density grid
  Eigen::VectorXd curve, lo, hi;
  double bandwidth = 0.0;
};

// Nadaraya-Watson regression of a contribution on log initial density with
// percentile bootstrap bands; pairs with nonpositive density or undefined
// contribution are dropped
inline ProfileCurve convergence_profile(const Eigen::VectorXd& g,
                                        const Eigen::VectorXd& y0,
                                        double bandwidth = 0.0,
                                        int grid_points = 100,
                                        long boot_reps = 200,
                                        std::uint64_t seed = 1) {
  if (g.size() != y0.size())
    throw DimensionMismatch("convergence_profile: length mismatch");
  if (grid_points < 2)
    throw OutOfRange("convergence_profile: need at least two grid points");

  std::vector<double> xs, vs;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (!(y0[i] > 0.0) || !std::isfinite(g[i])) continue;
    xs.push_back(std::log(y0[i]));
    vs.push_back(g[i]);
  }
  const int m = static_cast<int>(xs.size());
  if (m < 2)
    throw TooFewLocations("convergence_profile: fewer than two usable points");

  double h = bandwidth;
  if (!(h > 0.0)) {
    double mean = 0.0, sq = 0.0;
    for (double v : xs) mean += v;
    mean /= m;
    for (double v : xs) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / m);
    h = 1.06 * sd * std::pow(static_cast<double>(m), -0.2);
    if (!(h > 0.0)) h = 1.0;  // degenerate support, any width gives the mean
  }

  const double xlo = *std::min_element(xs.begin(), xs.end());
  const double xhi = *std::max_element(xs.begin(), xs.end());

  ProfileCurve out;
  out.bandwidth = h;
  out.x = Eigen::VectorXd::LinSpaced(grid_points, xlo, xhi);

  auto smooth = [&](const std::vector<double>& px,
                    const std::vector<double>& pv) {
    Eigen::VectorXd c(grid_points);
    for (int gidx = 0; gidx < grid_points; ++gidx) {
      const double x0 = out.x[gidx];
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < px.size(); ++i) {
        const double u = (px[i] - x0) / h;
        const double w = std::exp(-0.5 * u * u);
        num += w * pv[i];
        den += w;
      }
      c[gidx] = den > 0.0 ? num / den
                          : std::numeric_limits<double>::quiet_NaN();
    }
    return c;
  };

  out.curve = smooth(xs, vs);

  if (boot_reps > 1) {
    Rng rng(seed);
    Eigen::MatrixXd draws(boot_reps, grid_points);
    std::vector<double> bx(static_cast<std::size_t>(m)),
        bv(static_cast<std::size_t>(m));
    for (long b = 0; b < boot_reps; ++b) {
      for (int i = 0; i < m; ++i) {
        const std::size_t j =
            static_cast<std::size_t>(rng.index(static_cast<std::uint64_t>(m)));
        bx[static_cast<std::size_t>(i)] = xs[j];
        bv[static_cast<std::size_t>(i)] = vs[j];
      }
      draws.row(b) = smooth(bx, bv).transpose();
    }
    out.lo.resize(grid_points);
    out.hi.resize(grid_points);
    std::vector<double> col(static_cast<std::size_t>(boot_reps));
    for (int gidx = 0; gidx < grid_points; ++gidx) {
      for (long b = 0; b < boot_reps; ++b)
        col[static_cast<std::size_t>(b)] = draws(b, gidx);
      std::sort(col.begin(), col.end());
      const double pos_lo = 0.025 * (boot_reps - 1);
      const double pos_hi = 0.975 * (boot_reps - 1);
      out.lo[gidx] = col[static_cast<std::size_t>(std::floor(pos_lo))];
      out.hi[gidx] = col[static_cast<std::size_t>(std::ceil(pos_hi))];
    }
  } else {
    out.lo = out.curve;
    out.hi = out.curve;
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic observed panel

// Irregular panel with two simulated snapshots, smooth topography and an
// altitude-like covariate; stands in for confidential municipal data in
// end-to-end runs. Units live on a jittered lattice with periodic wrap: the
// jitter and randomly dropped cells make the units irregular, while every
// stencil stays surrounded (one-sided stars on an open boundary make the
// reallocation operators non-dissipative, so long integrations diverge).
inline DomainData synthetic_panel(int n, std::uint64_t seed, double tau = 1.0,
                                  double h_A = 0.12, double h_R = 0.24) {
  if (n < 16) throw TooFewLocations("synthetic_panel: too few locations");
  Rng rng(seed);

  const int nx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int ny = static_cast<int>(std::ceil(static_cast<double>(n) / nx));
  const int total = nx * ny;
  std::vector<int> cells(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) cells[static_cast<std::size_t>(i)] = i;
  for (int i = total - 1; i > 0; --i)
    std::swap(cells[static_cast<std::size_t>(i)],
              cells[rng.index(static_cast<std::size_t>(i + 1))]);
  cells.resize(static_cast<std::size_t>(n));
  std::sort(cells.begin(), cells.end());

  const double sx = 1.0 / nx, sy = 1.0 / ny;
  const double spacing = std::min(sx, sy);
  std::vector<Eigen::Vector2d> pts(static_cast<std::size_t>(n));
  std::vector<double> areas(static_cast<std::size_t>(n));
  std::vector<std::string> ids(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int cell = cells[static_cast<std::size_t>(i)];
    const int ix = cell % nx, iy = cell / nx;
    pts[static_cast<std::size_t>(i)] =
        Eigen::Vector2d((ix + 0.5 + 0.5 * (rng.uniform() - 0.5)) * sx,
                        (iy + 0.5 + 0.5 * (rng.uniform() - 0.5)) * sy);
    areas[static_cast<std::size_t>(i)] = (0.75 + 0.5 * rng.uniform()) / n;
    ids[static_cast<std::size_t>(i)] = "loc" + std::to_string(i);
  }

  DomainData d;
  d.domain = build_domain(pts, areas, Topology::torus, 1.0, 1.0, ids);

  d.s.resize(n);
  d.alt.resize(n);
  d.y0.resize(n);
  for (int i = 0; i < n; ++i) {
    const double x = d.domain.z(i, 0), y = d.domain.z(i, 1);
    d.s[i] = 0.5 * std::sin(2.0 * M_PI * x) * std::cos(2.0 * M_PI * y);
    d.alt[i] = 300.0 + 250.0 * std::sin(3.1 * x + 1.7) * std::sin(2.3 * y);
    d.y0[i] = 1.0 + 2.0 * std::exp(-((x - 0.35) * (x - 0.35) +
                                     (y - 0.6) * (y - 0.6)) /
                                   (2.0 * 0.15 * 0.15)) +
              1.5 * std::exp(-((x - 0.75) * (x - 0.75) +
                               (y - 0.3) * (y - 0.3)) /
                             (2.0 * 0.1 * 0.1));
  }

  // 12-point stars: with strong jitter the 8-point least-squares stencil can
  // lose dissipativity (positive Laplacian spectrum), larger stars do not
  const OperatorSet ops = build_operators(d.domain, build_stars(d.domain, 12));
  const InteractionMatrix WA = build_interaction(d.domain, {h_A});
  const InteractionMatrix WR = build_interaction(d.domain, {h_R});

  ModelParams p;
  p.alpha = 0.01;
  p.phi = 0.01;
  p.gamma_S = 0.002;
  p.gamma_A = -0.0008;
  p.gamma_R = 0.001;
  p.gamma_D = 0.002;
  p.kernel_A.h = h_A;
  p.kernel_R.h = h_R;
  p.s = d.s;

  const Trajectory traj = integrate({0.0, d.y0}, p, ops, WA, WR, {tau},
                                    cfl_dt(0.3 * spacing, p));
  d.y1 = traj.states.back();
  return d;
}

// ---------------------------------------------------------------------------
// model-implied remainder of the discretized equation at given parameters,
// with the midpoint-rule corrections rho_j = (tau/2) gamma_j applied to the
// reallocation channels
inline Eigen::VectorXd theoretical_remainder(const SardDesign& d,
                                             const ModelParams& p) {
  const int n = d.size();
  Eigen::VectorXd eps = d.dy - Eigen::VectorXd::Constant(n, p.alpha) -
                        p.phi * d.y - p.gamma_A * d.x_A - p.gamma_R * d.x_R -
                        p.gamma_D * d.x_D;
  if (d.has_S) eps -= p.gamma_S * d.x_S;
  const double half = 0.5 * d.tau;
  if (d.has_S) eps -= half * p.gamma_S * d.M_S.apply(d.dy);
  eps -= half * p.gamma_A * d.M_A.apply(d.dy);
  eps -= half * p.gamma_R * d.M_R.apply(d.dy);
  eps -= half * p.gamma_D * d.M_D.apply(d.dy);
  return eps;
}

}  // namespace sard
