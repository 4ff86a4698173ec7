#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "sard/harness.hpp"
#include "sard/particles.hpp"

using namespace sard;

namespace {

struct CommonArgs {
  std::string config_path;
  long seed = -1;
  std::string out_dir;
  std::string data_file;
  std::string topology;
  std::string method;
  double tau = 0.0;
  double horizon = 0.0;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path,
                  "configuration file, one `key = value` per line");
  cmd->add_option("--seed", a.seed, "RNG seed, overrides the config");
  cmd->add_option("--out", a.out_dir, "output directory, overrides out_dir");
  cmd->add_option("--data", a.data_file,
                  "domain CSV (id,x,y,area,y_t0,y_t1[,s][,alt]), overrides "
                  "data_file");
  cmd->add_option("--topology", a.topology,
                  "domain topology for --data: torus|planar");
  cmd->add_option("--method", a.method,
                  "estimator for single-fit commands: naive|ols|iv|ml");
  cmd->add_option("--tau", a.tau, "observation interval, overrides tau");
  cmd->add_option("--horizon", a.horizon,
                  "horizon in years, overrides horizon");
}

struct Run {
  Config raw;
  ExperimentConfig cfg;
  FitMethod method = FitMethod::iv;
};

FitMethod parse_method(const std::string& m) {
  if (m == "naive") return FitMethod::ols_naive;
  if (m == "ols") return FitMethod::ols;
  if (m == "iv") return FitMethod::iv;
  if (m == "ml") return FitMethod::ml;
  throw ConfigError("unknown method: " + m);
}

Run make_run(const CommonArgs& a) {
  Run r;
  if (!a.config_path.empty()) r.raw = Config::parse_file(a.config_path);
  if (a.seed >= 0) r.raw.set("seed", std::to_string(a.seed));
  if (!a.out_dir.empty()) r.raw.set("out_dir", a.out_dir);
  if (!a.data_file.empty()) r.raw.set("data_file", a.data_file);
  if (!a.topology.empty()) r.raw.set("topology", a.topology);
  if (!a.method.empty()) r.raw.set("method", a.method);
  if (a.tau > 0.0) r.raw.set("tau", fmt17(a.tau));
  if (a.horizon > 0.0) r.raw.set("horizon", fmt17(a.horizon));
  r.cfg = ExperimentConfig::from(r.raw);
  r.method = parse_method(r.raw.get_string("method", "iv"));
  return r;
}

std::string opath(const Run& r, const std::string& name) {
  std::filesystem::create_directories(r.cfg.out_dir);
  return (std::filesystem::path(r.cfg.out_dir) / name).string();
}

void emit_manifest(
    const Run& r, const std::string& command,
    std::vector<std::pair<std::string, std::string>> extra = {}) {
  auto prov = provenance(r.cfg.seed);
  prov.emplace_back("command", command);
  for (auto& e : extra) prov.push_back(std::move(e));
  write_manifest(opath(r, command + "_manifest.txt"), r.raw, prov);
}

DomainData load_data(const Run& r) {
  if (r.cfg.data_file.empty())
    throw ConfigError("this command needs data_file (or --data)");
  return read_domain_csv(r.cfg.data_file, r.cfg.data_topology, r.cfg.width,
                         r.cfg.height);
}

double median_nearest_neighbor(const SpatialDomain& d) {
  const int n = d.size();
  std::vector<double> nn(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
      if (j != i) best = std::min(best, d.distance(i, j));
    nn[static_cast<std::size_t>(i)] = best;
  }
  std::nth_element(nn.begin(), nn.begin() + n / 2, nn.end());
  return nn[static_cast<std::size_t>(n) / 2];
}

struct DataWorkspace {
  OperatorSet ops;
  InteractionMatrix WA, WR;
  ContiguityStructure contig;
  bool has_contig = false;
};

DataWorkspace make_ws(const Run& r, const SpatialDomain& dom,
                      bool need_contig) {
  DataWorkspace w;
  const int ns = static_cast<int>(r.raw.get_int("star_neighbors", 12));
  w.ops = build_operators(dom, build_stars(dom, ns));
  w.WA = build_interaction(dom, {r.cfg.h_A});
  w.WR = build_interaction(dom, {r.cfg.h_R});
  if (need_contig) {
    double thr = r.raw.get_double("contiguity_threshold", 0.0);
    if (!(thr > 0.0)) thr = 1.5 * median_nearest_neighbor(dom);
    w.contig = contiguity(dom, ContiguityMethod::distance_threshold,
                          r.cfg.error_orders, thr);
    w.has_contig = true;
  }
  return w;
}

SardFit fit_one(const SardDesign& d, FitMethod method, const Run& r,
                const DataWorkspace& w, ErrorWeights* ew_out) {
  switch (method) {
    case FitMethod::ols_naive:
      return fit_ols(d, true);
    case FitMethod::ols:
      return fit_ols(d);
    case FitMethod::iv:
      return fit_iv(d);
    case FitMethod::ml:
      break;
  }
  if (!w.has_contig)
    throw ConfigError("ml fit needs a contiguity structure");
  Eigen::VectorXd seed_resid;
  try {
    seed_resid = fit_iv(d).residuals;
  } catch (const Error&) {
    seed_resid = fit_ols(d).residuals;
  }
  ErrorWeights ew =
      estimate_error_weights(seed_resid, w.contig, r.cfg.error_orders);
  MlOptions opt;
  opt.max_evals = r.cfg.ml_max_evals;
  SardFit fit = fit_ml(d, &ew, opt);
  if (ew_out) *ew_out = std::move(ew);
  return fit;
}

ForwardModel make_fm(const SpatialDomain& dom, const DataWorkspace& w,
                     const DomainData& data) {
  ForwardModel fm;
  fm.domain = &dom;
  fm.ops = &w.ops;
  fm.WA = &w.WA;
  fm.WR = &w.WR;
  if (data.has_s()) fm.s = data.s;
  return fm;
}

std::string time_column(double t) { return "y_t" + detail::format_tau(t); }

// -----------------------------------------------------------------------
// simulate: forward-integrate the continuous model on the reference torus

int cmd_simulate(const CommonArgs& a) {
  const Run r = make_run(a);
  const double horizon = r.cfg.horizon > 0.0 ? r.cfg.horizon : r.cfg.tau;
  std::vector<double> times;
  for (int k = 1; k <= r.cfg.snapshots; ++k)
    times.push_back(horizon * k / r.cfg.snapshots);
  const ReferenceSolution ref = simulate_reference(r.cfg, times);
  const double cluster_rel = r.raw.get_double("cluster_rel_threshold", 0.1);

  TextTable fields;
  fields.names = {"id", "x", "y", "area", "y_t0"};
  for (double t : ref.times) fields.names.push_back(time_column(t));
  for (int i = 0; i < ref.grid.size(); ++i) {
    std::vector<std::string> row = {ref.grid.id[static_cast<std::size_t>(i)],
                                    fmt17(ref.grid.z(i, 0)),
                                    fmt17(ref.grid.z(i, 1)),
                                    fmt17(ref.grid.area[i]), fmt17(ref.y0[i])};
    for (const auto& st : ref.states) row.push_back(fmt17(st[i]));
    fields.rows.push_back(std::move(row));
  }
  write_table(opath(r, "sim_fields.csv"), fields);

  TextTable agg;
  agg.names = {"t", "aggregate", "clusters"};
  const auto agg_row = [&](double t, const Eigen::VectorXd& y) {
    const int clusters = count_clusters(y, ref.n1, ref.n2,
                                        cluster_rel * y.maxCoeff(), true);
    agg.rows.push_back({detail::format_tau(t), fmt17(aggregate_level(ref.grid, y)),
                        std::to_string(clusters)});
  };
  agg_row(0.0, ref.y0);
  for (std::size_t k = 0; k < ref.times.size(); ++k)
    agg_row(ref.times[k], ref.states[k]);
  write_table(opath(r, "sim_aggregate.csv"), agg);

  DomainData panel;
  panel.domain = ref.grid;
  panel.y0 = ref.y0;
  panel.y1 = ref.at(horizon);
  write_domain_csv(opath(r, "sim_panel.csv"), panel);

  emit_manifest(r, "simulate",
                {{"horizon", fmt17(horizon)},
                 {"final_aggregate",
                  fmt17(aggregate_level(ref.grid, ref.at(horizon)))}});
  std::printf("simulate: %d locations, %zu snapshots to t=%s -> %s\n",
              ref.grid.size(), ref.times.size(),
              detail::format_tau(horizon).c_str(), r.cfg.out_dir.c_str());
  return 0;
}

// -----------------------------------------------------------------------
// particles: interacting-agent cross-check of the field equation

int cmd_particles(const CommonArgs& a) {
  const Run r = make_run(a);
  const ModelParams& p = r.cfg.truth;
  if (p.alpha != 0.0 || p.phi != 0.0 || p.gamma_S != 0.0)
    throw ConfigError(
        "particles: the agent system requires alpha = phi = gamma_S = 0");

  const long agents = r.raw.get_int("agents", 20000);
  if (agents < 1) throw ConfigError("agents must be positive");
  const double horizon = r.cfg.horizon > 0.0 ? r.cfg.horizon : r.cfg.tau;
  double dt = r.raw.get_double("particle_dt", 0.01);
  const int steps = std::max(1, static_cast<int>(std::ceil(horizon / dt)));
  dt = horizon / steps;
  double kde_bw = r.raw.get_double("kde_bandwidth", 0.0);
  if (!(kde_bw > 0.0))
    kde_bw = 0.156 * std::pow(static_cast<double>(agents), -1.0 / 6.0);

  const SpatialDomain grid =
      uniform_torus_grid(r.cfg.ref_grid, r.cfg.ref_grid, r.cfg.width,
                         r.cfg.height);
  Eigen::VectorXd y0 = r.cfg.initial_field(grid);
  y0 /= aggregate_level(grid, y0);  // unit mass: the mean-field scale

  Rng rng(r.cfg.seed);
  ParticleEnsemble e = sample_particles(y0, r.cfg.ref_grid, r.cfg.ref_grid,
                                        r.cfg.width, r.cfg.height,
                                        static_cast<int>(agents), rng);
  for (int k = 0; k < steps; ++k) particle_step(e, p, dt, rng);
  const Eigen::VectorXd kde =
      particle_kde(e, r.cfg.ref_grid, r.cfg.ref_grid, kde_bw);

  const OperatorSet ops = build_operators(grid, build_stars(grid, 8));
  const TorusConvolution WA(r.cfg.ref_grid, r.cfg.ref_grid, r.cfg.width,
                            r.cfg.height, p.kernel_A);
  const TorusConvolution WR(r.cfg.ref_grid, r.cfg.ref_grid, r.cfg.width,
                            r.cfg.height, p.kernel_R);
  const double sim_dt =
      r.cfg.dt_max > 0.0
          ? r.cfg.dt_max
          : cfl_dt(std::min(r.cfg.width, r.cfg.height) / r.cfg.ref_grid, p);
  const Trajectory traj =
      integrate({0.0, y0}, p, ops, WA, WR, {horizon}, sim_dt);
  const Eigen::VectorXd& field = traj.states.back();

  double l1 = 0.0;
  for (int i = 0; i < grid.size(); ++i)
    l1 += std::abs(kde[i] - field[i]) * grid.area[i];

  TextTable t;
  t.names = {"id", "x", "y", "area", "agents_density", "field_density"};
  for (int i = 0; i < grid.size(); ++i)
    t.rows.push_back({grid.id[static_cast<std::size_t>(i)], fmt17(grid.z(i, 0)),
                      fmt17(grid.z(i, 1)), fmt17(grid.area[i]), fmt17(kde[i]),
                      fmt17(field[i])});
  write_table(opath(r, "particles_kde.csv"), t);

  TextTable pos;
  pos.names = {"agent", "x", "y"};
  for (int i = 0; i < e.count(); ++i)
    pos.rows.push_back({std::to_string(i), fmt17(e.X(i, 0)), fmt17(e.X(i, 1))});
  write_table(opath(r, "particles_final.csv"), pos);

  emit_manifest(r, "particles",
                {{"agents", std::to_string(agents)},
                 {"kde_bandwidth", fmt17(kde_bw)},
                 {"l1_distance", fmt17(l1)}});
  std::printf("particles: %ld agents, %d steps to t=%s, L1 vs field = %.6f\n",
              agents, steps, detail::format_tau(horizon).c_str(), l1);
  return 0;
}

// -----------------------------------------------------------------------
// design: emit the regressor matrix for a dataset

int cmd_design(const CommonArgs& a) {
  const Run r = make_run(a);
  const DomainData data = load_data(r);
  const DataWorkspace w = make_ws(r, data.domain, false);
  const SardDesign d =
      build_design(data.y0, data.y1, data.has_s() ? data.s : Eigen::VectorXd(),
                   r.cfg.tau, w.ops, w.WA, w.WR);

  TextTable t;
  t.names = {"id", "x", "y", "area", "y0", "dy"};
  if (d.has_S) t.names.push_back("x_S");
  t.names.insert(t.names.end(), {"x_A", "x_R", "x_D"});
  for (int i = 0; i < d.size(); ++i) {
    std::vector<std::string> row = {
        data.domain.id[static_cast<std::size_t>(i)], fmt17(data.domain.z(i, 0)),
        fmt17(data.domain.z(i, 1)), fmt17(data.domain.area[i]),
        fmt17(d.y[i]), fmt17(d.dy[i])};
    if (d.has_S) row.push_back(fmt17(d.x_S[i]));
    row.insert(row.end(), {fmt17(d.x_A[i]), fmt17(d.x_R[i]), fmt17(d.x_D[i])});
    t.rows.push_back(std::move(row));
  }
  write_table(opath(r, "design.csv"), t);
  emit_manifest(r, "design", {{"locations", std::to_string(d.size())}});
  std::printf("design: %d locations, tau=%s -> %s\n", d.size(),
              detail::format_tau(r.cfg.tau).c_str(), r.cfg.out_dir.c_str());
  return 0;
}

// -----------------------------------------------------------------------
// fit: run the configured estimators on a dataset

int cmd_fit(const CommonArgs& a) {
  const Run r = make_run(a);
  const DomainData data = load_data(r);
  bool need_ml = false;
  for (FitMethod m : r.cfg.methods) need_ml |= m == FitMethod::ml;
  const DataWorkspace w = make_ws(r, data.domain, need_ml);
  const SardDesign d =
      build_design(data.y0, data.y1, data.has_s() ? data.s : Eigen::VectorXd(),
                   r.cfg.tau, w.ops, w.WA, w.WR);

  TextTable coefs, stats, rings;
  coefs.names = {"method", "term", "estimate", "se", "se_robust", "boot_se"};
  stats.names = {"method", "loglik", "aicc",   "mse",  "sigma2",
                 "k",      "n",      "lambda", "q_hat", "min_F",
                 "weak",   "converged", "iterations"};
  rings.names = {"order", "ell", "se", "tstat"};

  for (FitMethod m : r.cfg.methods) {
    ErrorWeights ew;
    SardFit fit;
    try {
      fit = fit_one(d, m, r, w, &ew);
    } catch (const Error& e) {
      std::fprintf(stderr, "fit %s skipped: %s\n", method_name(m), e.what());
      continue;
    }
    Eigen::VectorXd boot;
    if (r.cfg.boot_reps > 1 && m != FitMethod::ml)
      boot = bootstrap_se(d, fit, static_cast<int>(r.cfg.boot_reps),
                          r.cfg.seed);
    for (std::size_t j = 0; j < fit.names.size(); ++j) {
      const Eigen::Index k = static_cast<Eigen::Index>(j);
      coefs.rows.push_back(
          {method_name(m), fit.names[j], fmt17(fit.beta[k]),
           fmt17(fit.se[k]),
           fit.se_robust.size() > 0 ? fmt17(fit.se_robust[k]) : "",
           boot.size() > 0 ? fmt17(boot[k]) : ""});
    }
    stats.rows.push_back(
        {method_name(m), fmt17(fit.loglik), fmt17(aicc(fit.loglik, fit.k, fit.n)),
         fmt17(mse(fit)), fmt17(fit.sigma2), std::to_string(fit.k),
         std::to_string(fit.n),
         m == FitMethod::ml ? fmt17(fit.lambda) : "",
         m == FitMethod::ml ? std::to_string(ew.Q_hat) : "",
         fit.first_stage_F.size() > 0 ? fmt17(fit.first_stage_F.minCoeff()) : "",
         fit.weak_instruments ? "1" : "0", fit.converged ? "1" : "0",
         std::to_string(fit.iterations)});
    if (m == FitMethod::ml)
      for (Eigen::Index q = 0; q < ew.ell.size(); ++q)
        rings.rows.push_back({std::to_string(q + 1), fmt17(ew.ell[q]),
                              fmt17(ew.se[q]), fmt17(ew.tstat[q])});
    std::printf("fit %-9s loglik=%.4f aicc=%.4f\n", method_name(m),
                fit.loglik, aicc(fit.loglik, fit.k, fit.n));
  }
  write_table(opath(r, "fit_coefficients.csv"), coefs);
  write_table(opath(r, "fit_stats.csv"), stats);
  if (!rings.rows.empty()) write_table(opath(r, "error_rings.csv"), rings);
  emit_manifest(r, "fit", {{"locations", std::to_string(d.size())}});
  return 0;
}

// -----------------------------------------------------------------------
// mc: the full Monte Carlo study grid

int cmd_mc(const CommonArgs& a) {
  const Run r = make_run(a);
  const TextTable summary = run_montecarlo(r.cfg);
  emit_manifest(r, "mc", {{"cells", std::to_string(r.cfg.grid_sizes.size() *
                                                   r.cfg.taus.size())}});
  std::printf("mc: %zu summary rows -> %s/mc_summary.csv\n",
              summary.rows.size(), r.cfg.out_dir.c_str());
  return 0;
}

// -----------------------------------------------------------------------
// search-bandwidth: AICc grid over (h_A, h_R)

int cmd_search_bandwidth(const CommonArgs& a) {
  const Run r = make_run(a);
  if (r.cfg.hA_grid.empty() || r.cfg.hR_grid.empty())
    throw ConfigError("search-bandwidth needs nonempty hA_grid and hR_grid");
  const DomainData data = load_data(r);
  const DataWorkspace w = make_ws(r, data.domain, true);

  MlOptions opt;
  opt.max_evals = r.cfg.ml_max_evals;
  const BandwidthSearchResult res = bandwidth_search(
      data.domain, w.ops, w.contig, data.y0, data.y1,
      data.has_s() ? data.s : Eigen::VectorXd(), r.cfg.tau, r.cfg.hA_grid,
      r.cfg.hR_grid, r.cfg.error_orders, opt);

  TextTable t;
  t.names = {"h_A", "h_R", "aicc", "loglik", "lambda", "converged"};
  for (std::size_t i = 0; i < res.table.size(); ++i) {
    const BandwidthCell& c = res.table[i];
    t.rows.push_back({fmt17(c.h_A), fmt17(c.h_R), fmt17(c.aicc_value),
                      fmt17(c.fit.loglik), fmt17(c.fit.lambda),
                      c.fit.converged ? "1" : "0"});
  }
  write_table(opath(r, "bandwidth_grid.csv"), t);

  const BandwidthCell& best = res.table[static_cast<std::size_t>(res.best)];
  emit_manifest(r, "search-bandwidth",
                {{"best_h_A", fmt17(best.h_A)},
                 {"best_h_R", fmt17(best.h_R)},
                 {"best_aicc", fmt17(best.aicc_value)}});
  std::printf("search-bandwidth: best (h_A, h_R) = (%g, %g), aicc=%.4f over "
              "%zu models\n",
              best.h_A, best.h_R, best.aicc_value, res.table.size());
  return 0;
}

// -----------------------------------------------------------------------
// decompose: counterfactual growth contributions

int cmd_decompose(const CommonArgs& a) {
  const Run r = make_run(a);
  const DomainData data = load_data(r);
  const DataWorkspace w = make_ws(r, data.domain, r.method == FitMethod::ml);
  const SardDesign d =
      build_design(data.y0, data.y1, data.has_s() ? data.s : Eigen::VectorXd(),
                   r.cfg.tau, w.ops, w.WA, w.WR);
  const SardFit fit = fit_one(d, r.method, r, w, nullptr);

  const ForwardModel fm = make_fm(data.domain, w, data);
  const double horizon = r.cfg.horizon > 0.0 ? r.cfg.horizon : r.cfg.tau;
  const int steps = static_cast<int>(r.raw.get_int("decompose_steps", 0));
  const Decomposition dec = decompose(fm, fit.coef, data.y0, horizon, steps);

  std::vector<char> undefined(static_cast<std::size_t>(d.size()), 0);
  for (int i : dec.negative) undefined[static_cast<std::size_t>(i)] = 1;

  TextTable t;
  t.names = {"id", "x", "y", "area", "y0", "y_T", "g"};
  if (dec.g_S.size() > 0) t.names.push_back("g_S");
  t.names.insert(t.names.end(), {"g_A", "g_R", "g_D", "interaction",
                                 "undefined"});
  for (int i = 0; i < d.size(); ++i) {
    std::vector<std::string> row = {
        data.domain.id[static_cast<std::size_t>(i)], fmt17(data.domain.z(i, 0)),
        fmt17(data.domain.z(i, 1)), fmt17(data.domain.area[i]),
        fmt17(data.y0[i]), fmt17(dec.y_T[i]), fmt17(dec.g[i])};
    if (dec.g_S.size() > 0) row.push_back(fmt17(dec.g_S[i]));
    row.insert(row.end(),
               {fmt17(dec.g_A[i]), fmt17(dec.g_R[i]), fmt17(dec.g_D[i]),
                fmt17(dec.interaction[i]),
                undefined[static_cast<std::size_t>(i)] ? "1" : "0"});
    t.rows.push_back(std::move(row));
  }
  write_table(opath(r, "decompose.csv"), t);
  emit_manifest(r, "decompose",
                {{"method", method_name(r.method)},
                 {"horizon", fmt17(horizon)},
                 {"undefined_locations", std::to_string(dec.negative.size())}});
  std::printf("decompose: horizon %s years, %zu undefined locations -> %s\n",
              detail::format_tau(horizon).c_str(), dec.negative.size(),
              r.cfg.out_dir.c_str());
  return 0;
}

// -----------------------------------------------------------------------
// forecast: structural forward integration after back-solving the scale

int cmd_forecast(const CommonArgs& a) {
  const Run r = make_run(a);
  const DomainData data = load_data(r);
  const DataWorkspace w = make_ws(r, data.domain, r.method == FitMethod::ml);
  const SardDesign d =
      build_design(data.y0, data.y1, data.has_s() ? data.s : Eigen::VectorXd(),
                   r.cfg.tau, w.ops, w.WA, w.WR);
  const SardFit fit = fit_one(d, r.method, r, w, nullptr);

  const double Y0 = aggregate_level(data.domain, data.y0);
  const double Y1 = aggregate_level(data.domain, data.y1);
  const StructuralParams sp =
      back_solve(fit.coef, Y0, Y1, r.cfg.tau, data.domain.total_area());

  const ForwardModel fm = make_fm(data.domain, w, data);
  const double years = r.cfg.horizon > 0.0 ? r.cfg.horizon : r.cfg.tau;
  const Forecast fc = forecast(fm, sp, r.cfg.h_A, r.cfg.h_R, data.y0, years,
                               r.cfg.snapshots, r.cfg.dt_max);

  TextTable t;
  t.names = {"id", "x", "y", "area", "y0", "growth"};
  for (double tt : fc.times) t.names.push_back("level_t" + detail::format_tau(tt));
  for (int i = 0; i < d.size(); ++i) {
    std::vector<std::string> row = {
        data.domain.id[static_cast<std::size_t>(i)], fmt17(data.domain.z(i, 0)),
        fmt17(data.domain.z(i, 1)), fmt17(data.domain.area[i]),
        fmt17(data.y0[i]), fmt17(fc.growth[i])};
    for (const auto& lv : fc.levels) row.push_back(fmt17(lv[i]));
    t.rows.push_back(std::move(row));
  }
  write_table(opath(r, "forecast.csv"), t);

  TextTable agg;
  agg.names = {"t", "aggregate"};
  agg.rows.push_back({"0", fmt17(Y0)});
  for (std::size_t k = 0; k < fc.times.size(); ++k)
    agg.rows.push_back({detail::format_tau(fc.times[k]),
                        fmt17(aggregate_level(data.domain, fc.levels[k]))});
  write_table(opath(r, "forecast_aggregate.csv"), agg);

  std::vector<double> finite;
  for (int i = 0; i < fc.growth.size(); ++i)
    if (std::isfinite(fc.growth[i])) finite.push_back(fc.growth[i]);
  std::sort(finite.begin(), finite.end());
  const double median =
      finite.empty() ? std::numeric_limits<double>::quiet_NaN()
                     : finite[finite.size() / 2];

  emit_manifest(r, "forecast",
                {{"method", method_name(r.method)},
                 {"years", fmt17(years)},
                 {"scale", fmt17(sp.scale)},
                 {"median_growth", fmt17(median)},
                 {"negative_locations", std::to_string(fc.negative.size())}});
  std::printf(
      "forecast: %s years, scale=%.4f, median annual growth %.4f%% -> %s\n",
      detail::format_tau(years).c_str(), sp.scale, 100.0 * median,
      r.cfg.out_dir.c_str());
  return 0;
}

// -----------------------------------------------------------------------
// moran: residual spatial-correlation diagnostics

int cmd_moran(const CommonArgs& a) {
  const Run r = make_run(a);
  const DomainData data = load_data(r);
  const DataWorkspace w = make_ws(r, data.domain, true);
  const SardDesign d =
      build_design(data.y0, data.y1, data.has_s() ? data.s : Eigen::VectorXd(),
                   r.cfg.tau, w.ops, w.WA, w.WR);
  ErrorWeights ew;
  const SardFit fit = fit_one(d, r.method, r, w, &ew);

  std::vector<std::pair<std::string, Eigen::VectorXd>> series;
  series.emplace_back("residuals", fit.residuals);
  if (r.method == FitMethod::ml)
    series.emplace_back("filtered",
                        fit.residuals - fit.lambda * (ew.W * fit.residuals));

  const long perms = r.raw.get_int("moran_permutations", 999);
  TextTable t;
  t.names = {"series", "order", "I", "lo", "hi", "defined"};
  std::vector<std::pair<std::string, std::string>> extra = {
      {"method", method_name(r.method)}};
  for (const auto& [name, x] : series) {
    const auto gram = moran_correlogram(x, w.contig, r.cfg.error_orders);
    for (const auto& pt : gram)
      t.rows.push_back({name, std::to_string(pt.order),
                        pt.defined ? fmt17(pt.I) : "", fmt17(pt.lo),
                        fmt17(pt.hi), pt.defined ? "1" : "0"});
    const MoranResult m1 = morans_i_permutation(
        x, w.contig.band(1), static_cast<int>(perms), r.cfg.seed);
    extra.emplace_back(name + "_I1", fmt17(m1.I));
    extra.emplace_back(name + "_p", fmt17(m1.pvalue));
    std::printf("moran %-9s I(1)=%.5f z=%.3f p=%.4f\n", name.c_str(), m1.I,
                m1.zscore, m1.pvalue);
  }
  write_table(opath(r, "moran.csv"), t);
  emit_manifest(r, "moran", extra);
  return 0;
}

// -----------------------------------------------------------------------
// profile: kernel-regression curves of contributions against log income

int cmd_profile(const CommonArgs& a) {
  const Run r = make_run(a);
  const DomainData data = load_data(r);
  const DataWorkspace w = make_ws(r, data.domain, r.method == FitMethod::ml);
  const SardDesign d =
      build_design(data.y0, data.y1, data.has_s() ? data.s : Eigen::VectorXd(),
                   r.cfg.tau, w.ops, w.WA, w.WR);
  const SardFit fit = fit_one(d, r.method, r, w, nullptr);

  const ForwardModel fm = make_fm(data.domain, w, data);
  const double horizon = r.cfg.horizon > 0.0 ? r.cfg.horizon : r.cfg.tau;
  const Decomposition dec = decompose(fm, fit.coef, data.y0, horizon);

  std::vector<std::pair<std::string, const Eigen::VectorXd*>> comps;
  comps.emplace_back("total", &dec.g);
  if (dec.g_S.size() > 0) comps.emplace_back("topography", &dec.g_S);
  comps.emplace_back("aggregation", &dec.g_A);
  comps.emplace_back("repulsion", &dec.g_R);
  comps.emplace_back("diffusion", &dec.g_D);
  comps.emplace_back("interaction", &dec.interaction);

  TextTable t;
  t.names = {"component", "log_y0", "curve", "lo", "hi"};
  std::vector<std::pair<std::string, std::string>> extra = {
      {"method", method_name(r.method)}};
  for (const auto& [name, g] : comps) {
    const ProfileCurve pc = convergence_profile(
        *g, data.y0, r.cfg.profile_bandwidth, r.cfg.profile_grid,
        static_cast<int>(r.cfg.profile_boot), r.cfg.seed);
    for (int k = 0; k < pc.x.size(); ++k)
      t.rows.push_back({name, fmt17(pc.x[k]), fmt17(pc.curve[k]),
                        fmt17(pc.lo[k]), fmt17(pc.hi[k])});
    extra.emplace_back(name + "_bandwidth", fmt17(pc.bandwidth));
  }
  write_table(opath(r, "profile.csv"), t);
  emit_manifest(r, "profile", extra);
  std::printf("profile: %zu components x %d grid points -> %s\n", comps.size(),
              r.cfg.profile_grid, r.cfg.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "toolkit for a continuous-space growth model with aggregation, "
      "repulsion and diffusion: simulation, discretization, estimation"};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* desc;
    int (*fn)(const CommonArgs&);
  };
  const std::vector<Sub> subs = {
      {"simulate", "integrate the continuous model on the reference grid",
       cmd_simulate},
      {"particles", "interacting-agent cross-check of the field equation",
       cmd_particles},
      {"design", "emit regressors for a dataset", cmd_design},
      {"fit", "estimate the discretized model", cmd_fit},
      {"mc", "run the full (N, tau) Monte Carlo study", cmd_mc},
      {"search-bandwidth", "AICc grid search over kernel bandwidths",
       cmd_search_bandwidth},
      {"decompose", "counterfactual growth decomposition", cmd_decompose},
      {"forecast", "structural forward forecast", cmd_forecast},
      {"moran", "residual spatial-correlation diagnostics", cmd_moran},
      {"profile", "contribution curves against initial log income",
       cmd_profile},
  };

  std::vector<CommonArgs> args(subs.size());
  for (std::size_t i = 0; i < subs.size(); ++i) {
    CLI::App* cmd = app.add_subcommand(subs[i].name, subs[i].desc);
    add_common(cmd, args[i]);
    const auto fn = subs[i].fn;
    CommonArgs* a = &args[i];
    cmd->callback([fn, a]() {
      const int rc = fn(*a);
      if (rc != 0) throw CLI::RuntimeError(rc);
    });
  }

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
