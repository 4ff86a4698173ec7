#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sard/diagnostics.hpp"

using namespace sard;

namespace {

Eigen::VectorXd normal_draws(int n, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

// dense textbook evaluation of the statistic and its normality moments,
// independent of the banded implementation
struct BruteMoran {
  double I, E, V;
};

BruteMoran brute_moran(const Eigen::VectorXd& x,
                       const std::vector<std::vector<int>>& band) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j : band[i]) W(i, j) = 1.0 / band[i].size();

  const double S0 = W.sum();
  const Eigen::MatrixXd sym = W + W.transpose();
  const double S1 = 0.5 * sym.array().square().sum();
  double S2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double rc = W.row(i).sum() + W.col(i).sum();
    S2 += rc * rc;
  }

  const Eigen::VectorXd c = x.array() - x.mean();
  BruteMoran b;
  b.I = (n / S0) * c.dot(W * c) / c.squaredNorm();
  b.E = -1.0 / (n - 1);
  b.V = (n * n * S1 - n * S2 + 3.0 * S0 * S0) /
            ((n - 1.0) * (n + 1.0) * S0 * S0) -
        b.E * b.E;
  return b;
}

SardFit fake_fit(const Eigen::VectorXd& beta, double loglik, int k, int n,
                 const Eigen::VectorXd& resid) {
  SardFit f;
  f.beta = beta;
  f.names.resize(beta.size());
  for (int j = 0; j < beta.size(); ++j) f.names[j] = "c" + std::to_string(j);
  f.loglik = loglik;
  f.k = k;
  f.n = n;
  f.residuals = resid;
  return f;
}

}  // namespace

TEST_CASE("small-sample information criterion algebra", "[diagnostics]") {
  REQUIRE(aicc(-100.0, 3, 50) ==
          Catch::Approx(200.0 + 6.0 + 2.0 * 3 * 4 / (50 - 3 - 1)));
  // monotone in the log-likelihood at fixed k, n
  REQUIRE(aicc(-99.0, 3, 50) < aicc(-100.0, 3, 50));
  // correction vanishes as n grows
  REQUIRE(aicc(-100.0, 3, 100000) == Catch::Approx(206.0).margin(1e-3));
  REQUIRE_THROWS_AS(aicc(-100.0, 5, 6), OutOfRange);
  REQUIRE_THROWS_AS(aicc(-100.0, 5, 5), OutOfRange);
}

TEST_CASE("pseudo R-squared from likelihood ratios", "[diagnostics]") {
  REQUIRE(nagelkerke_r2(-50.0, -50.0, 100) == 0.0);
  REQUIRE(nagelkerke_r2(-40.0, -50.0, 100) ==
          Catch::Approx(1.0 - std::exp(-20.0 / 100.0)));
  REQUIRE(nagelkerke_r2(-40.0, -50.0, 100) > 0.0);
  REQUIRE(nagelkerke_r2(-40.0, -50.0, 100) < 1.0);
  REQUIRE(nagelkerke_r2(-30.0, -50.0, 100) > nagelkerke_r2(-40.0, -50.0, 100));
  REQUIRE_THROWS_AS(nagelkerke_r2(-40.0, -50.0, 0), OutOfRange);
}

TEST_CASE("mean squared error reads the fit residuals", "[diagnostics]") {
  Eigen::VectorXd resid(4);
  resid << 1.0, -1.0, 2.0, 0.0;
  SardFit f = fake_fit(Eigen::VectorXd::Zero(2), -10.0, 3, 4, resid);
  REQUIRE(mse(f) == Catch::Approx(6.0 / 4.0));
}

TEST_CASE("banded Moran statistic matches the dense evaluation", "[diagnostics]") {
  const SpatialDomain dom = uniform_torus_grid(10, 10);
  const ContiguityStructure contig =
      contiguity(dom, ContiguityMethod::rook_on_grid, 3);
  const Eigen::VectorXd x = normal_draws(dom.size(), 404);

  for (int q = 1; q <= 3; ++q) {
    const auto band = contig.band(q);
    const MoranResult r = morans_i(x, band);
    const BruteMoran b = brute_moran(x, band);
    REQUIRE(r.I == Catch::Approx(b.I).epsilon(1e-12));
    REQUIRE(r.expected == Catch::Approx(b.E).epsilon(1e-12));
    REQUIRE(r.variance == Catch::Approx(b.V).epsilon(1e-10));
  }
}

TEST_CASE("smooth field shows strong first-order dependence", "[diagnostics]") {
  const SpatialDomain dom = uniform_torus_grid(20, 20);
  const ContiguityStructure contig =
      contiguity(dom, ContiguityMethod::rook_on_grid, 1);
  Eigen::VectorXd x(dom.size());
  for (int i = 0; i < dom.size(); ++i)
    x[i] = std::sin(2.0 * M_PI * dom.z(i, 0));

  const MoranResult r = morans_i(x, contig.band(1));
  REQUIRE(r.I > 0.9);
  REQUIRE(r.zscore > 10.0);
  REQUIRE(r.pvalue < 1e-10);
}

TEST_CASE("independent field stays inside the null band", "[diagnostics]") {
  const SpatialDomain dom = uniform_torus_grid(50, 50);
  const ContiguityStructure contig =
      contiguity(dom, ContiguityMethod::rook_on_grid, 1);
  const auto band = contig.band(1);

  int inside = 0;
  const int reps = 100;
  for (int s = 0; s < reps; ++s) {
    const MoranResult r = morans_i(normal_draws(dom.size(), 5000 + s), band);
    if (std::abs(r.I - r.expected) <= 2.0 * std::sqrt(r.variance)) ++inside;
  }
  REQUIRE(inside >= 95);
}

TEST_CASE("degenerate Moran inputs are rejected", "[diagnostics]") {
  const Eigen::VectorXd flat = Eigen::VectorXd::Constant(16, 2.0);
  std::vector<std::vector<int>> ring(16);
  for (int i = 0; i < 16; ++i) ring[i] = {(i + 1) % 16, (i + 15) % 16};
  REQUIRE_THROWS_AS(morans_i(flat, ring), OutOfRange);

  const std::vector<std::vector<int>> empty(16);
  REQUIRE_THROWS_AS(morans_i(normal_draws(16, 2), empty), EmptyBand);
  REQUIRE_THROWS_AS(morans_i(normal_draws(8, 2), ring), DimensionMismatch);
}

TEST_CASE("permutation null is seeded and detects smooth structure",
          "[diagnostics]") {
  const SpatialDomain dom = uniform_torus_grid(12, 12);
  const ContiguityStructure contig =
      contiguity(dom, ContiguityMethod::rook_on_grid, 1);
  const auto band = contig.band(1);

  Eigen::VectorXd smooth(dom.size());
  for (int i = 0; i < dom.size(); ++i)
    smooth[i] = std::cos(2.0 * M_PI * dom.z(i, 1));

  const MoranResult a = morans_i_permutation(smooth, band, 199, 5);
  const MoranResult b = morans_i_permutation(smooth, band, 199, 5);
  REQUIRE(a.pvalue == b.pvalue);
  REQUIRE(a.zscore == b.zscore);
  REQUIRE(a.pvalue < 0.01);

  const MoranResult c = morans_i_permutation(normal_draws(dom.size(), 909),
                                             band, 199, 5);
  REQUIRE(c.pvalue > 0.05);
}

TEST_CASE("correlogram walks the contiguity orders", "[diagnostics]") {
  const SpatialDomain dom = uniform_torus_grid(12, 12);
  const ContiguityStructure contig =
      contiguity(dom, ContiguityMethod::rook_on_grid, 4);
  Eigen::VectorXd x(dom.size());
  for (int i = 0; i < dom.size(); ++i)
    x[i] = std::sin(2.0 * M_PI * dom.z(i, 0)) +
           0.5 * std::cos(2.0 * M_PI * dom.z(i, 1));

  const auto pts = moran_correlogram(x, contig, 4);
  REQUIRE(pts.size() == 4);
  for (int q = 0; q < 4; ++q) {
    REQUIRE(pts[q].order == q + 1);
    REQUIRE(pts[q].defined);
    REQUIRE(pts[q].lo < pts[q].hi);
  }
  // dependence decays with distance on a smooth field
  REQUIRE(pts[0].I > pts[1].I);
  REQUIRE(pts[1].I > pts[3].I);
  REQUIRE(pts[0].I > pts[0].hi);

  REQUIRE_THROWS_AS(moran_correlogram(x, contig, 5), OutOfRange);
  REQUIRE_THROWS_AS(moran_correlogram(x, contig, 0), OutOfRange);
}

TEST_CASE("empty rings are reported as missing, never zero", "[diagnostics]") {
  // a 3x3 torus has no pairs beyond hop distance 2
  const SpatialDomain dom = uniform_torus_grid(3, 3);
  const ContiguityStructure contig =
      contiguity(dom, ContiguityMethod::rook_on_grid, 5);
  const Eigen::VectorXd x = normal_draws(dom.size(), 77);

  const auto pts = moran_correlogram(x, contig, 5);
  REQUIRE(pts[0].defined);
  REQUIRE(pts[1].defined);
  for (int q = 2; q < 5; ++q) REQUIRE_FALSE(pts[q].defined);
}

TEST_CASE("single exact replication summarizes to zero error", "[diagnostics]") {
  Eigen::VectorXd truth(3);
  truth << 0.5, -0.2, 1.0;
  const Eigen::VectorXd resid = normal_draws(40, 11);
  std::vector<SardFit> fits{fake_fit(truth, -20.0, 4, 40, resid)};

  const McSummary s = summarize_mc(fits, truth);
  REQUIRE(s.replications == 1);
  REQUIRE(s.bias.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(s.rmse.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(s.se.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(s.mean.isApprox(truth));
  REQUIRE(std::isnan(s.se_boot[0]));
  REQUIRE(s.aicc_mean == Catch::Approx(aicc(-20.0, 4, 40)));
  REQUIRE(s.mse_mean == Catch::Approx(resid.squaredNorm() / 40.0));
}

TEST_CASE("two symmetric replications give zero bias and spread-sized error",
          "[diagnostics]") {
  Eigen::VectorXd truth(2), d(2);
  truth << 1.0, -0.5;
  d << 0.3, 0.1;
  const Eigen::VectorXd resid = Eigen::VectorXd::Ones(30);
  std::vector<SardFit> fits{fake_fit(truth + d, -15.0, 3, 30, resid),
                            fake_fit(truth - d, -15.0, 3, 30, resid)};

  const McSummary s = summarize_mc(fits, truth);
  REQUIRE(s.bias.cwiseAbs().maxCoeff() < 1e-15);
  REQUIRE(s.rmse[0] == Catch::Approx(0.3));
  REQUIRE(s.rmse[1] == Catch::Approx(0.1));
  REQUIRE(s.se[0] == Catch::Approx(0.3));
  REQUIRE(s.se[1] == Catch::Approx(0.1));
}

TEST_CASE("error decomposition holds across a cloud of replications",
          "[diagnostics]") {
  Rng rng(606);
  Eigen::VectorXd truth(4);
  truth << 0.1, 0.2, -0.3, 0.0;
  std::vector<SardFit> fits;
  Eigen::MatrixXd boot(9, 4);
  for (int i = 0; i < 9; ++i) {
    Eigen::VectorXd b = truth;
    for (int j = 0; j < 4; ++j) b[j] += 0.2 * rng.normal();
    fits.push_back(fake_fit(b, -25.0 - i, 5, 60, Eigen::VectorXd::Ones(60)));
    for (int j = 0; j < 4; ++j) boot(i, j) = 0.1 + 0.01 * i;
  }

  const McSummary s = summarize_mc(fits, truth, &boot);
  for (int j = 0; j < 4; ++j) {
    REQUIRE(s.rmse[j] * s.rmse[j] ==
            Catch::Approx(s.bias[j] * s.bias[j] + s.se[j] * s.se[j]).epsilon(1e-12));
    REQUIRE(s.se_boot[j] == Catch::Approx(0.14));
  }
}

TEST_CASE("summary rejects inconsistent inputs", "[diagnostics]") {
  Eigen::VectorXd truth(2);
  truth << 1.0, 2.0;
  const Eigen::VectorXd resid = Eigen::VectorXd::Ones(20);
  std::vector<SardFit> fits{fake_fit(truth, -10.0, 3, 20, resid)};

  REQUIRE_THROWS_AS(summarize_mc({}, truth), OutOfRange);
  REQUIRE_THROWS_AS(summarize_mc(fits, Eigen::VectorXd::Zero(3)),
                    DimensionMismatch);

  auto other = fake_fit(truth, -10.0, 3, 20, resid);
  other.names[0] = "different";
  std::vector<SardFit> mixed{fits[0], other};
  REQUIRE_THROWS_AS(summarize_mc(mixed, truth), DimensionMismatch);

  Eigen::MatrixXd boot(2, 2);
  REQUIRE_THROWS_AS(summarize_mc(fits, truth, &boot), DimensionMismatch);
}

TEST_CASE("cluster counting respects the torus seam", "[diagnostics]") {
  const int n1 = 6, n2 = 6;
  Eigen::VectorXd field = Eigen::VectorXd::Zero(n1 * n2);
  auto at = [&](int ix, int iy) -> double& { return field[iy * n1 + ix]; };

  // one blob straddling the x seam, one interior blob
  at(0, 0) = 1.0;
  at(5, 0) = 1.0;
  at(2, 3) = 1.0;
  at(3, 3) = 1.0;
  at(2, 4) = 1.0;

  REQUIRE(count_clusters(field, n1, n2, 0.5, true) == 2);
  REQUIRE(count_clusters(field, n1, n2, 0.5, false) == 3);

  // threshold is strict
  at(4, 5) = 0.5;
  REQUIRE(count_clusters(field, n1, n2, 0.5, true) == 2);
  REQUIRE(count_clusters(field, n1, n2, 0.4999, true) == 3);

  REQUIRE(count_clusters(Eigen::VectorXd::Zero(n1 * n2), n1, n2, 0.5) == 0);
  REQUIRE(count_clusters(Eigen::VectorXd::Ones(n1 * n2), n1, n2, 0.5) == 1);
  REQUIRE_THROWS_AS(count_clusters(field, 5, 6, 0.5), DimensionMismatch);
}
