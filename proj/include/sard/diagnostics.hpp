#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "common.hpp"
#include "estimators.hpp"
#include "geometry.hpp"

namespace sard {

// small-sample corrected Akaike information criterion
inline double aicc(double loglik, int k, int n) {
  if (n <= k + 1)
    throw OutOfRange("aicc: sample too small for the correction term");
  return -2.0 * loglik + 2.0 * k +
         2.0 * static_cast<double>(k) * (k + 1) / (n - k - 1);
}

inline double mse(const SardFit& fit) {
  return fit.residuals.squaredNorm() / fit.n;
}

// likelihood-ratio pseudo R-squared against a supplied null log-likelihood
inline double nagelkerke_r2(double loglik, double loglik_null, int n) {
  if (n < 1) throw OutOfRange("nagelkerke_r2: empty sample");
  return 1.0 - std::exp(-2.0 * (loglik - loglik_null) / n);
}

struct MoranResult {
  double I = 0.0;
  double expected = 0.0;
  double variance = 0.0;
  double zscore = 0.0;
  double pvalue = 1.0;
};

namespace detail {

inline double normal_two_sided(double z) {
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

// Moran statistic with row-standardized band weights; also returns the
// weight sums needed for the normality moments
struct MoranParts {
  double I = 0.0;
  double S0 = 0.0, S1 = 0.0, S2 = 0.0;
};

inline MoranParts moran_parts(const Eigen::VectorXd& x,
                              const std::vector<std::vector<int>>& band) {
  const int n = static_cast<int>(x.size());
  if (static_cast<int>(band.size()) != n)
    throw DimensionMismatch("morans_i: field/band size mismatch");

  bool any = false;
  for (const auto& row : band)
    if (!row.empty()) {
      any = true;
      break;
    }
  if (!any) throw EmptyBand("morans_i: weight band has no pairs");

  const double mean = x.mean();
  const Eigen::VectorXd c = x.array() - mean;
  const double denom = c.squaredNorm();
  if (!(denom > 0.0))
    throw OutOfRange("morans_i: field has zero variance");

  // row-standardized weights w_ij = 1/deg_i
  MoranParts p;
  double cross = 0.0;
  Eigen::VectorXd row_sum = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd col_sum = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    if (band[i].empty()) continue;
    const double w = 1.0 / band[i].size();
    for (int j : band[i]) {
      cross += w * c[i] * c[j];
      p.S0 += w;
      row_sum[i] += w;
      col_sum[j] += w;
      const double wji = band[j].empty()
                             ? 0.0
                             : (std::find(band[j].begin(), band[j].end(), i) !=
                                        band[j].end()
                                    ? 1.0 / band[j].size()
                                    : 0.0);
      // the mirrored ordered pair is visited separately only when w_ji > 0
      p.S1 += (wji > 0.0 ? 0.5 : 1.0) * (w + wji) * (w + wji);
    }
  }
  for (int i = 0; i < n; ++i)
    p.S2 += (row_sum[i] + col_sum[i]) * (row_sum[i] + col_sum[i]);
  p.I = (n / p.S0) * cross / denom;
  return p;
}

}  // namespace detail

// Moran's I of a field over one adjacency band, null moments from the
// normality approximation
inline MoranResult morans_i(const Eigen::VectorXd& x,
                            const std::vector<std::vector<int>>& band) {
  const int n = static_cast<int>(x.size());
  const auto p = detail::moran_parts(x, band);

  MoranResult r;
  r.I = p.I;
  r.expected = -1.0 / (n - 1);
  const double s02 = p.S0 * p.S0;
  r.variance = (n * n * p.S1 - n * p.S2 + 3.0 * s02) /
                   ((static_cast<double>(n) - 1.0) * (n + 1.0) * s02) -
               r.expected * r.expected;
  r.zscore = (r.I - r.expected) / std::sqrt(std::max(r.variance, 1e-300));
  r.pvalue = detail::normal_two_sided(r.zscore);
  return r;
}

// permutation null instead of the normality approximation
inline MoranResult morans_i_permutation(const Eigen::VectorXd& x,
                                        const std::vector<std::vector<int>>& band,
                                        int replications, std::uint64_t seed) {
  if (replications < 1)
    throw OutOfRange("morans_i_permutation: need at least one replication");
  MoranResult r = morans_i(x, band);

  Rng rng(seed);
  Eigen::VectorXd perm = x;
  const int n = static_cast<int>(x.size());
  double sum = 0.0, sum2 = 0.0;
  int as_extreme = 0;
  for (int b = 0; b < replications; ++b) {
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.index(i + 1));
      std::swap(perm[i], perm[j]);
    }
    const double ib = detail::moran_parts(perm, band).I;
    sum += ib;
    sum2 += ib * ib;
    if (std::abs(ib - r.expected) >= std::abs(r.I - r.expected)) ++as_extreme;
  }
  const double mean = sum / replications;
  r.variance = std::max(sum2 / replications - mean * mean, 0.0);
  r.zscore = (r.I - mean) / std::sqrt(std::max(r.variance, 1e-300));
  r.pvalue = (1.0 + as_extreme) / (replications + 1.0);
  return r;
}

struct CorrelogramPoint {
  int order = 0;
  bool defined = false;  // false when the ring is empty, never reported as zero
  double I = 0.0;
  double lo = 0.0;  // 95% null band
  double hi = 0.0;
};

inline std::vector<CorrelogramPoint> moran_correlogram(
    const Eigen::VectorXd& x, const ContiguityStructure& contig, int Q) {
  if (Q < 1 || Q > contig.max_order)
    throw OutOfRange("moran_correlogram: order range outside contiguity depth");

  std::vector<CorrelogramPoint> out;
  for (int q = 1; q <= Q; ++q) {
    CorrelogramPoint pt;
    pt.order = q;
    try {
      const MoranResult r = morans_i(x, contig.band(q));
      pt.defined = true;
      pt.I = r.I;
      const double half = 1.959963984540054 * std::sqrt(std::max(r.variance, 0.0));
      pt.lo = r.expected - half;
      pt.hi = r.expected + half;
    } catch (const EmptyBand&) {
      pt.defined = false;
    }
    out.push_back(pt);
  }
  return out;
}

struct McSummary {
  std::vector<std::string> names;
  Eigen::VectorXd mean, bias, se, se_boot, rmse;
  double aicc_mean = 0.0;
  double mse_mean = 0.0;
  int replications = 0;
};

// Per-coefficient summary across Monte Carlo fits. RMSE is the literal root
// mean squared deviation from the truth, so for one replication it reduces
// to |bias| and in general RMSE^2 = bias^2 + population variance.
inline McSummary summarize_mc(const std::vector<SardFit>& fits,
                              const Eigen::VectorXd& truth,
                              const Eigen::MatrixXd* boot_se = nullptr) {
  if (fits.empty()) throw OutOfRange("summarize_mc: no fits");
  const int m = static_cast<int>(fits.size());
  const int p = static_cast<int>(fits.front().beta.size());
  if (truth.size() != p)
    throw DimensionMismatch("summarize_mc: truth length does not match fits");
  for (const auto& f : fits)
    if (f.names != fits.front().names)
      throw DimensionMismatch("summarize_mc: fits have different coefficient layouts");
  if (boot_se && (boot_se->rows() != m || boot_se->cols() != p))
    throw DimensionMismatch("summarize_mc: bootstrap table shape mismatch");

  Eigen::MatrixXd est(m, p);
  double aicc_sum = 0.0, mse_sum = 0.0;
  for (int i = 0; i < m; ++i) {
    est.row(i) = fits[i].beta.transpose();
    aicc_sum += aicc(fits[i].loglik, fits[i].k, fits[i].n);
    mse_sum += mse(fits[i]);
  }

  McSummary s;
  s.names = fits.front().names;
  s.replications = m;
  s.mean = est.colwise().mean();
  s.bias = s.mean - truth;
  s.se.resize(p);
  s.rmse.resize(p);
  for (int j = 0; j < p; ++j) {
    s.se[j] = std::sqrt((est.col(j).array() - s.mean[j]).square().sum() / m);
    s.rmse[j] = std::sqrt((est.col(j).array() - truth[j]).square().sum() / m);
  }
  s.se_boot = boot_se ? Eigen::VectorXd(boot_se->colwise().mean())
                      : Eigen::VectorXd::Constant(
                            p, std::numeric_limits<double>::quiet_NaN());
  s.aicc_mean = aicc_sum / m;
  s.mse_mean = mse_sum / m;
  return s;
}

// connected components of the super-threshold set under 4-adjacency on an
// n1 x n2 grid stored row-major with the first index fastest
inline int count_clusters(const Eigen::VectorXd& field, int n1, int n2,
                          double threshold, bool wrap = true) {
  if (static_cast<int>(field.size()) != n1 * n2)
    throw DimensionMismatch("count_clusters: field does not match grid shape");

  const int n = n1 * n2;
  std::vector<char> on(n), seen(n, 0);
  for (int i = 0; i < n; ++i) on[i] = field[i] > threshold;

  int clusters = 0;
  std::vector<int> stack;
  for (int start = 0; start < n; ++start) {
    if (!on[start] || seen[start]) continue;
    ++clusters;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      const int ix = cur % n1, iy = cur / n1;
      const int nbr[4][2] = {{ix - 1, iy}, {ix + 1, iy}, {ix, iy - 1}, {ix, iy + 1}};
      for (const auto& nb : nbr) {
        int jx = nb[0], jy = nb[1];
        if (wrap) {
          jx = (jx + n1) % n1;
          jy = (jy + n2) % n2;
        } else if (jx < 0 || jx >= n1 || jy < 0 || jy >= n2) {
          continue;
        }
        const int j = jy * n1 + jx;
        if (on[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return clusters;
}

}  // namespace sard
