#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "sard/common.hpp"

namespace sard {

enum class Topology { planar, torus };

// Discrete spatial domain: location centroids, per-location areas, and the
// metric (planar Euclidean or torus with minimum-image wrapping).
struct SpatialDomain {
  Eigen::Matrix<double, Eigen::Dynamic, 2> z;  // centroids, one row per location
  Eigen::VectorXd area;
  Topology topology = Topology::planar;
  double width = 0.0;   // torus extent along z1
  double height = 0.0;  // torus extent along z2
  std::vector<std::string> id;

  int size() const { return static_cast<int>(z.rows()); }

  double total_area() const { return area.sum(); }

  // displacement z_i - z_j, wrapped to the nearest image on the torus
  Eigen::Vector2d offset(int i, int j) const {
    Eigen::Vector2d d = z.row(i) - z.row(j);
    if (topology == Topology::torus) {
      d.x() -= width * std::round(d.x() / width);
      d.y() -= height * std::round(d.y() / height);
    }
    return d;
  }

  double distance(int i, int j) const { return offset(i, j).norm(); }
};

inline SpatialDomain build_domain(const std::vector<Eigen::Vector2d>& points,
                                  const std::vector<double>& areas,
                                  Topology topology, double width = 0.0,
                                  double height = 0.0,
                                  std::vector<std::string> ids = {}) {
  if (points.size() != areas.size())
    throw DimensionMismatch("build_domain: points/areas length mismatch");
  if (points.empty()) throw TooFewLocations("build_domain: empty domain");

  SpatialDomain d;
  d.topology = topology;
  d.width = width;
  d.height = height;
  const int n = static_cast<int>(points.size());
  d.z.resize(n, 2);
  d.area.resize(n);
  for (int i = 0; i < n; ++i) {
    if (!(areas[i] > 0.0))
      throw NonpositiveArea("build_domain: area[" + std::to_string(i) +
                            "] = " + std::to_string(areas[i]));
    if (topology == Topology::torus) {
      if (!(width > 0.0 && height > 0.0))
        throw CoordinateOutOfRange("build_domain: torus extents must be positive");
      if (points[i].x() < 0.0 || points[i].x() >= width ||
          points[i].y() < 0.0 || points[i].y() >= height)
        throw CoordinateOutOfRange("build_domain: point " + std::to_string(i) +
                                   " outside [0,width)x[0,height)");
    }
    d.z(i, 0) = points[i].x();
    d.z(i, 1) = points[i].y();
    d.area[i] = areas[i];
  }
  if (ids.empty()) {
    d.id.resize(n);
    for (int i = 0; i < n; ++i) d.id[i] = std::to_string(i);
  } else {
    if (static_cast<int>(ids.size()) != n)
      throw DimensionMismatch("build_domain: ids length mismatch");
    d.id = std::move(ids);
  }

  // duplicate detection via lexicographic sort, O(N log N)
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (d.z(a, 0) != d.z(b, 0)) return d.z(a, 0) < d.z(b, 0);
    return d.z(a, 1) < d.z(b, 1);
  });
  for (int k = 1; k < n; ++k) {
    const int a = order[k - 1], b = order[k];
    if (d.z(a, 0) == d.z(b, 0) && d.z(a, 1) == d.z(b, 1))
      throw DuplicateLocation("build_domain: locations " + std::to_string(a) +
                              " and " + std::to_string(b) + " coincide");
  }
  return d;
}

// n_side x n_side grid of equal cells covering a width x height torus, with
// centroids at cell centers and uniform areas.
inline SpatialDomain uniform_torus_grid(int n1, int n2, double width = 1.0,
                                        double height = 1.0) {
  std::vector<Eigen::Vector2d> pts;
  std::vector<double> areas;
  pts.reserve(static_cast<std::size_t>(n1) * n2);
  const double dx = width / n1, dy = height / n2;
  for (int iy = 0; iy < n2; ++iy)
    for (int ix = 0; ix < n1; ++ix) {
      pts.emplace_back((ix + 0.5) * dx, (iy + 0.5) * dy);
      areas.push_back(dx * dy);
    }
  return build_domain(pts, areas, Topology::torus, width, height);
}

// Uniform-bin spatial index shared by star construction, kernel matrices and
// the particle engine. Bins never straddle the torus seam because the bin
// count divides the extent exactly.
class CellIndex {
 public:
  CellIndex(const Eigen::Matrix<double, Eigen::Dynamic, 2>& pts,
            Topology topology, double width, double height, double target_cell)
      : pts_(pts), topology_(topology) {
    const int n = static_cast<int>(pts.rows());
    if (topology == Topology::torus) {
      x0_ = 0.0;
      y0_ = 0.0;
      wx_ = width;
      wy_ = height;
    } else {
      x0_ = pts.col(0).minCoeff();
      y0_ = pts.col(1).minCoeff();
      wx_ = std::max(pts.col(0).maxCoeff() - x0_,
                     std::numeric_limits<double>::min());
      wy_ = std::max(pts.col(1).maxCoeff() - y0_,
                     std::numeric_limits<double>::min());
    }
    nx_ = std::max(1, static_cast<int>(std::floor(wx_ / target_cell)));
    ny_ = std::max(1, static_cast<int>(std::floor(wy_ / target_cell)));
    cx_ = wx_ / nx_;
    cy_ = wy_ / ny_;
    cells_.assign(static_cast<std::size_t>(nx_) * ny_, {});
    for (int i = 0; i < n; ++i) cells_[cell_of(pts(i, 0), pts(i, 1))].push_back(i);
  }

  explicit CellIndex(const SpatialDomain& d, double target_cell)
      : CellIndex(d.z, d.topology, d.width, d.height, target_cell) {}

  // visit every point within distance r of p (inclusive); f(j, d2).
  // Each bin is visited exactly once even when the search ring wraps all the
  // way around the torus.
  template <typename F>
  void for_each_within(const Eigen::Vector2d& p, double r, F&& f) const {
    const double r2 = r * r;
    int rx = static_cast<int>(std::floor(r / cx_)) + 1;
    int ry = static_cast<int>(std::floor(r / cy_)) + 1;
    const int bx = bin_x(p.x()), by = bin_y(p.y());
    int gy0 = by - ry, gy1 = by + ry;
    int gx0 = bx - rx, gx1 = bx + rx;
    if (topology_ == Topology::torus) {
      if (gy1 - gy0 + 1 >= ny_) { gy0 = 0; gy1 = ny_ - 1; }
      if (gx1 - gx0 + 1 >= nx_) { gx0 = 0; gx1 = nx_ - 1; }
    }
    for (int gy = gy0; gy <= gy1; ++gy) {
      for (int gx = gx0; gx <= gx1; ++gx) {
        const int c = wrap_cell(gx, gy);
        if (c < 0) continue;
        for (int j : cells_[c]) {
          const double d2 = dist2(p, j);
          if (d2 <= r2) f(j, d2);
        }
      }
    }
  }

  // k nearest points to location i (excluding i), ties broken by lower index
  std::vector<int> k_nearest(const Eigen::Matrix<double, Eigen::Dynamic, 2>& all,
                             int i, int k) const {
    const Eigen::Vector2d p = all.row(i);
    std::vector<std::pair<double, int>> found;
    double radius = std::max(cx_, cy_);
    const double rmax = 0.5 * std::hypot(wx_, wy_) * 2.0 + 1.0;
    while (true) {
      found.clear();
      for_each_within(p, radius, [&](int j, double d2) {
        if (j != i) found.emplace_back(d2, j);
      });
      if (static_cast<int>(found.size()) >= k) {
        std::sort(found.begin(), found.end());
        // certified only if the k-th distance is inside the searched radius
        if (found[k - 1].first <= radius * radius || radius > rmax) break;
      }
      if (radius > rmax) break;
      radius *= 2.0;
    }
    if (static_cast<int>(found.size()) < k)
      throw TooFewLocations("k_nearest: fewer than k reachable points");
    std::vector<int> out(k);
    for (int m = 0; m < k; ++m) out[m] = found[m].second;
    return out;
  }

  double dist2(const Eigen::Vector2d& p, int j) const {
    double dx = p.x() - pts_(j, 0);
    double dy = p.y() - pts_(j, 1);
    if (topology_ == Topology::torus) {
      dx -= wx_ * std::round(dx / wx_);
      dy -= wy_ * std::round(dy / wy_);
    }
    return dx * dx + dy * dy;
  }

 private:
  int bin_x(double x) const {
    int b = static_cast<int>(std::floor((x - x0_) / cx_));
    return std::clamp(b, 0, nx_ - 1);
  }
  int bin_y(double y) const {
    int b = static_cast<int>(std::floor((y - y0_) / cy_));
    return std::clamp(b, 0, ny_ - 1);
  }
  int cell_of(double x, double y) const { return bin_y(y) * nx_ + bin_x(x); }

  int wrap_cell(int gx, int gy) const {
    if (topology_ == Topology::torus) {
      gx = ((gx % nx_) + nx_) % nx_;
      gy = ((gy % ny_) + ny_) % ny_;
    } else {
      if (gx < 0 || gx >= nx_ || gy < 0 || gy >= ny_) return -1;
    }
    return gy * nx_ + gx;
  }

  const Eigen::Matrix<double, Eigen::Dynamic, 2>& pts_;
  Topology topology_;
  double x0_, y0_, wx_, wy_, cx_, cy_;
  int nx_, ny_;
  std::vector<std::vector<int>> cells_;
};

// Neighborhood star: the n_s nearest locations around a center, with wrapped
// offsets h_j = z1(center) - z1(member), k_j = z2(center) - z2(member).
struct Star {
  int center = -1;
  std::vector<int> members;
  std::vector<Eigen::Vector2d> offsets;  // (h_j, k_j) per member
  double dm = 0.0;                       // max member distance
};

inline std::vector<Star> build_stars(const SpatialDomain& d, int n_s) {
  const int n = d.size();
  if (n < n_s + 1)
    throw TooFewLocations("build_stars: need at least n_s+1 locations");

  // bin size targeting ~n_s points per search neighborhood
  const double target =
      std::sqrt(std::max(n_s, 1) *
                (d.topology == Topology::torus
                     ? d.width * d.height
                     : (d.z.col(0).maxCoeff() - d.z.col(0).minCoeff() + 1e-300) *
                           (d.z.col(1).maxCoeff() - d.z.col(1).minCoeff() + 1e-300)) /
                n);
  CellIndex index(d, std::max(target, 1e-12));

  std::vector<Star> stars(n);
  for (int i = 0; i < n; ++i) {
    Star s;
    s.center = i;
    s.members = index.k_nearest(d.z, i, n_s);
    s.offsets.resize(s.members.size());
    s.dm = 0.0;
    for (std::size_t m = 0; m < s.members.size(); ++m) {
      s.offsets[m] = d.offset(i, s.members[m]);
      s.dm = std::max(s.dm, s.offsets[m].norm());
    }
    stars[i] = std::move(s);
  }
  return stars;
}

// Contiguity orders: first-order adjacency from either the minimum pairwise
// distance (grid rook) or an explicit distance threshold, higher orders by
// breadth-first hop counts. Orders are symmetric because the base graph is.
struct ContiguityStructure {
  int max_order = 0;
  // per location: (neighbor, hop order), sorted by (order, neighbor)
  std::vector<std::vector<std::pair<int, int>>> reach;
  bool disconnected = false;  // base graph has more than one component

  // exclusive ring of order q as an adjacency list
  std::vector<std::vector<int>> band(int q) const {
    std::vector<std::vector<int>> out(reach.size());
    for (std::size_t i = 0; i < reach.size(); ++i)
      for (const auto& [j, ord] : reach[i])
        if (ord == q) out[i].push_back(j);
    return out;
  }

  // binary exclusive-ring matrix W_q - W_{q-1}
  Eigen::SparseMatrix<double> band_matrix(int q) const {
    const int n = static_cast<int>(reach.size());
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < n; ++i)
      for (const auto& [j, ord] : reach[i])
        if (ord == q) trip.emplace_back(i, j, 1.0);
    Eigen::SparseMatrix<double> w(n, n);
    w.setFromTriplets(trip.begin(), trip.end());
    return w;
  }

  // binary cumulative matrix W_q (all orders <= q)
  Eigen::SparseMatrix<double> cumulative_matrix(int q) const {
    const int n = static_cast<int>(reach.size());
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < n; ++i)
      for (const auto& [j, ord] : reach[i])
        if (ord <= q) trip.emplace_back(i, j, 1.0);
    Eigen::SparseMatrix<double> w(n, n);
    w.setFromTriplets(trip.begin(), trip.end());
    return w;
  }
};

enum class ContiguityMethod { rook_on_grid, distance_threshold };

inline ContiguityStructure contiguity(const SpatialDomain& d,
                                      ContiguityMethod method, int max_order,
                                      double threshold = 0.0) {
  if (max_order < 1) throw OutOfRange("contiguity: max_order must be >= 1");
  const int n = d.size();

  double cutoff = threshold;
  if (method == ContiguityMethod::rook_on_grid) {
    // rook adjacency = everything at the minimum pairwise distance
    double dmin2 = std::numeric_limits<double>::infinity();
    const double probe = std::sqrt((d.topology == Topology::torus
                                        ? d.width * d.height
                                        : 1.0) /
                                   std::max(n, 1)) *
                         4.0;
    CellIndex idx(d, std::max(probe, 1e-12));
    for (int i = 0; i < n; ++i) {
      Eigen::Vector2d p = d.z.row(i);
      idx.for_each_within(p, probe, [&](int j, double d2) {
        if (j != i && d2 < dmin2) dmin2 = d2;
      });
    }
    if (!std::isfinite(dmin2))
      throw TooFewLocations("contiguity: no neighbor within probe radius");
    cutoff = std::sqrt(dmin2) * (1.0 + 1e-9);
  } else if (!(threshold > 0.0)) {
    throw OutOfRange("contiguity: distance threshold must be positive");
  }

  // first-order adjacency lists
  CellIndex idx(d, std::max(cutoff, 1e-12));
  std::vector<std::vector<int>> adj(n);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector2d p = d.z.row(i);
    idx.for_each_within(p, cutoff, [&](int j, double) {
      if (j != i) adj[i].push_back(j);
    });
    std::sort(adj[i].begin(), adj[i].end());
  }

  ContiguityStructure c;
  c.max_order = max_order;
  c.reach.resize(n);

  // BFS per location up to max_order hops
  std::vector<int> dist(n, -1);
  std::vector<int> touched;
  std::vector<int> frontier, next;
  for (int i = 0; i < n; ++i) {
    touched.clear();
    frontier.assign(1, i);
    dist[i] = 0;
    touched.push_back(i);
    for (int q = 1; q <= max_order && !frontier.empty(); ++q) {
      next.clear();
      for (int u : frontier)
        for (int v : adj[u])
          if (dist[v] < 0) {
            dist[v] = q;
            touched.push_back(v);
            next.push_back(v);
            c.reach[i].emplace_back(v, q);
          }
      frontier.swap(next);
    }
    std::sort(c.reach[i].begin(), c.reach[i].end(),
              [](const auto& a, const auto& b) {
                return a.second != b.second ? a.second < b.second
                                            : a.first < b.first;
              });
    for (int t : touched) dist[t] = -1;
  }

  // connectivity of the base graph (union-find over first-order edges)
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (int i = 0; i < n; ++i)
    for (int j : adj[i]) parent[find(i)] = find(j);
  int root = find(0);
  for (int i = 1; i < n && !c.disconnected; ++i)
    if (find(i) != root) c.disconnected = true;

  return c;
}

}  // namespace sard
