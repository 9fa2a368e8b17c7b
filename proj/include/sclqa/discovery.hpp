#pragma once

// New-intent discovery: Lloyd's KMeans over detected-OOD representations,
// with distance-weighted seeding and restarts, and minting of fresh class
// ids for the clusters.

#include "sclqa/common.hpp"
#include "sclqa/dataset.hpp"

#include <limits>
#include <string>
#include <vector>

namespace sclqa {

struct KMeansOptions {
  int max_iter = 300;
  int restarts = 10;
};

struct ClusteringResult {
  int k = 0;
  Matrix centroids;              // k x d
  std::vector<int> assignments;  // cluster index per row
  double inertia = 0.0;
  int iterations = 0;
  int restarts = 1;
  /// Inertia after each assignment step of the winning run.
  std::vector<double> inertia_history;
  /// Set when an empty cluster could not be repaired.
  bool degenerate = false;
};

namespace detail {

inline int nearest(const Matrix& centroids, const RowVector& x, double* dist2 = nullptr) {
  int best = 0;
  double best_d = (centroids.row(0) - x).squaredNorm();
  for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist2) *dist2 = best_d;
  return best;
}

inline double assign_all(const Matrix& x, const Matrix& centroids, std::vector<int>& out) {
  out.resize(static_cast<std::size_t>(x.rows()));
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double d2;
    out[static_cast<std::size_t>(i)] = nearest(centroids, x.row(i), &d2);
    inertia += d2;
  }
  return inertia;
}

inline double inertia_of(const Matrix& x, const Matrix& centroids, const std::vector<int>& a) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    total += (x.row(i) - centroids.row(a[static_cast<std::size_t>(i)])).squaredNorm();
  }
  return total;
}

/// Distance-weighted seeding: each further seed is drawn with probability
/// proportional to its squared distance from the seeds chosen so far.
inline Matrix seed_centroids(const Matrix& x, int k, Rng& rng) {
  const auto n = static_cast<std::size_t>(x.rows());
  Matrix c(k, x.cols());
  std::vector<char> chosen(n, 0);
  std::size_t first = rng.index(n);
  chosen[first] = 1;
  c.row(0) = x.row(static_cast<Eigen::Index>(first));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (x.row(static_cast<Eigen::Index>(i)) - c.row(0)).squaredNorm();
  for (int j = 1; j < k; ++j) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        r -= d2[i];
        if (r < 0.0) break;
      }
    }
    if (pick == n) {
      // Every remaining point coincides with a seed; take any unchosen one.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) free.push_back(i);
      }
      pick = free[rng.index(free.size())];
    }
    chosen[pick] = 1;
    c.row(j) = x.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (x.row(static_cast<Eigen::Index>(i)) - c.row(j)).squaredNorm());
    }
  }
  return c;
}

inline void update_means(const Matrix& x, const std::vector<int>& a, Matrix& centroids,
                         std::vector<int>& counts) {
  const Matrix previous = centroids;
  centroids.setZero();
  counts.assign(static_cast<std::size_t>(centroids.rows()), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int c = a[static_cast<std::size_t>(i)];
    centroids.row(c) += x.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      centroids.row(c) /= counts[static_cast<std::size_t>(c)];
    } else {
      centroids.row(c) = previous.row(c);
    }
  }
}

}  // namespace detail

/// Lloyd iterations from the given initial centroids until the assignment
/// stops changing or max_iter is reached. An empty cluster takes over the
/// point farthest from its own centroid.
inline ClusteringResult kmeans_from(const Matrix& x, const Matrix& initial, int max_iter = 300) {
  require(initial.rows() >= 1 && initial.rows() <= x.rows(), "kmeans: need 1 <= k <= n");
  require(initial.cols() == x.cols(), "kmeans: centroid dimension mismatch");
  require(max_iter >= 1, "kmeans: max_iter must be positive");
  ClusteringResult r;
  r.k = static_cast<int>(initial.rows());
  r.centroids = initial;
  double inertia = detail::assign_all(x, r.centroids, r.assignments);
  r.inertia_history.push_back(inertia);
  std::vector<int> counts;
  std::vector<int> next;
  for (int it = 1; it <= max_iter; ++it) {
    r.iterations = it;
    detail::update_means(x, r.assignments, r.centroids, counts);
    for (int c = 0; c < r.k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const int own = r.assignments[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(own)] < 2) continue;
        const double d = (x.row(i) - r.centroids.row(own)).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0) {
        r.degenerate = true;
        continue;
      }
      --counts[static_cast<std::size_t>(r.assignments[static_cast<std::size_t>(far)])];
      r.assignments[static_cast<std::size_t>(far)] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      r.centroids.row(c) = x.row(far);
    }
    const double next_inertia = detail::assign_all(x, r.centroids, next);
    if (next_inertia > inertia * (1.0 + 1e-12) + 1e-12) {
      throw std::logic_error("kmeans: inertia increased from " + std::to_string(inertia) + " to " +
                             std::to_string(next_inertia));
    }
    inertia = next_inertia;
    r.inertia_history.push_back(inertia);
    const bool stable = next == r.assignments;
    r.assignments.swap(next);
    if (stable) break;
  }
  detail::update_means(x, r.assignments, r.centroids, counts);
  r.inertia = detail::inertia_of(x, r.centroids, r.assignments);
  return r;
}

/// Best of `opt.restarts` seeded runs by (inertia, restart index).
inline ClusteringResult kmeans(const Matrix& x, int k, std::uint64_t seed,
                               const KMeansOptions& opt = {}) {
  require(k >= 1, "kmeans: k must be positive");
  require(k <= x.rows(), "kmeans: k exceeds the number of points");
  require(opt.restarts >= 1, "kmeans: restarts must be positive");
  ClusteringResult best;
  for (int rs = 0; rs < opt.restarts; ++rs) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(rs)));
    auto r = kmeans_from(x, detail::seed_centroids(x, k, rng), opt.max_iter);
    if (rs == 0 || r.inertia < best.inertia) best = std::move(r);
  }
  best.restarts = opt.restarts;
  return best;
}

struct PseudoLabels {
  std::vector<ClassId> labels;  // minted class id per clustered row
  LabelCatalog catalog;         // input catalog with the minted ids as discovered
};

/// Cluster j becomes class max(known, unknown) + 1 + j.
inline PseudoLabels assign_pseudo_labels(const ClusteringResult& result, const LabelCatalog& catalog) {
  if (!catalog.discovered.empty()) {
    throw std::logic_error("assign_pseudo_labels: discovered ids were already minted");
  }
  require(result.k >= 1, "assign_pseudo_labels: empty clustering");
  const ClassId base = catalog.max_id() + 1;
  PseudoLabels out;
  out.catalog = catalog;
  for (int j = 0; j < result.k; ++j) out.catalog.discovered.push_back(base + j);
  for (int a : result.assignments) {
    require(a >= 0 && a < result.k, "assign_pseudo_labels: assignment out of range");
    out.labels.push_back(base + a);
  }
  out.catalog.validate();
  return out;
}

}  // namespace sclqa
