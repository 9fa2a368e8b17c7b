#pragma once

// Nearest-centroid classification under a shared (pooled within-class)
// covariance, with Mahalanobis distances evaluated through a Cholesky
// factorization.

#include "sclqa/common.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace sclqa {

inline constexpr double kCovarianceRegularization = 1e-6;

struct CentroidModel {
  std::vector<ClassId> classes;  // ascending
  Matrix centroids;              // |C| x d
  Matrix covariance;             // d x d, regularized
  Eigen::LLT<Matrix> factor;
  double epsilon = 0.0;          // magnitude of the ridge actually added

  std::size_t dim() const { return static_cast<std::size_t>(centroids.cols()); }
  std::size_t class_count() const { return classes.size(); }

  std::size_t class_index(ClassId c) const {
    auto it = std::lower_bound(classes.begin(), classes.end(), c);
    if (it == classes.end() || *it != c) {
      throw std::invalid_argument("unknown class id " + std::to_string(c));
    }
    return static_cast<std::size_t>(it - classes.begin());
  }
};

namespace detail {

inline void factorize(CentroidModel& m) {
  m.factor.compute(m.covariance);
  if (m.factor.info() != Eigen::Success) {
    const Eigen::SelfAdjointEigenSolver<Matrix> es(m.covariance, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();
    const double cond = ev.maxCoeff() / std::max(std::abs(ev.minCoeff()), 1e-300);
    throw NumericError("covariance factorization failed (condition estimate " + fmt_real(cond, 3) +
                       ")");
  }
}

}  // namespace detail

/// Per-class means and the pooled within-class scatter normalized by the
/// total sample count, plus a ridge of eps * trace(S)/d on the diagonal.
inline CentroidModel fit_centroids(const Matrix& embeddings, std::span<const ClassId> labels,
                                   double eps = kCovarianceRegularization) {
  const auto n = embeddings.rows();
  const auto d = embeddings.cols();
  require(static_cast<std::size_t>(n) == labels.size(), "fit: one label per row is required");
  require(n >= 2, "fit: at least two samples are required");
  std::map<ClassId, std::vector<Eigen::Index>> members;
  for (Eigen::Index i = 0; i < n; ++i) {
    const ClassId c = labels[static_cast<std::size_t>(i)];
    if (c < 0) throw std::invalid_argument("fit: every sample needs a class label");
    members[c].push_back(i);
  }
  CentroidModel m;
  m.centroids.resize(static_cast<Eigen::Index>(members.size()), d);
  m.covariance = Matrix::Zero(d, d);
  Eigen::Index row = 0;
  for (const auto& [c, idx] : members) {
    m.classes.push_back(c);
    RowVector mean = RowVector::Zero(d);
    for (auto i : idx) mean += embeddings.row(i);
    mean /= static_cast<double>(idx.size());
    m.centroids.row(row++) = mean;
    Matrix centered(static_cast<Eigen::Index>(idx.size()), d);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      centered.row(static_cast<Eigen::Index>(k)) = embeddings.row(idx[k]) - mean;
    }
    m.covariance.noalias() += centered.transpose() * centered;
  }
  m.covariance /= static_cast<double>(n);
  m.covariance = 0.5 * (m.covariance + m.covariance.transpose());
  const double scale = m.covariance.trace() / static_cast<double>(d);
  // A zero scatter has no scale to borrow; fall back to a unit ridge.
  m.epsilon = eps * (scale > 0.0 ? scale : 1.0);
  m.covariance.diagonal().array() += m.epsilon;
  detail::factorize(m);
  return m;
}

/// Rebuilds a model from stored parts (covariance already regularized).
inline CentroidModel make_centroid_model(std::vector<ClassId> classes, Matrix centroids,
                                         Matrix covariance, double epsilon) {
  require(classes.size() == static_cast<std::size_t>(centroids.rows()),
          "centroid model: one centroid per class is required");
  require(covariance.rows() == centroids.cols() && covariance.cols() == centroids.cols(),
          "centroid model: covariance shape mismatch");
  require(std::is_sorted(classes.begin(), classes.end()), "centroid model: classes must be sorted");
  CentroidModel m;
  m.classes = std::move(classes);
  m.centroids = std::move(centroids);
  m.covariance = std::move(covariance);
  m.epsilon = epsilon;
  detail::factorize(m);
  return m;
}

inline double mahalanobis(const CentroidModel& m, const Vector& h, ClassId c) {
  require(static_cast<std::size_t>(h.size()) == m.dim(), "mahalanobis: dimension mismatch");
  const Vector diff = h - m.centroids.row(static_cast<Eigen::Index>(m.class_index(c))).transpose();
  return m.factor.matrixL().solve(diff).norm();
}

/// n x |C| matrix of Mahalanobis distances from each row of `h` to each centroid.
inline Matrix mahalanobis_all(const CentroidModel& m, const Matrix& h) {
  require(static_cast<std::size_t>(h.cols()) == m.dim(), "mahalanobis: dimension mismatch");
  Matrix out(h.rows(), static_cast<Eigen::Index>(m.class_count()));
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    Matrix diff = (h.rowwise() - m.centroids.row(c)).transpose();
    m.factor.matrixL().solveInPlace(diff);
    out.col(c) = diff.colwise().norm().transpose();
  }
  return out;
}

/// Nearest centroid by Mahalanobis distance; ties go to the lowest class id.
inline ClassId classify(const CentroidModel& m, const Vector& h) {
  if (m.classes.empty()) throw std::invalid_argument("classify: empty model");
  std::size_t best = 0;
  double best_d = mahalanobis(m, h, m.classes[0]);
  for (std::size_t k = 1; k < m.classes.size(); ++k) {
    const double d = mahalanobis(m, h, m.classes[k]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return m.classes[best];
}

inline std::vector<ClassId> classify_all(const CentroidModel& m, const Matrix& h) {
  if (m.classes.empty()) throw std::invalid_argument("classify: empty model");
  const Matrix dist = mahalanobis_all(m, h);
  std::vector<ClassId> out(static_cast<std::size_t>(h.rows()));
  for (Eigen::Index i = 0; i < dist.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < dist.cols(); ++c) {
      if (dist(i, c) < dist(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = m.classes[static_cast<std::size_t>(best)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model file: "CMD1", u32 version, u32 |C|, u32 d, |C| x u32 class ids,
// centroids and covariance row-major f32, f32 epsilon.

inline constexpr std::uint32_t kCentroidFormatVersion = 1;

inline void write_centroid_model(const CentroidModel& m, std::ostream& out) {
  binio::put_magic(out, "CMD1");
  binio::put_u32(out, kCentroidFormatVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(m.class_count()));
  binio::put_u32(out, static_cast<std::uint32_t>(m.dim()));
  for (ClassId c : m.classes) binio::put_u32(out, static_cast<std::uint32_t>(c));
  for (Eigen::Index r = 0; r < m.centroids.rows(); ++r) {
    for (Eigen::Index k = 0; k < m.centroids.cols(); ++k) binio::put_f32(out, m.centroids(r, k));
  }
  for (Eigen::Index r = 0; r < m.covariance.rows(); ++r) {
    for (Eigen::Index k = 0; k < m.covariance.cols(); ++k) binio::put_f32(out, m.covariance(r, k));
  }
  binio::put_f32(out, m.epsilon);
}

inline CentroidModel read_centroid_model(std::istream& in, const std::string& source) {
  binio::expect_magic(in, "CMD1", source);
  const auto version = binio::read_u32(in, source);
  if (version != kCentroidFormatVersion) {
    throw DataError(source + ": unsupported centroid model version " + std::to_string(version));
  }
  const auto n_classes = binio::read_u32(in, source);
  const auto d = binio::read_u32(in, source);
  std::vector<ClassId> classes(n_classes);
  for (auto& c : classes) c = static_cast<ClassId>(binio::read_u32(in, source));
  Matrix centroids(n_classes, d);
  for (Eigen::Index r = 0; r < centroids.rows(); ++r) {
    for (Eigen::Index k = 0; k < centroids.cols(); ++k) centroids(r, k) = binio::read_f32(in, source);
  }
  Matrix cov(d, d);
  for (Eigen::Index r = 0; r < cov.rows(); ++r) {
    for (Eigen::Index k = 0; k < cov.cols(); ++k) cov(r, k) = binio::read_f32(in, source);
  }
  const double eps = binio::read_f32(in, source);
  return make_centroid_model(std::move(classes), std::move(centroids), std::move(cov), eps);
}

inline void save_centroid_model(const CentroidModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_centroid_model(m, out);
}

inline CentroidModel load_centroid_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_centroid_model(in, path);
}

}  // namespace sclqa
