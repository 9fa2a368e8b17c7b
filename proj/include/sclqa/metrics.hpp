#pragma once

// Evaluation metrics: micro/macro F1, threshold-free OOD detection metrics
// (AUROC, AUPR, FPR at a target TPR), clustering agreement (NMI, ARI) and
// clustering accuracy under the optimal one-to-one label mapping.

#include "sclqa/common.hpp"
#include "sclqa/ood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace sclqa {

// ---------------------------------------------------------------------------
// Linear assignment.

struct Assignment {
  std::vector<int> row_to_col;  // -1 when the row is unmatched
  double total_cost = 0.0;
};

/// Minimum-cost one-to-one assignment of min(r, c) pairs. Rectangular inputs
/// are padded to square with zero-cost dummies. O(n^3) shortest augmenting
/// path with potentials.
inline Assignment hungarian_assign(const Matrix& cost) {
  if (!cost.allFinite()) throw std::invalid_argument("hungarian_assign: non-finite cost");
  const auto r = static_cast<int>(cost.rows());
  const auto c = static_cast<int>(cost.cols());
  const int n = std::max(r, c);
  Assignment out;
  out.row_to_col.assign(static_cast<std::size_t>(r), -1);
  if (n == 0) return out;
  auto at = [&](int i, int j) { return (i < r && j < c) ? cost(i, j) : 0.0; };
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual start.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= n; ++j) {
    const int i = match[j] - 1;
    if (i < r && j - 1 < c) {
      out.row_to_col[static_cast<std::size_t>(i)] = j - 1;
      out.total_cost += cost(i, j - 1);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification.

struct F1Scores {
  double micro = 0.0;
  double macro = 0.0;
};

/// Micro F1 pools TP/FP/FN over classes; macro F1 averages per-class F1 over
/// every class present in the truth or the predictions, or over `macro_classes`
/// when that is non-empty.
inline F1Scores micro_macro_f1(std::span<const ClassId> truth, std::span<const ClassId> pred,
                               std::span<const ClassId> macro_classes = {}) {
  require(truth.size() == pred.size(), "f1: length mismatch");
  require(!truth.empty(), "f1: empty input");
  struct Counts {
    long tp = 0, fp = 0, fn = 0;
  };
  std::map<ClassId, Counts> per_class;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == pred[i]) {
      ++per_class[truth[i]].tp;
    } else {
      ++per_class[truth[i]].fn;
      ++per_class[pred[i]].fp;
    }
  }
  long tp = 0, fp = 0, fn = 0;
  auto class_f1 = [](const Counts& k) {
    const long denom = 2 * k.tp + k.fp + k.fn;
    return denom > 0 ? 2.0 * double(k.tp) / double(denom) : 0.0;
  };
  double macro = 0.0;
  for (const auto& [c, k] : per_class) {
    tp += k.tp;
    fp += k.fp;
    fn += k.fn;
    if (macro_classes.empty()) macro += class_f1(k);
  }
  std::size_t macro_count = per_class.size();
  if (!macro_classes.empty()) {
    const std::set<ClassId> chosen(macro_classes.begin(), macro_classes.end());
    for (ClassId c : chosen) {
      auto it = per_class.find(c);
      if (it != per_class.end()) macro += class_f1(it->second);
    }
    macro_count = chosen.size();
  }
  F1Scores out;
  const double p = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  const double r = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  out.micro = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  out.macro = macro / static_cast<double>(macro_count);
  return out;
}

// ---------------------------------------------------------------------------
// Detection (OOD is the positive class).

namespace detail {

inline void require_both_classes(std::span<const double> scores, const std::vector<bool>& is_ood,
                                 const char* what) {
  require(scores.size() == is_ood.size(), std::string(what) + ": length mismatch");
  const auto pos = std::count(is_ood.begin(), is_ood.end(), true);
  if (pos == 0 || pos == static_cast<long>(is_ood.size())) {
    throw std::invalid_argument(std::string(what) + ": both IND and OOD samples are required");
  }
}

}  // namespace detail

/// Mann-Whitney statistic with average ranks for ties.
inline double roc_auroc(std::span<const double> scores, const std::vector<bool>& is_ood) {
  detail::require_both_classes(scores, is_ood, "auroc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (is_ood[order[k]]) {
        rank_sum += avg_rank;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = double(n) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Step-wise area under the precision-recall curve: at each distinct
/// threshold t (score >= t is positive) add (recall gain) * precision.
inline double aupr(std::span<const double> scores, const std::vector<bool>& is_ood) {
  require(scores.size() == is_ood.size(), "aupr: length mismatch");
  const auto total_pos = std::count(is_ood.begin(), is_ood.end(), true);
  if (total_pos == 0) throw std::invalid_argument("aupr: no positive (OOD) samples");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double area = 0.0, prev_recall = 0.0;
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (is_ood[order[j]] ? tp : fp) += 1;
      ++j;
    }
    const double recall = double(tp) / double(total_pos);
    const double precision = double(tp) / double(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

/// FPR at the largest threshold whose TPR reaches `target_tpr`.
inline double fpr_at_tpr(std::span<const double> scores, const std::vector<bool>& is_ood,
                         double target_tpr = 0.9) {
  detail::require_both_classes(scores, is_ood, "fpr_at_tpr");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (is_ood[i] ? pos : neg).push_back(scores[i]);
  const double lambda = calibrate(pos, target_tpr).lambda;
  const auto fp = std::count_if(neg.begin(), neg.end(), [&](double s) { return s >= lambda; });
  return double(fp) / double(neg.size());
}

// ---------------------------------------------------------------------------
// Clustering.

struct Contingency {
  std::vector<ClassId> row_labels;  // distinct values of the first argument
  std::vector<ClassId> col_labels;  // distinct values of the second argument
  Matrix counts;
};

inline Contingency contingency(std::span<const ClassId> a, std::span<const ClassId> b) {
  require(a.size() == b.size(), "contingency: length mismatch");
  Contingency t;
  std::map<ClassId, Eigen::Index> ra, cb;
  for (auto x : a) ra.emplace(x, 0);
  for (auto x : b) cb.emplace(x, 0);
  for (auto& [k, v] : ra) {
    v = static_cast<Eigen::Index>(t.row_labels.size());
    t.row_labels.push_back(k);
  }
  for (auto& [k, v] : cb) {
    v = static_cast<Eigen::Index>(t.col_labels.size());
    t.col_labels.push_back(k);
  }
  t.counts = Matrix::Zero(static_cast<Eigen::Index>(ra.size()), static_cast<Eigen::Index>(cb.size()));
  for (std::size_t i = 0; i < a.size(); ++i) t.counts(ra[a[i]], cb[b[i]]) += 1.0;
  return t;
}

/// 2 I(U;V) / (H(U) + H(V)), natural logs; 1 when both sides are a single cluster.
inline double nmi(std::span<const ClassId> a, std::span<const ClassId> b) {
  require(a.size() == b.size(), "nmi: length mismatch");
  require(!a.empty(), "nmi: empty input");
  const auto t = contingency(a, b);
  const double n = static_cast<double>(a.size());
  const Vector pa = t.counts.rowwise().sum() / n;
  const Vector pb = t.counts.colwise().sum().transpose() / n;
  auto entropy = [](const Vector& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    }
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  double mi = 0.0;
  for (Eigen::Index i = 0; i < t.counts.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.counts.cols(); ++j) {
      const double pij = t.counts(i, j) / n;
      if (pij > 0.0) mi += pij * std::log(pij / (pa[i] * pb[j]));
    }
  }
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

/// Adjusted Rand index by pair counting.
inline double ari(std::span<const ClassId> a, std::span<const ClassId> b) {
  require(a.size() == b.size(), "ari: length mismatch");
  require(!a.empty(), "ari: empty input");
  const auto t = contingency(a, b);
  auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double sum_ij = 0.0;
  for (Eigen::Index i = 0; i < t.counts.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.counts.cols(); ++j) sum_ij += c2(t.counts(i, j));
  }
  double sum_a = 0.0, sum_b = 0.0;
  const Vector ra = t.counts.rowwise().sum();
  const RowVector cb = t.counts.colwise().sum();
  for (Eigen::Index i = 0; i < ra.size(); ++i) sum_a += c2(ra[i]);
  for (Eigen::Index j = 0; j < cb.size(); ++j) sum_b += c2(cb[j]);
  const double total = c2(static_cast<double>(a.size()));
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double max_index = 0.5 * (sum_a + sum_b);
  // Degenerate: both partitions trivial in the same way, so they agree.
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

struct ClusteringAccuracy {
  double acc = 0.0;
  std::map<ClassId, ClassId> mapping;  // cluster label -> true label
  std::size_t unmatched_clusters = 0;
};

/// Fraction of samples whose cluster maps to their true label under the
/// best one-to-one cluster-to-class mapping. Unmatched clusters count as errors.
inline ClusteringAccuracy clustering_acc(std::span<const ClassId> truth,
                                         std::span<const ClassId> clusters) {
  require(truth.size() == clusters.size(), "clustering_acc: length mismatch");
  require(!truth.empty(), "clustering_acc: empty input");
  const auto t = contingency(clusters, truth);
  const auto assign = hungarian_assign(-t.counts);
  ClusteringAccuracy out;
  double matched = 0.0;
  for (std::size_t i = 0; i < assign.row_to_col.size(); ++i) {
    const int j = assign.row_to_col[i];
    if (j < 0) {
      ++out.unmatched_clusters;
      continue;
    }
    out.mapping[t.row_labels[i]] = t.col_labels[static_cast<std::size_t>(j)];
    matched += t.counts(static_cast<Eigen::Index>(i), j);
  }
  out.acc = matched / static_cast<double>(truth.size());
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricsReport {
  std::optional<double> micro_f1, macro_f1;
  std::optional<double> auroc, aupr, fpr90;
  std::optional<double> nmi, ari, acc;

  /// Column names and values in canonical order.
  std::vector<std::pair<std::string, std::optional<double>>> entries() const {
    return {{"Micro F1", micro_f1}, {"Macro F1", macro_f1}, {"AUROC", auroc}, {"AUPR", aupr},
            {"FPR90", fpr90},       {"NMI", nmi},           {"ARI", ari},     {"ACC", acc}};
  }

  void validate() const {
    for (const auto& [name, v] : entries()) {
      if (!v) continue;
      const double lo = name == "ARI" ? -1.0 : 0.0;
      if (!(*v >= lo - 1e-12 && *v <= 1.0 + 1e-12)) {
        throw NumericError("metric " + name + " out of range: " + fmt_real(*v));
      }
    }
  }

  /// `Name=value` lines for the present metrics.
  std::string to_key_values() const {
    std::ostringstream os;
    for (const auto& [name, v] : entries()) {
      if (v) os << name << '=' << fmt_real(*v) << '\n';
    }
    return os.str();
  }

  std::string csv_header() const {
    std::string out;
    for (const auto& [name, v] : entries()) {
      if (!out.empty()) out += ',';
      out += name;
    }
    return out;
  }

  std::string csv_row() const {
    std::string out;
    bool first = true;
    for (const auto& [name, v] : entries()) {
      if (!first) out += ',';
      first = false;
      if (v) out += fmt_real(*v);
    }
    return out;
  }
};

}  // namespace sclqa
