#pragma once

// Out-of-domain detection: the score of an input is its minimum Mahalanobis
// distance to any known centroid; scores at or above a threshold are OOD.

#include "sclqa/centroid.hpp"
#include "sclqa/dataset.hpp"

#include <algorithm>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace sclqa {

inline double ood_score(const CentroidModel& m, const Vector& h) {
  if (m.classes.empty()) throw std::invalid_argument("score: empty model");
  double best = std::numeric_limits<double>::infinity();
  for (ClassId c : m.classes) best = std::min(best, mahalanobis(m, h, c));
  return best;
}

inline std::vector<double> ood_scores(const CentroidModel& m, const Matrix& h) {
  if (m.classes.empty()) throw std::invalid_argument("score: empty model");
  const Matrix dist = mahalanobis_all(m, h);
  std::vector<double> out(static_cast<std::size_t>(h.rows()));
  for (Eigen::Index i = 0; i < dist.rows(); ++i) out[static_cast<std::size_t>(i)] = dist.row(i).minCoeff();
  return out;
}

struct DetectionCalibration {
  double lambda = std::numeric_limits<double>::infinity();
  double target_tpr = 0.9;
  std::string calibrated_on;
  double achieved_tpr = 0.0;
};

/// Largest threshold such that at least target_tpr of `ood_scores` are at or
/// above it: the k-th smallest score with k = n - ceil(target * n) + 1.
inline DetectionCalibration calibrate(std::span<const double> ood_scores, double target_tpr,
                                      std::string calibrated_on = {}) {
  if (ood_scores.empty()) throw std::invalid_argument("calibrate: no OOD scores");
  require(target_tpr > 0.0 && target_tpr <= 1.0, "calibrate: target TPR must be in (0,1]");
  std::vector<double> sorted(ood_scores.begin(), ood_scores.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  // The small slack keeps products like 0.9 * 10 from rounding up a whole count.
  auto need = static_cast<std::size_t>(std::ceil(target_tpr * double(n) - 1e-9));
  need = std::clamp<std::size_t>(need, 1, n);
  DetectionCalibration cal;
  cal.lambda = sorted[n - need];
  cal.target_tpr = target_tpr;
  cal.calibrated_on = std::move(calibrated_on);
  const auto at_or_above =
      static_cast<std::size_t>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), cal.lambda));
  cal.achieved_tpr = static_cast<double>(at_or_above) / static_cast<double>(n);
  return cal;
}

enum class Verdict { IND, OOD };

inline Verdict judge(double score, double lambda) { return score >= lambda ? Verdict::OOD : Verdict::IND; }

inline const char* to_string(Verdict v) { return v == Verdict::OOD ? "OOD" : "IND"; }

struct DetectionPartition {
  Dataset detected_ind;  // labels replaced by nearest-centroid pseudo-labels
  Dataset detected_ood;  // labels cleared
  std::vector<double> scores;
  std::vector<Verdict> verdicts;
};

/// Splits `data` by verdict. `representations` holds one encoded row per
/// sample; input order is preserved on both sides.
inline DetectionPartition partition(const CentroidModel& m, const DetectionCalibration& cal,
                                    const Dataset& data, const Matrix& representations) {
  require(static_cast<std::size_t>(representations.rows()) == data.size(),
          "partition: one representation per sample is required");
  DetectionPartition out;
  out.scores = ood_scores(m, representations);
  const auto pseudo = classify_all(m, representations);
  std::vector<std::size_t> ind, ood;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Verdict v = judge(out.scores[i], cal.lambda);
    out.verdicts.push_back(v);
    (v == Verdict::OOD ? ood : ind).push_back(i);
  }
  out.detected_ind = data.subset(ind);
  for (std::size_t k = 0; k < ind.size(); ++k) out.detected_ind.samples[k].label = pseudo[ind[k]];
  out.detected_ood = data.subset(ood);
  for (auto& s : out.detected_ood.samples) s.label.reset();
  return out;
}

}  // namespace sclqa
