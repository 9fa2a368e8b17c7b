#pragma once

// Continual learning by replay: pseudo-labeled detected-IND data and
// pseudo-labeled discovered-OOD data are pooled, the encoder is retrained
// from its current parameters over the expanded label set, and the centroid
// model is refit.

#include "sclqa/centroid.hpp"
#include "sclqa/dataset.hpp"
#include "sclqa/encoder.hpp"
#include "sclqa/metrics.hpp"
#include "sclqa/scl_train.hpp"

#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

namespace sclqa {

/// GoldInd marks original training rows, which only enter the replay set
/// when gold replay is switched on.
enum class Provenance { PseudoInd, PseudoOod, GoldInd };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::PseudoInd: return "pseudo-ind";
    case Provenance::PseudoOod: return "pseudo-ood";
    case Provenance::GoldInd: return "gold-ind";
  }
  return "?";
}

struct ReplaySet {
  Dataset samples;
  std::vector<Provenance> provenance;

  std::size_t count(Provenance p) const {
    return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), p));
  }
};

/// Concatenates the two pseudo-labeled sides. Labels must be known ids on
/// the IND side and discovered ids on the OOD side.
inline ReplaySet build_replay_set(const Dataset& detected_ind, const Dataset& discovered,
                                  const LabelCatalog& catalog) {
  catalog.validate();
  if (!detected_ind.empty() && !discovered.empty() && detected_ind.dim != discovered.dim) {
    throw DataError("replay: the two sides have different dimensions");
  }
  ReplaySet out;
  out.samples.dim = detected_ind.empty() ? discovered.dim : detected_ind.dim;
  out.samples.catalog = catalog;
  out.samples.label_names = detected_ind.empty() ? discovered.label_names : detected_ind.label_names;
  std::unordered_set<std::string> ids;
  auto append = [&](const Dataset& side, Provenance p) {
    for (const auto& s : side.samples) {
      if (!s.label) throw DataError("replay: sample '" + s.id + "' has no pseudo-label");
      const bool ok = p == Provenance::PseudoInd ? catalog.is_known(*s.label) : catalog.is_discovered(*s.label);
      if (!ok) {
        throw DataError("replay: sample '" + s.id + "' has label " + std::to_string(*s.label) +
                        " outside the " + (p == Provenance::PseudoInd ? "known" : "discovered") + " set");
      }
      if (!ids.insert(s.id).second) throw DataError("replay: sample id '" + s.id + "' appears on both sides");
      out.samples.samples.push_back(s);
      out.provenance.push_back(p);
    }
  };
  append(detected_ind, Provenance::PseudoInd);
  append(discovered, Provenance::PseudoOod);
  return out;
}

struct RetrainResult {
  TrainResult train;
  CentroidModel model;
};

/// Warm-started contrastive retraining on the replay set. Early stopping
/// uses validation Macro F1 over the expanded label set; `val` must already
/// carry labels in that space.
inline RetrainResult retrain(const ProjectionEncoder& enc, const ReplaySet& replay, const Dataset& val,
                             const SclConfig& cfg, const TrainLog& log = {.metric = "val_macro_f1"}) {
  cfg.validate();
  const auto labels = replay.samples.labels();
  if (std::set<ClassId>(labels.begin(), labels.end()).size() < 2) {
    throw std::invalid_argument("retrain: replay set needs at least two classes");
  }
  RetrainResult out;
  out.train = train_scl(enc, replay.samples, cfg, macro_f1_validator(replay.samples, val), log);
  out.model = fit_centroids(encode(out.train.encoder, replay.samples), labels);
  return out;
}

/// Maps gold labels into the model's label space: known ids stay, unknown
/// ids go through `ood_mapping` (gold -> discovered), anything else becomes
/// kNoClass, which no model predicts.
inline std::vector<ClassId> map_gold_labels(std::span<const ClassId> gold, const LabelCatalog& catalog,
                                            const std::map<ClassId, ClassId>& ood_mapping) {
  std::vector<ClassId> out;
  out.reserve(gold.size());
  for (ClassId g : gold) {
    if (catalog.is_known(g)) {
      out.push_back(g);
    } else if (auto it = ood_mapping.find(g); it != ood_mapping.end()) {
      out.push_back(it->second);
    } else {
      out.push_back(kNoClass);
    }
  }
  return out;
}

struct ContinualReport {
  MetricsReport overall, on_ind, on_ood;
  std::size_t n_overall = 0, n_ind = 0, n_ood = 0;
  /// Gold OOD classes with no discovered counterpart; their samples count as errors.
  std::vector<ClassId> unmatched_classes;
};

/// Micro/Macro F1 of `pred` against gold test labels, overall and split by
/// whether the gold label is known (IND) or unknown (OOD).
inline ContinualReport evaluate_continual(std::span<const ClassId> pred, const Dataset& test2,
                                          const LabelCatalog& catalog,
                                          const std::map<ClassId, ClassId>& ood_mapping) {
  require(pred.size() == test2.size(), "evaluate_continual: one prediction per sample is required");
  const auto gold = test2.labels();
  const auto mapped = map_gold_labels(gold, catalog, ood_mapping);
  ContinualReport r;
  std::vector<ClassId> t_ind, p_ind, t_ood, p_ood;
  std::set<ClassId> unmatched;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == kNoClass) throw DataError("evaluate_continual: sample '" + test2.samples[i].id + "' is unlabeled");
    if (catalog.is_known(gold[i])) {
      t_ind.push_back(mapped[i]);
      p_ind.push_back(pred[i]);
    } else if (catalog.is_unknown(gold[i])) {
      if (mapped[i] == kNoClass) unmatched.insert(gold[i]);
      t_ood.push_back(mapped[i]);
      p_ood.push_back(pred[i]);
    } else {
      throw DataError("evaluate_continual: label " + std::to_string(gold[i]) + " is neither known nor unknown");
    }
  }
  // Slice Macro F1 averages over the slice's own gold classes, so a stray
  // prediction of a class from the other slice costs recall without adding a
  // zero-F1 class to the average.
  auto fill = [](MetricsReport& m, std::span<const ClassId> t, std::span<const ClassId> p, bool slice) {
    if (t.empty()) return;
    const std::vector<ClassId> own = slice ? std::vector<ClassId>(t.begin(), t.end()) : std::vector<ClassId>{};
    const auto f = micro_macro_f1(t, p, own);
    m.micro_f1 = f.micro;
    m.macro_f1 = f.macro;
  };
  fill(r.overall, mapped, pred, false);
  fill(r.on_ind, t_ind, p_ind, true);
  fill(r.on_ood, t_ood, p_ood, true);
  r.n_overall = gold.size();
  r.n_ind = t_ind.size();
  r.n_ood = t_ood.size();
  r.unmatched_classes.assign(unmatched.begin(), unmatched.end());
  return r;
}

inline ContinualReport evaluate_continual(const ProjectionEncoder& enc, const CentroidModel& model,
                                          const Dataset& test2, const LabelCatalog& catalog,
                                          const std::map<ClassId, ClassId>& ood_mapping) {
  const auto pred = classify_all(model, encode(enc, test2));
  return evaluate_continual(pred, test2, catalog, ood_mapping);
}

}  // namespace sclqa
