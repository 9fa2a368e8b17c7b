#pragma once

// Contrastive pre-training of the projection encoder: dropout views,
// class-aware mini-batches, plain SGD, and early stopping on a validation
// score (OOD-detection AUROC by default).

#include "sclqa/centroid.hpp"
#include "sclqa/dataset.hpp"
#include "sclqa/encoder.hpp"
#include "sclqa/metrics.hpp"
#include "sclqa/ood.hpp"
#include "sclqa/scl_loss.hpp"

#include <chrono>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace sclqa {

struct SclConfig {
  double temperature = 0.1;
  int n_views = 2;
  double dropout_p = 0.1;
  double learning_rate = 5e-2;
  int batch_size = 64;
  int max_epochs = 20;
  std::uint64_t seed = 0;
  bool inclusive_denominator = false;
  double target_tpr = 0.9;

  void validate() const {
    require(temperature > 0.0, "temperature must be positive");
    require(n_views >= 2, "n_views must be at least 2");
    require(dropout_p >= 0.0 && dropout_p < 1.0, "dropout must be in [0,1)");
    require(learning_rate > 0.0, "learning rate must be positive");
    require(batch_size >= 2, "batch size must be at least 2");
    require(max_epochs >= 1, "max_epochs must be at least 1");
    require(target_tpr > 0.0 && target_tpr <= 1.0, "target TPR must be in (0,1]");
  }
};

struct TrainRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_score = 0.0;  // validation AUROC unless a custom criterion is used
  bool is_best = false;
  double wall_ms = 0.0;
};

/// Outcome of one validation pass: the early-stopping score, plus the
/// detection threshold when the criterion produces one.
struct Validation {
  double score = 0.0;
  std::optional<DetectionCalibration> calibration;
};

using Validator = std::function<Validation(const ProjectionEncoder&)>;

struct TrainResult {
  ProjectionEncoder encoder;
  std::vector<TrainRecord> history;
  int best_epoch = 0;
  double best_score = 0.0;
  std::optional<DetectionCalibration> calibration;
};

/// Where per-epoch progress goes; `method` tags every line.
struct TrainLog {
  std::ostream* out = nullptr;
  std::string method = "scl";
  std::string metric = "val_auroc";
};

// ---------------------------------------------------------------------------
// Batching.

/// Shuffled mini-batches of sample indices, none of which is single-class.
/// A short tail is folded into the previous batch. Orders containing a
/// single-class batch are re-drawn.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const ClassId> labels,
                                                          int batch_size, Rng& rng) {
  const std::size_t n = labels.size();
  require(batch_size >= 2, "make_batches: batch size must be at least 2");
  if (std::set<ClassId>(labels.begin(), labels.end()).size() < 2) {
    throw std::invalid_argument("training data needs at least two classes");
  }
  const auto bs = static_cast<std::size_t>(batch_size);
  std::vector<std::size_t> order(n);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      if (!batches.empty() && end - start < std::max<std::size_t>(2, bs / 2)) {
        batches.back().insert(batches.back().end(), order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(end));
      } else {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
      }
    }
    bool ok = true;
    for (const auto& b : batches) {
      const ClassId first = labels[b.front()];
      ok &= std::any_of(b.begin(), b.end(), [&](auto i) { return labels[i] != first; });
    }
    if (ok) return batches;
  }
  throw std::runtime_error("make_batches: could not draw multi-class batches");
}

// ---------------------------------------------------------------------------
// Single-batch contrastive step.

/// Scaled dropout masks for every hidden layer and every column of a batch.
inline std::vector<Matrix> sample_batch_multipliers(const ProjectionEncoder& enc, Eigen::Index cols,
                                                    double p, Rng& rng) {
  std::vector<Matrix> out;
  if (p <= 0.0) return out;
  const double scale = 1.0 / (1.0 - p);
  for (std::size_t k = 0; k < enc.hidden_count(); ++k) {
    Matrix m(static_cast<Eigen::Index>(enc.hidden_width(k)), cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.bernoulli(p) ? 0.0 : scale;
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Replicates each column of `x` n_views times, adjacent: column
/// j * n_views + v is view v of sample j. Labels are replicated alike.
inline Matrix replicate_views(const Matrix& x, int n_views) {
  Matrix out(x.rows(), x.cols() * n_views);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (int v = 0; v < n_views; ++v) out.col(j * n_views + v) = x.col(j);
  }
  return out;
}

inline std::vector<ClassId> replicate_labels(std::span<const ClassId> labels, int n_views) {
  std::vector<ClassId> out;
  out.reserve(labels.size() * static_cast<std::size_t>(n_views));
  for (ClassId c : labels) out.insert(out.end(), static_cast<std::size_t>(n_views), c);
  return out;
}

struct BatchGradient {
  double loss = 0.0;
  EncoderGrad grads;
};

/// Contrastive loss of an already-replicated view batch `views` (m x 2N,
/// with fixed dropout multipliers) and its gradient w.r.t. the encoder.
inline BatchGradient scl_batch_gradient(const ProjectionEncoder& enc, const Matrix& views,
                                        std::span<const ClassId> view_labels,
                                        const std::vector<Matrix>& multipliers,
                                        const SclLossOptions& opt) {
  ForwardTrace trace;
  const Matrix h = forward_batch(enc, views, multipliers, &trace);
  auto lg = scl_loss_and_grad(h.transpose(), view_labels, opt);
  return {lg.loss, backward_batch(enc, trace, lg.grad.transpose())};
}

// ---------------------------------------------------------------------------
// Validation criteria.

/// Fits a centroid model on the encoded training set and returns the
/// validation OOD-detection AUROC, where a validation sample is OOD when its
/// label is not a training class. The threshold is calibrated on the
/// validation OOD scores at `target_tpr`.
inline Validator ood_auroc_validator(const Dataset& train, const Dataset& val, double target_tpr) {
  const auto train_labels = train.labels();
  const std::set<ClassId> train_classes(train_labels.begin(), train_labels.end());
  std::vector<bool> is_ood;
  for (const auto& s : val.samples) {
    if (!s.label) throw DataError("validation sample '" + s.id + "' is unlabeled");
    is_ood.push_back(!train_classes.count(*s.label));
  }
  const auto n_ood = std::count(is_ood.begin(), is_ood.end(), true);
  if (n_ood == 0) throw DataError("validation set has no unknown-label (OOD) samples");
  if (n_ood == static_cast<long>(is_ood.size())) {
    throw DataError("validation set has no known-label samples");
  }
  return [train_x = input_matrix(train), train_labels, val_x = input_matrix(val), is_ood,
          target_tpr](const ProjectionEncoder& enc) {
    const auto model = fit_centroids(encode(enc, train_x), train_labels);
    const auto scores = ood_scores(model, encode(enc, val_x));
    std::vector<double> ood;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (is_ood[i]) ood.push_back(scores[i]);
    }
    return Validation{roc_auroc(scores, is_ood), calibrate(ood, target_tpr, "val")};
  };
}

/// Fits a centroid model on the encoded training set and returns the
/// validation Macro F1 of nearest-centroid classification.
inline Validator macro_f1_validator(const Dataset& train, const Dataset& val) {
  for (const auto& s : val.samples) {
    if (!s.label) throw DataError("validation sample '" + s.id + "' is unlabeled");
  }
  return [train_x = input_matrix(train), train_labels = train.labels(), val_x = input_matrix(val),
          val_labels = val.labels()](const ProjectionEncoder& enc) {
    const auto model = fit_centroids(encode(enc, train_x), train_labels);
    const auto pred = classify_all(model, encode(enc, val_x));
    return Validation{micro_macro_f1(val_labels, pred).macro, std::nullopt};
  };
}

// ---------------------------------------------------------------------------
// Epoch loop.

namespace detail {

/// Runs up to max_epochs epochs of `epoch_fn` (which returns the mean train
/// loss), validating after each and keeping the earliest best-scoring state.
template <typename State, typename EpochFn>
std::pair<State, TrainResult> run_epochs(State state, const SclConfig& cfg, EpochFn&& epoch_fn,
                                         const Validator& validate,
                                         const std::function<const ProjectionEncoder&(const State&)>& encoder_of,
                                         const TrainLog& log) {
  using clock = std::chrono::steady_clock;
  TrainResult result;
  std::optional<State> best;
  const auto start = clock::now();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    TrainRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_fn(state, epoch);
    const Validation v = validate(encoder_of(state));
    rec.val_score = v.score;
    rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - start).count();
    if (!best || v.score > result.best_score) {
      for (auto& r : result.history) r.is_best = false;
      rec.is_best = true;
      result.best_epoch = epoch;
      result.best_score = v.score;
      result.calibration = v.calibration;
      best = state;
    }
    result.history.push_back(rec);
    if (log.out) {
      *log.out << "method=" << log.method << " epoch=" << epoch << " loss=" << fmt_real(rec.train_loss)
               << ' ' << log.metric << '=' << fmt_real(rec.val_score) << " best=" << (rec.is_best ? 1 : 0)
               << " elapsed_ms=" << static_cast<long long>(rec.wall_ms) << '\n';
    }
  }
  result.encoder = encoder_of(*best);
  return {std::move(*best), std::move(result)};
}

}  // namespace detail

/// Contrastive training of `enc` on labeled `train` with early stopping on
/// `validate`. Parameters are warm-started from `enc`.
inline TrainResult train_scl(ProjectionEncoder enc, const Dataset& train, const SclConfig& cfg,
                             const Validator& validate, const TrainLog& log = {}) {
  cfg.validate();
  enc.validate();
  require(train.dim == enc.input_dim(), "train_scl: dataset and encoder dimensions differ");
  enc.dropout_p = cfg.dropout_p;
  const Matrix x = input_matrix(train);
  const auto labels = train.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kNoClass) throw DataError("training sample '" + train.samples[i].id + "' is unlabeled");
  }
  Rng rng(derive_seed(cfg.seed, 0x5c1));
  const SclLossOptions opt{cfg.temperature, cfg.inclusive_denominator};
  auto epoch_fn = [&](ProjectionEncoder& e, int) {
    const auto batches = make_batches(labels, cfg.batch_size, rng);
    double loss_sum = 0.0;
    for (const auto& b : batches) {
      Matrix xb(x.cols(), static_cast<Eigen::Index>(b.size()));
      std::vector<ClassId> lb;
      for (std::size_t j = 0; j < b.size(); ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(b[j])).transpose();
        lb.push_back(labels[b[j]]);
      }
      const Matrix views = replicate_views(xb, cfg.n_views);
      const auto view_labels = replicate_labels(lb, cfg.n_views);
      const auto mul = sample_batch_multipliers(e, views.cols(), cfg.dropout_p, rng);
      const auto bg = scl_batch_gradient(e, views, view_labels, mul, opt);
      sgd_step(e, bg.grads, cfg.learning_rate);
      loss_sum += bg.loss;
    }
    return loss_sum / static_cast<double>(batches.size());
  };
  auto [state, result] = detail::run_epochs<ProjectionEncoder>(
      std::move(enc), cfg, epoch_fn, validate,
      [](const ProjectionEncoder& e) -> const ProjectionEncoder& { return e; }, log);
  return std::move(result);
}

/// Pre-training: contrastive training on known-intent `train`, early stopping
/// on validation OOD AUROC, threshold recorded at the best epoch.
inline TrainResult pretrain(const ProjectionEncoder& enc, const Dataset& train, const Dataset& val,
                            const SclConfig& cfg, const TrainLog& log = {}) {
  return train_scl(enc, train, cfg, ood_auroc_validator(train, val, cfg.target_tpr), log);
}

}  // namespace sclqa
