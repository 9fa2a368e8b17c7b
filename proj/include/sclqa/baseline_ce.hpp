#pragma once

// Cross-entropy fine-tuning baseline: a linear classification head trained
// jointly with the projection encoder. Early stopping and evaluation reuse
// the centroid-based harness of the contrastive trainer.

#include "sclqa/scl_train.hpp"

#include <algorithm>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace sclqa {

struct LinearHead {
  Matrix weight;                 // d x |C|
  Vector bias;                   // |C|
  std::vector<ClassId> classes;  // ascending; column k scores classes[k]

  std::size_t class_index(ClassId c) const {
    auto it = std::lower_bound(classes.begin(), classes.end(), c);
    if (it == classes.end() || *it != c) {
      throw std::invalid_argument("class id " + std::to_string(c) + " is not in the head");
    }
    return static_cast<std::size_t>(it - classes.begin());
  }

  void validate() const {
    if (weight.cols() != static_cast<Eigen::Index>(classes.size()) || bias.size() != weight.cols()) {
      throw std::invalid_argument("head shape does not match its class count");
    }
    if (!weight.allFinite() || !bias.allFinite()) throw NumericError("head parameters are not finite");
  }
};

inline LinearHead make_head(std::size_t dim, std::vector<ClassId> classes, std::uint64_t seed) {
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  require(!classes.empty(), "make_head: no classes");
  LinearHead head;
  head.classes = std::move(classes);
  const auto c = static_cast<Eigen::Index>(head.classes.size());
  head.weight.resize(static_cast<Eigen::Index>(dim), c);
  head.bias.resize(c);
  Rng rng(seed);
  const double a = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = rng.uniform(-a, a);
  for (Eigen::Index i = 0; i < c; ++i) head.bias[i] = rng.uniform(-a, a);
  return head;
}

/// Logits for the rows of `h` (n x d): n x |C|.
inline Matrix head_logits(const LinearHead& head, const Matrix& h) {
  return (h * head.weight).rowwise() + head.bias.transpose();
}

/// Mean softmax cross-entropy of `logits` (n x C); `targets` are column indices.
inline double ce_loss(const Matrix& logits, std::span<const int> targets) {
  require(static_cast<std::size_t>(logits.rows()) == targets.size(), "ce_loss: one target per row");
  require(!targets.empty(), "ce_loss: empty batch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw std::invalid_argument("ce_loss: label outside class range");
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, t);
  }
  return total / static_cast<double>(logits.rows());
}

/// dL/dlogits of ce_loss: (softmax - onehot) / n.
inline Matrix ce_grad(const Matrix& logits, std::span<const int> targets) {
  Matrix g(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    RowVector e = (logits.row(i).array() - mx).exp().matrix();
    g.row(i) = e / e.sum();
    g(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
  }
  return g / static_cast<double>(logits.rows());
}

/// Argmax of the head's logits; ties go to the lowest class id.
inline ClassId fc_classify(const ProjectionEncoder& enc, const LinearHead& head, const Vector& x) {
  const Vector h = forward(enc, x);
  if (h.size() != head.weight.rows()) throw std::invalid_argument("fc_classify: shape mismatch");
  const RowVector z = h.transpose() * head.weight + head.bias.transpose();
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < z.size(); ++k) {
    if (z[k] > z[best]) best = k;
  }
  return head.classes[static_cast<std::size_t>(best)];
}

struct FtResult {
  TrainResult train;
  LinearHead head;
};

/// Joint CE training of encoder and head with the same epoch cap, batching
/// and best-validation checkpointing as the contrastive trainer. With
/// `reset_head`, a head whose classes differ from the training labels is
/// re-initialized; otherwise such a head is an error.
inline FtResult ft_train(ProjectionEncoder enc, LinearHead head, const Dataset& train,
                         const SclConfig& cfg, const Validator& validate, bool reset_head = false,
                         TrainLog log = {.method = "ft"}) {
  cfg.validate();
  enc.validate();
  require(train.dim == enc.input_dim(), "ft_train: dataset and encoder dimensions differ");
  enc.dropout_p = cfg.dropout_p;
  const Matrix x = input_matrix(train);
  const auto labels = train.labels();
  std::vector<ClassId> classes = labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (!classes.empty() && classes.front() == kNoClass) throw DataError("ft_train: unlabeled training sample");
  if (head.classes != classes) {
    if (!reset_head) throw std::invalid_argument("ft_train: head classes do not match training labels");
    head = make_head(enc.output_dim(), classes, derive_seed(cfg.seed, 0x4ead));
  }
  head.validate();
  std::vector<int> targets;
  for (ClassId c : labels) targets.push_back(static_cast<int>(head.class_index(c)));

  using State = std::pair<ProjectionEncoder, LinearHead>;
  Rng rng(derive_seed(cfg.seed, 0xf7));
  auto epoch_fn = [&](State& st, int) {
    auto& [e, hd] = st;
    const auto batches = make_batches(labels, cfg.batch_size, rng);
    double loss_sum = 0.0;
    for (const auto& b : batches) {
      Matrix xb(x.cols(), static_cast<Eigen::Index>(b.size()));
      std::vector<int> tb;
      for (std::size_t j = 0; j < b.size(); ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(b[j])).transpose();
        tb.push_back(targets[b[j]]);
      }
      const auto mul = sample_batch_multipliers(e, xb.cols(), cfg.dropout_p, rng);
      ForwardTrace trace;
      const Matrix h = forward_batch(e, xb, mul, &trace);  // d x B
      const Matrix logits = head_logits(hd, h.transpose());
      loss_sum += ce_loss(logits, tb);
      const Matrix g = ce_grad(logits, tb).transpose();  // C x B
      const Matrix grad_h = hd.weight * g;
      const auto enc_grads = backward_batch(e, trace, grad_h);
      hd.weight -= cfg.learning_rate * (h * g.transpose());
      hd.bias -= cfg.learning_rate * g.rowwise().sum();
      sgd_step(e, enc_grads, cfg.learning_rate);
    }
    return loss_sum / static_cast<double>(batches.size());
  };
  auto [state, result] = detail::run_epochs<State>(
      State{std::move(enc), std::move(head)}, cfg, epoch_fn, validate,
      [](const State& s) -> const ProjectionEncoder& { return s.first; }, log);
  return {std::move(result), std::move(state.second)};
}

/// FT pre-training: early stopping on validation OOD AUROC computed through
/// the centroid model on encoder outputs.
inline FtResult ft_pretrain(const ProjectionEncoder& enc, const Dataset& train, const Dataset& val,
                            const SclConfig& cfg, const TrainLog& log = {.method = "ft"}) {
  auto labels = train.labels();
  LinearHead head = make_head(enc.output_dim(), labels, derive_seed(cfg.seed, 0x4ead));
  return ft_train(enc, std::move(head), train, cfg, ood_auroc_validator(train, val, cfg.target_tpr),
                  false, log);
}

// ---------------------------------------------------------------------------
// Head file: "LHD1", u32 version, u32 d, u32 |C|, class ids, weights
// row-major (d x |C|) f32, bias f32.

inline void save_head(const LinearHead& head, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  binio::put_magic(out, "LHD1");
  binio::put_u32(out, 1);
  binio::put_u32(out, static_cast<std::uint32_t>(head.weight.rows()));
  binio::put_u32(out, static_cast<std::uint32_t>(head.classes.size()));
  for (ClassId c : head.classes) binio::put_u32(out, static_cast<std::uint32_t>(c));
  for (Eigen::Index r = 0; r < head.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < head.weight.cols(); ++c) binio::put_f32(out, head.weight(r, c));
  }
  for (Eigen::Index c = 0; c < head.bias.size(); ++c) binio::put_f32(out, head.bias[c]);
}

inline LinearHead load_head(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  binio::expect_magic(in, "LHD1", path);
  if (binio::read_u32(in, path) != 1) throw DataError(path + ": unsupported head version");
  const auto d = binio::read_u32(in, path);
  const auto c = binio::read_u32(in, path);
  LinearHead head;
  head.classes.resize(c);
  for (auto& id : head.classes) id = static_cast<ClassId>(binio::read_u32(in, path));
  head.weight.resize(d, c);
  head.bias.resize(c);
  for (Eigen::Index r = 0; r < head.weight.rows(); ++r) {
    for (Eigen::Index k = 0; k < head.weight.cols(); ++k) head.weight(r, k) = binio::read_f32(in, path);
  }
  for (Eigen::Index k = 0; k < head.bias.size(); ++k) head.bias[k] = binio::read_f32(in, path);
  head.validate();
  return head;
}

}  // namespace sclqa
