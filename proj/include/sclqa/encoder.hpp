#pragma once

// Trainable projection network over frozen input embeddings: a tanh MLP
// whose output is L2-normalized, with inverted dropout on hidden units.
// Batched routines use one column per sample.

#include "sclqa/common.hpp"
#include "sclqa/dataset.hpp"

#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sclqa {

inline constexpr double kMinNorm = 1e-12;

/// Elementwise mean of a non-empty token sequence.
inline Vector mean_pool(std::span<const Vector> tokens) {
  if (tokens.empty()) throw std::invalid_argument("mean_pool: empty token sequence");
  Vector acc = Vector::Zero(tokens.front().size());
  for (const auto& t : tokens) {
    if (t.size() != acc.size()) throw DataError("mean_pool: mixed token dimensions");
    acc += t;
  }
  return acc / static_cast<double>(tokens.size());
}

inline Vector l2_normalize(const Vector& v) {
  const double n = v.norm();
  if (!(n > kMinNorm)) throw NumericError("l2_normalize: zero-norm vector");
  return v / n;
}

/// Sentence-level input vector of a sample (token sequences are mean-pooled).
inline Vector sentence_input(const Sample& s) {
  return s.is_token_level() ? mean_pool(s.tokens()) : s.embedding();
}

/// n x m matrix of sentence-level inputs, one row per sample.
inline Matrix input_matrix(const Dataset& ds) {
  Matrix out(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(ds.dim));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = sentence_input(ds.samples[i]).transpose();
  }
  return out;
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct ProjectionEncoder {
  std::vector<DenseLayer> layers;
  double dropout_p = 0.0;

  std::size_t input_dim() const { return static_cast<std::size_t>(layers.front().weight.cols()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(layers.back().weight.rows()); }
  std::size_t hidden_count() const { return layers.size() - 1; }
  std::size_t hidden_width(std::size_t k) const {
    return static_cast<std::size_t>(layers[k].weight.rows());
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("encoder has no layers");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
      throw std::invalid_argument("encoder dropout must be in [0,1)");
    }
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.bias.size() != l.weight.rows()) throw std::invalid_argument("layer bias shape mismatch");
      if (k > 0 && l.weight.cols() != layers[k - 1].weight.rows()) {
        throw std::invalid_argument("layer shapes do not compose");
      }
      if (!l.weight.allFinite() || !l.bias.allFinite()) {
        throw NumericError("encoder parameters are not finite");
      }
    }
  }
};

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ProjectionEncoder make_encoder(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                      std::size_t output_dim, double dropout_p, std::uint64_t seed) {
  require(input_dim > 0 && output_dim > 0, "make_encoder: dimensions must be positive");
  ProjectionEncoder enc;
  enc.dropout_p = dropout_p;
  Rng rng(seed);
  std::size_t fan_in = input_dim;
  auto add = [&](std::size_t out) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    DenseLayer l{Matrix(out, fan_in), Vector(out)};
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = rng.uniform(-a, a);
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = rng.uniform(-a, a);
    enc.layers.push_back(std::move(l));
    fan_in = out;
  };
  for (std::size_t w : hidden) {
    require(w > 0, "make_encoder: hidden width must be positive");
    add(w);
  }
  add(output_dim);
  enc.validate();
  return enc;
}

/// Default architecture: one hidden layer of width 2m, output width m.
inline ProjectionEncoder make_default_encoder(std::size_t input_dim, double dropout_p,
                                              std::uint64_t seed) {
  return make_encoder(input_dim, {2 * input_dim}, input_dim, dropout_p, seed);
}

/// Single linear layer with identity weights and zero bias.
inline ProjectionEncoder make_identity_encoder(std::size_t dim) {
  ProjectionEncoder enc;
  enc.layers.push_back({Matrix::Identity(dim, dim), Vector::Zero(dim)});
  return enc;
}

/// Inverted-dropout mask for one hidden layer: kept units are scaled by
/// 1/(1-p) so the mask has unit expectation.
struct DropoutMask {
  Eigen::Array<bool, Eigen::Dynamic, 1> kept;
  double scale = 1.0;

  Vector multiplier() const { return kept.cast<double>().matrix() * scale; }
};

inline DropoutMask sample_mask(std::size_t width, double p, Rng& rng) {
  DropoutMask m;
  m.kept.resize(static_cast<Eigen::Index>(width));
  m.scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.kept.size(); ++i) m.kept[i] = !rng.bernoulli(p);
  return m;
}

/// One mask per hidden layer of `enc`.
inline std::vector<DropoutMask> sample_masks(const ProjectionEncoder& enc, double p, Rng& rng) {
  std::vector<DropoutMask> out;
  for (std::size_t k = 0; k < enc.hidden_count(); ++k) {
    out.push_back(sample_mask(enc.hidden_width(k), p, rng));
  }
  return out;
}

/// Intermediate values of a batched forward pass, kept for backprop.
struct ForwardTrace {
  std::vector<Matrix> inputs;       // input to each layer
  std::vector<Matrix> activations;  // tanh output of each hidden layer, pre-dropout
  std::vector<Matrix> multipliers;  // scaled dropout masks (empty when inactive)
  Matrix raw;                       // last-layer output before normalization
  RowVector norms;
};

/// Batched forward pass over the columns of `x` (m x B). `multipliers`,
/// when non-empty, holds one (width x B) scaled mask per hidden layer.
/// Returns the L2-normalized outputs (d x B).
inline Matrix forward_batch(const ProjectionEncoder& enc, const Matrix& x,
                            const std::vector<Matrix>& multipliers = {},
                            ForwardTrace* trace = nullptr) {
  if (static_cast<std::size_t>(x.rows()) != enc.input_dim()) {
    throw std::invalid_argument("forward: input dimension " + std::to_string(x.rows()) +
                                " does not match encoder input " + std::to_string(enc.input_dim()));
  }
  if (!multipliers.empty() && multipliers.size() != enc.hidden_count()) {
    throw std::invalid_argument("forward: one dropout mask per hidden layer is required");
  }
  Matrix a = x;
  if (trace) {
    trace->inputs.clear();
    trace->activations.clear();
    trace->multipliers = multipliers;
  }
  for (std::size_t k = 0; k < enc.layers.size(); ++k) {
    const auto& l = enc.layers[k];
    if (trace) trace->inputs.push_back(a);
    Matrix z = (l.weight * a).colwise() + l.bias;
    if (k + 1 == enc.layers.size()) {
      a = std::move(z);
      break;
    }
    a = z.array().tanh().matrix();
    if (trace) trace->activations.push_back(a);
    if (!multipliers.empty()) {
      const auto& mul = multipliers[k];
      if (mul.rows() != a.rows() || mul.cols() != a.cols()) {
        throw std::invalid_argument("forward: dropout mask shape mismatch");
      }
      a = a.cwiseProduct(mul);
    }
  }
  RowVector norms = a.colwise().norm();
  for (Eigen::Index j = 0; j < norms.size(); ++j) {
    if (!(norms[j] > kMinNorm)) throw NumericError("forward: zero-norm representation");
  }
  Matrix h = a.array().rowwise() / norms.array();
  if (trace) {
    trace->raw = std::move(a);
    trace->norms = std::move(norms);
  }
  return h;
}

/// Single-sample forward pass; `masks` optional (one per hidden layer).
inline Vector forward(const ProjectionEncoder& enc, const Vector& x,
                      const std::vector<DropoutMask>* masks = nullptr) {
  std::vector<Matrix> mul;
  if (masks) {
    for (const auto& m : *masks) mul.emplace_back(m.multiplier());
  }
  return forward_batch(enc, x, mul);
}

/// Two forward passes of `x` with independently sampled dropout masks.
inline std::pair<Vector, Vector> make_views(const ProjectionEncoder& enc, const Vector& x,
                                            Rng& rng) {
  auto m1 = sample_masks(enc, enc.dropout_p, rng);
  auto m2 = sample_masks(enc, enc.dropout_p, rng);
  return {forward(enc, x, &m1), forward(enc, x, &m2)};
}

/// Row-wise encoding without dropout: n x m inputs to n x d representations.
inline Matrix encode(const ProjectionEncoder& enc, const Matrix& rows) {
  return forward_batch(enc, rows.transpose()).transpose();
}

inline Matrix encode(const ProjectionEncoder& enc, const Dataset& ds) {
  return encode(enc, input_matrix(ds));
}

/// Parameter gradient, laid out like the encoder's layers.
using EncoderGrad = std::vector<DenseLayer>;

/// Backpropagates dL/dh (d x B, h the normalized outputs) through
/// normalization and the network recorded in `trace`.
inline EncoderGrad backward_batch(const ProjectionEncoder& enc, const ForwardTrace& trace,
                                  const Matrix& grad_h) {
  // d(z/|z|)/dz = (I - h h^T)/|z|
  const Matrix h = trace.raw.array().rowwise() / trace.norms.array();
  const RowVector radial = (h.cwiseProduct(grad_h)).colwise().sum();
  Matrix g = ((grad_h - h * radial.asDiagonal()).array().rowwise() / trace.norms.array()).matrix();

  EncoderGrad grads(enc.layers.size());
  for (std::size_t k = enc.layers.size(); k-- > 0;) {
    const auto& l = enc.layers[k];
    grads[k].weight = g * trace.inputs[k].transpose();
    grads[k].bias = g.rowwise().sum();
    if (k == 0) break;
    Matrix ga = l.weight.transpose() * g;
    const std::size_t hk = k - 1;
    if (!trace.multipliers.empty()) ga = ga.cwiseProduct(trace.multipliers[hk]);
    const auto& t = trace.activations[hk];
    g = ga.cwiseProduct((1.0 - t.array().square()).matrix());
  }
  return grads;
}

inline void sgd_step(ProjectionEncoder& enc, const EncoderGrad& grads, double lr) {
  for (std::size_t k = 0; k < enc.layers.size(); ++k) {
    enc.layers[k].weight -= lr * grads[k].weight;
    enc.layers[k].bias -= lr * grads[k].bias;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint: "ENC1", u32 version, u32 layer count, f32 dropout, then per
// layer u32 rows, u32 cols, weights row-major, bias; all little-endian f32.

inline constexpr std::uint32_t kEncoderFormatVersion = 1;

inline void write_encoder(const ProjectionEncoder& enc, std::ostream& out) {
  binio::put_magic(out, "ENC1");
  binio::put_u32(out, kEncoderFormatVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(enc.layers.size()));
  binio::put_f32(out, enc.dropout_p);
  for (const auto& l : enc.layers) {
    binio::put_u32(out, static_cast<std::uint32_t>(l.weight.rows()));
    binio::put_u32(out, static_cast<std::uint32_t>(l.weight.cols()));
  }
  for (const auto& l : enc.layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) binio::put_f32(out, l.weight(r, c));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) binio::put_f32(out, l.bias[r]);
  }
}

inline ProjectionEncoder read_encoder(std::istream& in, const std::string& source) {
  binio::expect_magic(in, "ENC1", source);
  const auto version = binio::read_u32(in, source);
  if (version != kEncoderFormatVersion) {
    throw DataError(source + ": unsupported encoder format version " + std::to_string(version));
  }
  const auto n_layers = binio::read_u32(in, source);
  ProjectionEncoder enc;
  enc.dropout_p = binio::read_f32(in, source);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(n_layers);
  for (auto& [r, c] : shapes) {
    r = binio::read_u32(in, source);
    c = binio::read_u32(in, source);
  }
  for (auto [rows, cols] : shapes) {
    DenseLayer l{Matrix(rows, cols), Vector(rows)};
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = binio::read_f32(in, source);
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = binio::read_f32(in, source);
    enc.layers.push_back(std::move(l));
  }
  enc.validate();
  return enc;
}

inline void save_encoder(const ProjectionEncoder& enc, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_encoder(enc, out);
}

inline ProjectionEncoder load_encoder(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_encoder(in, path);
}

}  // namespace sclqa
