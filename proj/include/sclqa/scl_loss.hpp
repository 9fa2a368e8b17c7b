#pragma once

// Supervised contrastive loss over a batch of unit-norm views and its
// analytic gradient with respect to the view vectors.
//
// For anchor i with positives P(i) (same label, i excluded) and negatives
// N(i) (different label):
//
//   l_i = -1/|P(i)| * sum_{p in P(i)} log( exp(s_ip) / sum_{q in N(i)} exp(s_iq) )
//   s_ij = h_i . h_j / tau
//
// and the batch loss is the mean of l_i over anchors that have at least one
// positive (with paired views that is every anchor). The denominator runs
// over negatives only, so the loss can be negative. The inclusive variant
// sums the denominator over every a != i instead.

#include "sclqa/common.hpp"

#include <span>
#include <string>
#include <vector>

namespace sclqa {

struct SclLossOptions {
  double temperature = 0.1;
  bool inclusive_denominator = false;
};

namespace detail {

struct SclTerms {
  double loss = 0.0;
  Matrix coeff;  // dL/ds_ij
};

inline SclTerms scl_terms(const Matrix& h, std::span<const ClassId> labels,
                          const SclLossOptions& opt, bool want_grad) {
  const Eigen::Index n = h.rows();
  require(opt.temperature > 0.0, "scl_loss: temperature must be positive");
  require(static_cast<std::size_t>(n) == labels.size(), "scl_loss: one label per row is required");
  require(n >= 2, "scl_loss: batch needs at least two rows");
  const Matrix s = (h * h.transpose()) / opt.temperature;
  SclTerms out;
  if (want_grad) out.coeff = Matrix::Zero(n, n);
  std::vector<Eigen::Index> pos, den;
  Eigen::Index anchors = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    pos.clear();
    den.clear();
    bool has_negative = false;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool same = labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)];
      if (same) pos.push_back(j);
      has_negative |= !same;
      if (!same || opt.inclusive_denominator) den.push_back(j);
    }
    if (!has_negative) {
      throw std::invalid_argument("scl_loss: anchor " + std::to_string(i) +
                                  " has no negatives in the batch");
    }
    if (pos.empty()) continue;
    ++anchors;
    double mx = s(i, den.front());
    for (auto q : den) mx = std::max(mx, s(i, q));
    double z = 0.0;
    for (auto q : den) z += std::exp(s(i, q) - mx);
    const double log_den = mx + std::log(z);
    double pos_mean = 0.0;
    for (auto p : pos) pos_mean += s(i, p);
    pos_mean /= static_cast<double>(pos.size());
    out.loss += log_den - pos_mean;
    if (want_grad) {
      const double wp = 1.0 / static_cast<double>(pos.size());
      for (auto p : pos) out.coeff(i, p) -= wp;
      for (auto q : den) out.coeff(i, q) += std::exp(s(i, q) - mx) / z;
    }
  }
  if (anchors == 0) throw std::invalid_argument("scl_loss: no anchor has a positive");
  const double inv = 1.0 / static_cast<double>(anchors);
  out.loss *= inv;
  if (want_grad) out.coeff *= inv;
  return out;
}

}  // namespace detail

/// Mean supervised contrastive loss of the rows of `h` (2N x d).
inline double scl_loss(const Matrix& h, std::span<const ClassId> labels,
                       const SclLossOptions& opt = {}) {
  return detail::scl_terms(h, labels, opt, false).loss;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

/// Loss together with dL/dh, same shape as `h`. The rows are treated as free
/// vectors; the normalization map is handled by the encoder's backward pass.
inline LossAndGrad scl_loss_and_grad(const Matrix& h, std::span<const ClassId> labels,
                                     const SclLossOptions& opt = {}) {
  auto t = detail::scl_terms(h, labels, opt, true);
  // s_ij = h_i.h_j / tau, so dL/dh = (C + C^T) h / tau.
  Matrix grad = ((t.coeff + t.coeff.transpose()) * h) / opt.temperature;
  return {t.loss, std::move(grad)};
}

inline Matrix scl_grad(const Matrix& h, std::span<const ClassId> labels,
                       const SclLossOptions& opt = {}) {
  return scl_loss_and_grad(h, labels, opt).grad;
}

}  // namespace sclqa
