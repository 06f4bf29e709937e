#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/tape.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

// Softmax temperature. Fixed by default; when learnable the trainer holds a
// log-parameterized scalar and clamps tau into [1e-3, 10] after each step.
struct Temperature {
  double tau = 0.07;
  bool learnable = false;

  static constexpr double kMinTau = 1e-3;
  static constexpr double kMaxTau = 10.0;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValueError("Temperature: tau must be positive");
  }

  double clamped() const { return std::min(kMaxTau, std::max(kMinTau, tau)); }
};

using ModalityPair = std::pair<std::string, std::string>;

inline ModalityPair make_pair_key(const std::string& a, const std::string& b) {
  return a < b ? ModalityPair{a, b} : ModalityPair{b, a};
}

namespace detail {

inline void validate_clip_inputs(const Tensor& img, const Tensor& txt) {
  require_rank2(img, "contrastive_loss");
  require_rank2(txt, "contrastive_loss");
  require_same_shape(img, txt, "contrastive_loss");
  if (img.rows() == 0) throw ValueError("contrastive_loss: empty batch");
  for (const Tensor* t : {&img, &txt}) {
    for (std::size_t r = 0; r < t->rows(); ++r) {
      double sq = 0.0;
      for (std::size_t c = 0; c < t->cols(); ++c) sq += t->at(r, c) * t->at(r, c);
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
        throw ValueError("contrastive_loss: row " + std::to_string(r) +
                         " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) + ")");
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Contrastive image-text loss: softmax cross-entropy over temperature-scaled
// cosine similarities, summed over the batch. One-directional form treats
// image rows as queries; the symmetric form averages both directions, the
// usual practice for CLIP-style training.
// ---------------------------------------------------------------------------

inline NodeId clip_contrastive_node(Tape& tape, NodeId img, NodeId txt, double tau,
                                    bool symmetric) {
  Temperature{tau}.validate();
  detail::validate_clip_inputs(tape.value(img), tape.value(txt));
  NodeId sims = tape.scale(tape.matmul(img, tape.transpose(txt)), 1.0 / tau);
  NodeId fwd = tape.scale(tape.sum_diag(tape.log_softmax_rows(sims)), -1.0);
  if (!symmetric) return fwd;
  NodeId bwd = tape.scale(tape.sum_diag(tape.log_softmax_rows(tape.transpose(sims))), -1.0);
  return tape.scale(tape.add(fwd, bwd), 0.5);
}

// Variant for learnable temperature: inv_tau is a scalar node (exp(-log tau))
// so gradients flow into the temperature parameter.
inline NodeId clip_contrastive_node(Tape& tape, NodeId img, NodeId txt, NodeId inv_tau,
                                    bool symmetric) {
  detail::validate_clip_inputs(tape.value(img), tape.value(txt));
  NodeId sims = tape.mul_scalar_node(tape.matmul(img, tape.transpose(txt)), inv_tau);
  NodeId fwd = tape.scale(tape.sum_diag(tape.log_softmax_rows(sims)), -1.0);
  if (!symmetric) return fwd;
  NodeId bwd = tape.scale(tape.sum_diag(tape.log_softmax_rows(tape.transpose(sims))), -1.0);
  return tape.scale(tape.add(fwd, bwd), 0.5);
}

inline double clip_contrastive_loss(const Tensor& img, const Tensor& txt, double tau,
                                    bool symmetric) {
  Temperature{tau}.validate();
  detail::validate_clip_inputs(img, txt);
  const Tensor sims = scale(matmul_nt(img, txt), 1.0 / tau);
  const double fwd = -sum_diag(log_softmax_rows(sims)).item();
  if (!symmetric) return fwd;
  const double bwd = -sum_diag(log_softmax_rows(transpose(sims))).item();
  return 0.5 * (fwd + bwd);
}

// ---------------------------------------------------------------------------
// Text-space alignment: mean squared difference between each unordered pair
// of modality-specific text embeddings of the same texts.
// ---------------------------------------------------------------------------

inline std::map<ModalityPair, double> pairwise_text_mse(
    const std::map<std::string, Tensor>& embeds) {
  std::map<ModalityPair, double> out;
  for (auto it = embeds.begin(); it != embeds.end(); ++it) {
    for (auto jt = std::next(it); jt != embeds.end(); ++jt) {
      detail::require_same_shape(it->second, jt->second, "pairwise_text_mse");
      out[make_pair_key(it->first, jt->first)] = mse(it->second, jt->second).item();
    }
  }
  return out;
}

inline std::map<ModalityPair, NodeId> pairwise_text_mse_nodes(
    Tape& tape, const std::map<std::string, NodeId>& embeds) {
  std::map<ModalityPair, NodeId> out;
  for (auto it = embeds.begin(); it != embeds.end(); ++it) {
    for (auto jt = std::next(it); jt != embeds.end(); ++jt) {
      out[make_pair_key(it->first, jt->first)] = tape.mse(it->second, jt->second);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Total binding objective: weighted per-modality contrastive terms plus the
// lambda-scaled text-alignment term over unordered modality pairs. Pair
// weights w_m1 * w_m2 sit inside the pair sum; a flag drops them for the
// unweighted variant.
// ---------------------------------------------------------------------------

struct BindLossReport {
  std::map<std::string, double> per_modality_clip;
  std::map<ModalityPair, double> per_pair_mse;
  std::map<std::string, double> weights_used;
  double lambda = 0.0;
  bool weighted_pairs = true;
  double total = 0.0;

  // Recomputes the total from the stored parts; must match `total` to 1e-10.
  double reconstruct() const {
    double acc = 0.0;
    for (const auto& [m, loss] : per_modality_clip) acc += weights_used.at(m) * loss;
    for (const auto& [pair, loss] : per_pair_mse) {
      const double w =
          weighted_pairs ? weights_used.at(pair.first) * weights_used.at(pair.second) : 1.0;
      acc += lambda * w * loss;
    }
    return acc;
  }
};

inline BindLossReport total_bind_loss(const std::map<std::string, double>& clip_losses,
                                      const std::map<ModalityPair, double>& mse_losses,
                                      const std::map<std::string, double>& weights, double lambda,
                                      bool weighted_pairs = true) {
  BindLossReport report;
  report.per_modality_clip = clip_losses;
  report.per_pair_mse = mse_losses;
  report.weights_used = weights;
  report.lambda = lambda;
  report.weighted_pairs = weighted_pairs;
  for (const auto& [m, loss] : clip_losses) {
    if (!weights.count(m)) throw ValueError("total_bind_loss: missing weight for modality '" + m + "'");
    (void)loss;
  }
  for (const auto& [pair, loss] : mse_losses) {
    if (!weights.count(pair.first) || !weights.count(pair.second)) {
      throw ValueError("total_bind_loss: missing weight for pair (" + pair.first + "," +
                       pair.second + ")");
    }
    (void)loss;
  }
  report.total = report.reconstruct();
  return report;
}

inline NodeId total_bind_loss_node(Tape& tape, const std::map<std::string, NodeId>& clip_losses,
                                   const std::map<ModalityPair, NodeId>& mse_losses,
                                   const std::map<std::string, double>& weights, double lambda,
                                   bool weighted_pairs = true) {
  NodeId acc = Tape::kNone;
  auto add_term = [&](NodeId term) {
    acc = (acc == Tape::kNone) ? term : tape.add(acc, term);
  };
  for (const auto& [m, node] : clip_losses) {
    if (!weights.count(m)) throw ValueError("total_bind_loss: missing weight for modality '" + m + "'");
    add_term(tape.scale(node, weights.at(m)));
  }
  for (const auto& [pair, node] : mse_losses) {
    const double w =
        weighted_pairs ? weights.at(pair.first) * weights.at(pair.second) : 1.0;
    add_term(tape.scale(node, lambda * w));
  }
  if (acc == Tape::kNone) throw ValueError("total_bind_loss: no loss terms supplied");
  return acc;
}

// ---------------------------------------------------------------------------
// Distillation objectives: embedding-matching MSE summed over teachers, plus
// an image-anchored one-directional contrastive term that shares the
// contrastive kernel with student text rows as queries.
// ---------------------------------------------------------------------------

inline double kd_mse_loss(const std::map<std::string, Tensor>& teacher_embeds,
                          const Tensor& student_embed) {
  if (teacher_embeds.empty()) throw ValueError("kd_mse_loss: no teachers supplied");
  double acc = 0.0;
  for (const auto& [m, t] : teacher_embeds) {
    detail::require_same_shape(t, student_embed, "kd_mse_loss");
    acc += mse(t, student_embed).item();
  }
  return acc;
}

inline NodeId kd_mse_node(Tape& tape, const std::map<std::string, NodeId>& teacher_embeds,
                          NodeId student_embed) {
  if (teacher_embeds.empty()) throw ValueError("kd_mse_loss: no teachers supplied");
  NodeId acc = Tape::kNone;
  for (const auto& [m, t] : teacher_embeds) {
    NodeId term = tape.mse(t, student_embed);
    acc = (acc == Tape::kNone) ? term : tape.add(acc, term);
  }
  return acc;
}

inline double kd_contrastive_loss(const Tensor& student_txt, const Tensor& imgs, double tau) {
  return clip_contrastive_loss(student_txt, imgs, tau, /*symmetric=*/false);
}

inline NodeId kd_contrastive_node(Tape& tape, NodeId student_txt, NodeId imgs, double tau) {
  return clip_contrastive_node(tape, student_txt, imgs, tau, /*symmetric=*/false);
}

// Combined distillation objective; stage one of the schedule passes zero for
// the contrastive component.
inline double seskd_loss(double kd, double contrastive) {
  if (!std::isfinite(kd) || !std::isfinite(contrastive)) {
    throw NumericError("seskd_loss: non-finite component");
  }
  return kd + contrastive;
}

}  // namespace m3bind
