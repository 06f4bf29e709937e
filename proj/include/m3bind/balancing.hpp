#pragma once

#include <cmath>
#include <map>
#include <string>

#include "m3bind/common.hpp"
#include "m3bind/rng.hpp"

namespace m3bind {

// Corpus sizes plus the two knobs that drive adaptive modality balancing:
// the compensation exponent beta and the base learning rate eta0.
struct ModalityStats {
  std::map<std::string, std::uint64_t> sizes;
  double beta = 0.5;
  double eta0 = 2e-5;

  void validate() const {
    if (sizes.empty()) throw ValueError("ModalityStats: no modalities registered");
    for (const auto& [id, n] : sizes) {
      if (n == 0) throw ValueError("ModalityStats: modality '" + id + "' has empty corpus");
    }
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
      throw ValueError("ModalityStats: beta must be finite and >= 0");
    }
    if (!(eta0 > 0.0)) throw ValueError("ModalityStats: eta0 must be positive");
  }
};

// Sampling probability per modality, inversely proportional to corpus size:
// p_m = (1/|D_m|)^beta / sum_k (1/|D_k|)^beta. beta = 0 gives uniform draws.
inline std::map<std::string, double> sampling_probs(const ModalityStats& stats) {
  stats.validate();
  std::map<std::string, double> probs;
  double total = 0.0;
  for (const auto& [id, n] : stats.sizes) {
    const double w = std::pow(1.0 / static_cast<double>(n), stats.beta);
    probs[id] = w;
    total += w;
  }
  for (auto& [id, p] : probs) p /= total;
  return probs;
}

// Per-modality learning rate eta_m = eta0 / sqrt(|D_m|): smaller corpora get
// more aggressive updates.
inline std::map<std::string, double> scaled_lr(const ModalityStats& stats) {
  stats.validate();
  std::map<std::string, double> lrs;
  for (const auto& [id, n] : stats.sizes) {
    lrs[id] = stats.eta0 / std::sqrt(static_cast<double>(n));
  }
  return lrs;
}

// Per-modality loss weight w_m = 1 / sqrt(|D_m|).
inline std::map<std::string, double> loss_weight(const ModalityStats& stats) {
  stats.validate();
  std::map<std::string, double> weights;
  for (const auto& [id, n] : stats.sizes) {
    weights[id] = 1.0 / std::sqrt(static_cast<double>(n));
  }
  return weights;
}

// The resolved balancing decisions for one run. Immutable once built.
struct BalancePlan {
  std::map<std::string, double> probs;    // p_m, sums to 1
  std::map<std::string, double> lrs;      // eta_m
  std::map<std::string, double> weights;  // w_m

  void validate() const {
    if (probs.empty()) throw ValueError("BalancePlan: empty plan");
    double total = 0.0;
    for (const auto& [id, p] : probs) {
      if (!(p >= 0.0)) throw ValueError("BalancePlan: negative probability for '" + id + "'");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ValueError("BalancePlan: probabilities sum to " + std::to_string(total));
    }
    for (const auto& [id, v] : lrs) {
      if (!(v > 0.0)) throw ValueError("BalancePlan: non-positive lr for '" + id + "'");
    }
    for (const auto& [id, v] : weights) {
      if (!(v > 0.0)) throw ValueError("BalancePlan: non-positive weight for '" + id + "'");
    }
  }
};

// With balancing off, the control condition is natural sampling: draw
// proportional to corpus size, every lr equal to eta0, every weight 1.
inline BalancePlan make_balance_plan(const ModalityStats& stats, bool amb_enabled) {
  stats.validate();
  BalancePlan plan;
  if (amb_enabled) {
    plan.probs = sampling_probs(stats);
    plan.lrs = scaled_lr(stats);
    plan.weights = loss_weight(stats);
  } else {
    double total = 0.0;
    for (const auto& [id, n] : stats.sizes) total += static_cast<double>(n);
    for (const auto& [id, n] : stats.sizes) {
      plan.probs[id] = static_cast<double>(n) / total;
      plan.lrs[id] = stats.eta0;
      plan.weights[id] = 1.0;
    }
  }
  plan.validate();
  return plan;
}

// One categorical draw from the plan. Walks modalities in sorted-id order, so
// a fixed seed yields an identical draw sequence on every run.
inline std::string draw_modality(const BalancePlan& plan, Rng& rng) {
  plan.validate();
  const double u = rng.uniform();
  double acc = 0.0;
  const std::string* last = nullptr;
  for (const auto& [id, p] : plan.probs) {
    acc += p;
    last = &id;
    if (u < acc) return id;
  }
  return *last;  // u landed in the rounding slack at the top
}

}  // namespace m3bind
