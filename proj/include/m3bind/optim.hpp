#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/encoders.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

// Linear warmup to the peak rate, then cosine decay to 0.1 * peak at the
// final step. The multiplier is in (0, 1], continuous at the warmup boundary
// and strictly decreasing after it.
struct Schedule {
  std::size_t total_steps = 1;
  double warmup_frac = 0.05;
  double floor = 0.1;

  std::size_t warmup_steps() const {
    const auto w = static_cast<std::size_t>(
        std::ceil(warmup_frac * static_cast<double>(total_steps)));
    return std::max<std::size_t>(1, w);
  }

  double multiplier(std::size_t step) const {
    const std::size_t w = warmup_steps();
    if (step < w) {
      return static_cast<double>(step + 1) / static_cast<double>(w + 1);
    }
    const std::size_t last = total_steps > 0 ? total_steps - 1 : 0;
    if (step >= last || last <= w) return step == w ? 1.0 : floor;
    const double progress = static_cast<double>(step - w) / static_cast<double>(last - w);
    return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

// Decoupled-weight-decay adaptive-moment optimizer with per-group learning
// rates. Parameters absent from a step's gradient map are skipped entirely
// (no moment decay, no weight decay), like lazily-updated parameter groups.
class AdamW {
 public:
  AdamW(std::vector<ParamEntry> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    slots_.reserve(params_.size());
    for (const auto& p : params_) {
      Slot s;
      s.m = Tensor::zeros(p.tensor->shape());
      s.v = Tensor::zeros(p.tensor->shape());
      slots_.push_back(std::move(s));
    }
  }

  const std::vector<ParamEntry>& params() const { return params_; }

  // One update. `grads` maps parameter tensors to accumulated gradients;
  // `group_lr` supplies the base rate per parameter group; `mult` is the
  // schedule multiplier.
  void step(const std::unordered_map<const Tensor*, Tensor>& grads,
            const std::map<std::string, double>& group_lr, double mult) {
    double clip_scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      // Accumulate in fixed parameter order; iterating the hash map would
      // make the sum order (and thus the clip factor) run-dependent.
      double sq = 0.0;
      for (const auto& p : params_) {
        auto it = grads.find(p.tensor);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
    }
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto it = grads.find(params_[pi].tensor);
      if (it == grads.end()) continue;
      auto lr_it = group_lr.find(params_[pi].group);
      if (lr_it == group_lr.end()) {
        throw ConfigError("AdamW: no learning rate for group '" + params_[pi].group + "'");
      }
      update_one(pi, it->second, lr_it->second * mult, clip_scale);
    }
    ++step_count_;
  }

  std::uint64_t step_count() const { return step_count_; }
  void set_step_count(std::uint64_t s) { step_count_ = s; }

  // Serialized state, aligned with params() by index.
  struct Slot {
    Tensor m, v;
    std::uint64_t t = 0;
  };

  const Slot& slot(std::size_t i) const { return slots_[i]; }
  Slot& slot(std::size_t i) { return slots_[i]; }

 private:
  void update_one(std::size_t pi, const Tensor& grad, double lr, double clip_scale) {
    Tensor& p = *params_[pi].tensor;
    Slot& s = slots_[pi];
    if (!grad.same_shape(p)) {
      throw ShapeError("AdamW: gradient " + grad.shape_str() + " does not match parameter '" +
                       params_[pi].name + "' " + p.shape_str());
    }
    s.t += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grad[i] * clip_scale;
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      if (!std::isfinite(p[i])) {
        throw NumericError("AdamW: parameter '" + params_[pi].name + "' became non-finite");
      }
    }
  }

  std::vector<ParamEntry> params_;
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  std::uint64_t step_count_ = 0;
};

}  // namespace m3bind
