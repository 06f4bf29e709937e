#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3bind/common.hpp"
#include "m3bind/sha256.hpp"
#include "m3bind/synthdata.hpp"

namespace m3bind {

using Json = nlohmann::json;

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_width = 64;
  std::size_t hidden_layers = 2;
  std::size_t token_dim = 16;
};

struct PretrainConfig {
  std::size_t iters = 1000;
  std::size_t batch = 72;
  double lr = 3e-3;
  double warmup_frac = 0.05;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
};

// Binding-phase hyperparameters. Reference-scale values (15000 iterations,
// base learning rate 2e-5) are the struct defaults; desk_run_config() swaps
// in the short, pilot-calibrated schedule used by the test suite.
struct BindConfig {
  double tau = 0.07;
  bool learnable_tau = false;
  double beta = 0.5;
  double lambda = 10.0;
  double eta0 = 2e-5;
  std::size_t batch_pair = 72;
  std::size_t batch_text = 64;
  std::size_t iters = 15000;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  bool amb = true;
  bool amb_pair_batches = true;   // draw image-text batches with p_m as well
  bool symmetric_loss = true;
  bool weight_mse_pairs = true;   // w_m1*w_m2 inside the pair sum
  bool train_projection_heads = false;
  double warmup_frac = 0.05;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
  std::size_t checkpoint_every = 0;  // 0 disables mid-run checkpoints
  std::vector<std::string> modalities;  // subset; empty means all

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("bind.tau must be positive");
    if (!(beta >= 0.0)) throw ConfigError("bind.beta must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("bind.lambda must be >= 0");
    if (!(eta0 > 0.0)) throw ConfigError("bind.eta0 must be positive");
    if (batch_pair == 0 || batch_text == 0) throw ConfigError("bind batch sizes must be positive");
    if (lora_rank == 0) throw ConfigError("bind.lora_rank must be >= 1");
  }
};

struct DistillConfig {
  std::size_t iters_stage1 = 1200;
  std::size_t iters_stage2 = 1200;
  std::size_t batch = 64;
  double lr = 1e-3;
  double tau = 0.07;
  double warmup_frac = 0.05;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
};

struct EvalConfig {
  std::vector<std::size_t> shots = {1, 5, 10};
  std::size_t probe_seeds = 5;
  std::vector<std::size_t> recall_ks = {1, 5, 10};
  std::string prompt_mode = "multi";  // "naive" uses only the first template

  void validate() const {
    if (prompt_mode != "multi" && prompt_mode != "naive") {
      throw ConfigError("eval.prompt_mode must be 'multi' or 'naive'");
    }
  }
};

struct RunConfig {
  std::uint64_t master_seed = 42;
  std::string out_dir = "runs";
  DatasetSpec dataset = default_dataset_spec();
  ModelConfig model;
  PretrainConfig pretrain;
  BindConfig bind;
  DistillConfig distill;
  EvalConfig eval;

  void validate() const {
    dataset.validate();
    bind.validate();
    eval.validate();
    if (model.embed_dim == 0 || model.hidden_width == 0 || model.token_dim == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    for (const auto& id : bind.modalities) {
      dataset.shape_of(id);  // throws on unknown modality
    }
  }

  // Modalities participating in the binding phase, sorted canonically.
  std::vector<std::string> bound_modalities() const {
    std::vector<std::string> ids;
    if (bind.modalities.empty()) {
      for (const auto& m : dataset.modalities) ids.push_back(m.id);
    } else {
      ids = bind.modalities;
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.empty()) throw ConfigError("bind.modalities resolved to an empty subset");
    return ids;
  }
};

// Short desk-scale schedule: same formulas and toggles, but iteration counts
// and learning rates sized so a full pipeline runs in about a minute. The
// text-alignment term uses the unweighted pair sum here: with per-pair
// w_m1*w_m2 weights the alignment gradients are ~1e3 smaller than the
// contrastive ones and the shared Adam moments drown them out.
inline RunConfig desk_run_config() {
  RunConfig cfg;
  cfg.bind.iters = 3000;
  cfg.bind.eta0 = 5e-3;
  cfg.bind.weight_mse_pairs = false;
  cfg.distill.iters_stage1 = 600;
  cfg.distill.iters_stage2 = 600;
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON round-trip. Emission always goes through these typed structs, so the
// canonical dump has sorted keys and uniformly typed numbers regardless of
// how the source file spelled them.
// ---------------------------------------------------------------------------

inline void to_json(Json& j, const ModalityShape& m) {
  j = Json{{"id", m.id}, {"obs_dim", m.obs_dim}, {"corpus_size", m.corpus_size}};
}

inline void from_json(const Json& j, ModalityShape& m) {
  m.id = j.value("id", m.id);
  m.obs_dim = j.value("obs_dim", m.obs_dim);
  m.corpus_size = j.value("corpus_size", m.corpus_size);
}

inline void to_json(Json& j, const DatasetSpec& d) {
  j = Json{{"num_classes", d.num_classes},
           {"latent_dim", d.latent_dim},
           {"vocab_size", d.vocab_size},
           {"templates_per_class", d.templates_per_class},
           {"noise_sigma", d.noise_sigma},
           {"max_abs_cos", d.max_abs_cos},
           {"modalities", d.modalities},
           {"eval_per_modality", d.eval_per_modality},
           {"probe_tuples", d.probe_tuples}};
}

inline void from_json(const Json& j, DatasetSpec& d) {
  d.num_classes = j.value("num_classes", d.num_classes);
  d.latent_dim = j.value("latent_dim", d.latent_dim);
  d.vocab_size = j.value("vocab_size", d.vocab_size);
  d.templates_per_class = j.value("templates_per_class", d.templates_per_class);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  d.max_abs_cos = j.value("max_abs_cos", d.max_abs_cos);
  if (j.contains("modalities")) d.modalities = j.at("modalities").get<std::vector<ModalityShape>>();
  d.eval_per_modality = j.value("eval_per_modality", d.eval_per_modality);
  d.probe_tuples = j.value("probe_tuples", d.probe_tuples);
}

inline void to_json(Json& j, const ModelConfig& m) {
  j = Json{{"embed_dim", m.embed_dim},
           {"hidden_width", m.hidden_width},
           {"hidden_layers", m.hidden_layers},
           {"token_dim", m.token_dim}};
}

inline void from_json(const Json& j, ModelConfig& m) {
  m.embed_dim = j.value("embed_dim", m.embed_dim);
  m.hidden_width = j.value("hidden_width", m.hidden_width);
  m.hidden_layers = j.value("hidden_layers", m.hidden_layers);
  m.token_dim = j.value("token_dim", m.token_dim);
}

inline void to_json(Json& j, const PretrainConfig& p) {
  j = Json{{"iters", p.iters},
           {"batch", p.batch},
           {"lr", p.lr},
           {"warmup_frac", p.warmup_frac},
           {"clip_norm", p.clip_norm},
           {"weight_decay", p.weight_decay}};
}

inline void from_json(const Json& j, PretrainConfig& p) {
  p.iters = j.value("iters", p.iters);
  p.batch = j.value("batch", p.batch);
  p.lr = j.value("lr", p.lr);
  p.warmup_frac = j.value("warmup_frac", p.warmup_frac);
  p.clip_norm = j.value("clip_norm", p.clip_norm);
  p.weight_decay = j.value("weight_decay", p.weight_decay);
}

inline void to_json(Json& j, const BindConfig& b) {
  j = Json{{"tau", b.tau},
           {"learnable_tau", b.learnable_tau},
           {"beta", b.beta},
           {"lambda", b.lambda},
           {"eta0", b.eta0},
           {"batch_pair", b.batch_pair},
           {"batch_text", b.batch_text},
           {"iters", b.iters},
           {"lora_rank", b.lora_rank},
           {"lora_alpha", b.lora_alpha},
           {"amb", b.amb},
           {"amb_pair_batches", b.amb_pair_batches},
           {"symmetric_loss", b.symmetric_loss},
           {"weight_mse_pairs", b.weight_mse_pairs},
           {"train_projection_heads", b.train_projection_heads},
           {"warmup_frac", b.warmup_frac},
           {"clip_norm", b.clip_norm},
           {"weight_decay", b.weight_decay},
           {"checkpoint_every", b.checkpoint_every},
           {"modalities", b.modalities}};
}

inline void from_json(const Json& j, BindConfig& b) {
  b.tau = j.value("tau", b.tau);
  b.learnable_tau = j.value("learnable_tau", b.learnable_tau);
  b.beta = j.value("beta", b.beta);
  b.lambda = j.value("lambda", b.lambda);
  b.eta0 = j.value("eta0", b.eta0);
  b.batch_pair = j.value("batch_pair", b.batch_pair);
  b.batch_text = j.value("batch_text", b.batch_text);
  b.iters = j.value("iters", b.iters);
  b.lora_rank = j.value("lora_rank", b.lora_rank);
  b.lora_alpha = j.value("lora_alpha", b.lora_alpha);
  b.amb = j.value("amb", b.amb);
  b.amb_pair_batches = j.value("amb_pair_batches", b.amb_pair_batches);
  b.symmetric_loss = j.value("symmetric_loss", b.symmetric_loss);
  b.weight_mse_pairs = j.value("weight_mse_pairs", b.weight_mse_pairs);
  b.train_projection_heads = j.value("train_projection_heads", b.train_projection_heads);
  b.warmup_frac = j.value("warmup_frac", b.warmup_frac);
  b.clip_norm = j.value("clip_norm", b.clip_norm);
  b.weight_decay = j.value("weight_decay", b.weight_decay);
  b.checkpoint_every = j.value("checkpoint_every", b.checkpoint_every);
  b.modalities = j.value("modalities", b.modalities);
}

inline void to_json(Json& j, const DistillConfig& d) {
  j = Json{{"iters_stage1", d.iters_stage1},
           {"iters_stage2", d.iters_stage2},
           {"batch", d.batch},
           {"lr", d.lr},
           {"tau", d.tau},
           {"warmup_frac", d.warmup_frac},
           {"clip_norm", d.clip_norm},
           {"weight_decay", d.weight_decay}};
}

inline void from_json(const Json& j, DistillConfig& d) {
  d.iters_stage1 = j.value("iters_stage1", d.iters_stage1);
  d.iters_stage2 = j.value("iters_stage2", d.iters_stage2);
  d.batch = j.value("batch", d.batch);
  d.lr = j.value("lr", d.lr);
  d.tau = j.value("tau", d.tau);
  d.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  d.clip_norm = j.value("clip_norm", d.clip_norm);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
}

inline void to_json(Json& j, const EvalConfig& e) {
  j = Json{{"shots", e.shots},
           {"probe_seeds", e.probe_seeds},
           {"recall_ks", e.recall_ks},
           {"prompt_mode", e.prompt_mode}};
}

inline void from_json(const Json& j, EvalConfig& e) {
  e.shots = j.value("shots", e.shots);
  e.probe_seeds = j.value("probe_seeds", e.probe_seeds);
  e.recall_ks = j.value("recall_ks", e.recall_ks);
  e.prompt_mode = j.value("prompt_mode", e.prompt_mode);
}

inline void to_json(Json& j, const RunConfig& c) {
  j = Json{{"master_seed", c.master_seed},
           {"out_dir", c.out_dir},
           {"dataset", c.dataset},
           {"model", c.model},
           {"pretrain", c.pretrain},
           {"bind", c.bind},
           {"distill", c.distill},
           {"eval", c.eval}};
}

inline void from_json(const Json& j, RunConfig& c) {
  c.master_seed = j.value("master_seed", c.master_seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("pretrain")) j.at("pretrain").get_to(c.pretrain);
  if (j.contains("bind")) j.at("bind").get_to(c.bind);
  if (j.contains("distill")) j.at("distill").get_to(c.distill);
  if (j.contains("eval")) j.at("eval").get_to(c.eval);
}

// Canonical form: sorted keys (nlohmann objects iterate sorted) and numbers
// normalized by the typed round-trip above.
inline std::string canonical_json(const RunConfig& cfg) { return Json(cfg).dump(); }

inline std::string config_fingerprint(const RunConfig& cfg) {
  return to_hex(sha256(canonical_json(cfg)));
}

// Fingerprint of the data-defining slice only (master seed + dataset spec);
// corpora are shared between runs that differ in training settings.
inline std::string dataset_fingerprint(const RunConfig& cfg) {
  const Json j{{"master_seed", cfg.master_seed}, {"dataset", cfg.dataset}};
  return to_hex(sha256(j.dump()));
}

}  // namespace m3bind
