#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/rng.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

// Shared latent concept model: K near-orthogonal class directions in a
// d_z-dimensional latent space. Every modality observes linear mixtures of
// the same latents, so text is the only bridge between image modalities.
struct ConceptModel {
  std::size_t num_classes = 0;
  std::size_t latent_dim = 0;
  Tensor class_latents;  // [K x d_z], unit rows
  double noise_sigma = 0.1;
};

struct ModalityShape {
  std::string id;
  std::size_t obs_dim = 0;
  std::size_t corpus_size = 0;
};

struct DatasetSpec {
  std::size_t num_classes = 8;
  std::size_t latent_dim = 16;
  std::size_t vocab_size = 64;
  std::size_t templates_per_class = 4;
  double noise_sigma = 0.1;
  double max_abs_cos = 0.3;
  std::vector<ModalityShape> modalities;
  std::size_t eval_per_modality = 240;
  std::size_t probe_tuples = 50;

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset: need at least 2 classes");
    if (latent_dim < 1) throw ConfigError("dataset: latent_dim must be positive");
    if (vocab_size <= num_classes) {
      throw ConfigError("dataset: vocab_size must exceed num_classes (class tokens + fillers)");
    }
    if (templates_per_class < 1) throw ConfigError("dataset: need at least 1 template per class");
    if (!(noise_sigma >= 0.0)) throw ConfigError("dataset: noise_sigma must be >= 0");
    if (modalities.empty()) throw ConfigError("dataset: no modalities configured");
    for (const auto& m : modalities) {
      if (m.id.empty()) throw ConfigError("dataset: modality with empty id");
      if (m.obs_dim == 0 || m.corpus_size == 0) {
        throw ConfigError("dataset: modality '" + m.id + "' has zero obs_dim or corpus_size");
      }
    }
  }

  const ModalityShape& shape_of(const std::string& id) const {
    for (const auto& m : modalities) {
      if (m.id == id) return m;
    }
    throw ConfigError("dataset: unknown modality '" + id + "'");
  }
};

// The five-modality desk-scale default: deliberately imbalanced corpus sizes
// (10:1 between the largest and smallest) over a shared vocabulary.
inline DatasetSpec default_dataset_spec() {
  DatasetSpec spec;
  spec.modalities = {
      {"xray", 48, 4000}, {"ct", 96, 1500}, {"retina", 32, 800},
      {"ecg", 24, 400},   {"path", 64, 2000},
  };
  return spec;
}

struct Record {
  Tensor signal;                     // [d_m]
  std::vector<std::uint32_t> tokens;
  std::uint32_t label = 0;
};

struct SyntheticCorpus {
  std::string modality_id;
  std::vector<Record> records;

  std::size_t size() const { return records.size(); }
};

// [K][templates_per_class] token sequences; every template for class k
// contains class token k. Shared across modalities so one text can pass
// through every modality-specific text encoder.
struct TemplatePool {
  std::vector<std::vector<std::vector<std::uint32_t>>> per_class;
};

// Cross-modal probe tuples: per tuple one fresh latent draw rendered through
// every modality's mixing matrix. Used only at evaluation time; these are
// the ground-truth pairs for emergent cross-modal retrieval.
struct ProbeSet {
  std::vector<std::uint32_t> classes;          // label per tuple
  std::map<std::string, Tensor> signals;       // modality -> [n_tuples x d_m]
};

struct ModalityData {
  ModalityShape shape;
  Tensor mixing;  // [d_m x d_z], unit rows
  SyntheticCorpus train;
  std::vector<Record> eval;
};

struct GeneratedData {
  DatasetSpec spec;
  std::uint64_t master_seed = 0;
  ConceptModel concepts;
  TemplatePool templates;
  std::map<std::string, ModalityData> modalities;
  ProbeSet probe;
};

// ---------------------------------------------------------------------------
// Generation. Every stream is derived from (master seed, purpose label), so
// regenerating any corpus from the same spec is bitwise reproducible and
// modalities never share random state.
// ---------------------------------------------------------------------------

inline ConceptModel generate_concepts(std::size_t num_classes, std::size_t latent_dim,
                                      double max_abs_cos, double noise_sigma,
                                      std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("generate_concepts: need at least 2 classes");
  constexpr int kMaxRounds = 1000;
  Rng rng(seed);
  ConceptModel cm;
  cm.num_classes = num_classes;
  cm.latent_dim = latent_dim;
  cm.noise_sigma = noise_sigma;
  cm.class_latents = Tensor({num_classes, latent_dim});
  std::vector<Tensor> accepted;
  for (std::size_t k = 0; k < num_classes; ++k) {
    bool placed = false;
    for (int round = 0; round < kMaxRounds && !placed; ++round) {
      Tensor v = Tensor::randn({latent_dim}, rng);
      double norm = 0.0;
      for (std::size_t i = 0; i < latent_dim; ++i) norm += v[i] * v[i];
      norm = std::sqrt(norm);
      if (norm < 1e-9) continue;
      for (std::size_t i = 0; i < latent_dim; ++i) v[i] /= norm;
      bool ok = true;
      for (const Tensor& u : accepted) {
        double dot = 0.0;
        for (std::size_t i = 0; i < latent_dim; ++i) dot += u[i] * v[i];
        if (std::abs(dot) >= max_abs_cos) {
          ok = false;
          break;
        }
      }
      if (ok) {
        for (std::size_t i = 0; i < latent_dim; ++i) cm.class_latents.at(k, i) = v[i];
        accepted.push_back(std::move(v));
        placed = true;
      }
    }
    if (!placed) {
      throw ValueError("generate_concepts: could not place " + std::to_string(num_classes) +
                       " class latents with pairwise |cos| < " + std::to_string(max_abs_cos) +
                       " in " + std::to_string(latent_dim) +
                       " dimensions after 1000 rejection rounds; increase latent_dim");
    }
  }
  return cm;
}

inline TemplatePool generate_templates(const DatasetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t K = spec.num_classes, V = spec.vocab_size;
  TemplatePool pool;
  pool.per_class.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t t = 0; t < spec.templates_per_class; ++t) {
      const std::size_t len = 4 + rng.below(3);
      const std::size_t class_pos = rng.below(len);
      std::vector<std::uint32_t> tokens(len);
      for (std::size_t i = 0; i < len; ++i) {
        tokens[i] = (i == class_pos)
                        ? static_cast<std::uint32_t>(k)
                        : static_cast<std::uint32_t>(K + rng.below(V - K));
      }
      pool.per_class[k].push_back(std::move(tokens));
    }
  }
  return pool;
}

namespace detail {

// signal = mixing * latent, for one latent vector.
inline Tensor mix_signal(const Tensor& mixing, const Tensor& latent) {
  const std::size_t d_m = mixing.rows(), d_z = mixing.cols();
  Tensor out({d_m});
  for (std::size_t r = 0; r < d_m; ++r) {
    double acc = 0.0;
    const double* row = mixing.data() + r * d_z;
    for (std::size_t c = 0; c < d_z; ++c) acc += row[c] * latent[c];
    out[r] = acc;
  }
  return out;
}

inline Tensor class_latent_plus_noise(const ConceptModel& cm, std::uint32_t k, Rng& rng) {
  Tensor u({cm.latent_dim});
  for (std::size_t i = 0; i < cm.latent_dim; ++i) {
    u[i] = cm.class_latents.at(k, i) + cm.noise_sigma * rng.gaussian();
  }
  return u;
}

inline Record make_record(const ConceptModel& cm, const TemplatePool& templates,
                          const Tensor& mixing, std::uint32_t label, Rng& rng) {
  Record rec;
  rec.label = label;
  const Tensor u = class_latent_plus_noise(cm, label, rng);
  rec.signal = mix_signal(mixing, u);
  const auto& pool = templates.per_class[label];
  rec.tokens = pool[rng.below(pool.size())];
  return rec;
}

// Row-normalized random mixing matrix: unit rows keep the per-coordinate
// observation noise at exactly sigma.
inline Tensor make_mixing(std::size_t obs_dim, std::size_t latent_dim, std::uint64_t seed) {
  Rng rng(seed);
  Tensor mixing = Tensor::randn({obs_dim, latent_dim}, rng);
  return row_l2_normalize(mixing);
}

}  // namespace detail

// Records are generated with round-robin class labels, so the class
// distribution is uniform up to one record.
inline SyntheticCorpus generate_corpus(const ConceptModel& cm, const TemplatePool& templates,
                                       const ModalityShape& shape, const Tensor& mixing,
                                       std::uint64_t seed) {
  for (std::size_t k = 0; k < cm.num_classes; ++k) {
    if (templates.per_class.size() <= k || templates.per_class[k].empty()) {
      throw ValueError("generate_corpus: empty template pool for class " + std::to_string(k));
    }
  }
  Rng rng(seed);
  SyntheticCorpus corpus;
  corpus.modality_id = shape.id;
  corpus.records.reserve(shape.corpus_size);
  for (std::size_t i = 0; i < shape.corpus_size; ++i) {
    const auto label = static_cast<std::uint32_t>(i % cm.num_classes);
    corpus.records.push_back(detail::make_record(cm, templates, mixing, label, rng));
  }
  return corpus;
}

inline GeneratedData generate_dataset(const DatasetSpec& spec, std::uint64_t master_seed) {
  spec.validate();
  GeneratedData data;
  data.spec = spec;
  data.master_seed = master_seed;
  data.concepts = generate_concepts(spec.num_classes, spec.latent_dim, spec.max_abs_cos,
                                    spec.noise_sigma, derive_seed(master_seed, "concepts"));
  data.templates = generate_templates(spec, derive_seed(master_seed, "templates"));

  for (const auto& shape : spec.modalities) {
    ModalityData md;
    md.shape = shape;
    md.mixing = detail::make_mixing(shape.obs_dim, spec.latent_dim,
                                    derive_seed(master_seed, "mixing/" + shape.id));
    md.train = generate_corpus(data.concepts, data.templates, shape, md.mixing,
                               derive_seed(master_seed, "data/" + shape.id));
    Rng eval_rng(derive_seed(master_seed, "eval/" + shape.id));
    md.eval.reserve(spec.eval_per_modality);
    for (std::size_t i = 0; i < spec.eval_per_modality; ++i) {
      const auto label = static_cast<std::uint32_t>(i % spec.num_classes);
      md.eval.push_back(detail::make_record(data.concepts, data.templates, md.mixing, label, eval_rng));
    }
    data.modalities.emplace(shape.id, std::move(md));
  }

  // Probe tuples share one latent draw across modalities: the only place in
  // the artifact where cross-modal correspondence exists, and it is eval-only.
  Rng probe_rng(derive_seed(master_seed, "probe"));
  data.probe.classes.reserve(spec.probe_tuples);
  for (const auto& shape : spec.modalities) {
    data.probe.signals.emplace(shape.id, Tensor({spec.probe_tuples, shape.obs_dim}));
  }
  for (std::size_t i = 0; i < spec.probe_tuples; ++i) {
    const auto label = static_cast<std::uint32_t>(i % spec.num_classes);
    data.probe.classes.push_back(label);
    const Tensor u = detail::class_latent_plus_noise(data.concepts, label, probe_rng);
    for (const auto& shape : spec.modalities) {
      const Tensor sig = detail::mix_signal(data.modalities.at(shape.id).mixing, u);
      Tensor& dst = data.probe.signals.at(shape.id);
      for (std::size_t c = 0; c < shape.obs_dim; ++c) dst.at(i, c) = sig[c];
    }
  }
  return data;
}

inline GeneratedData default_dataset(std::uint64_t master_seed) {
  return generate_dataset(default_dataset_spec(), master_seed);
}

}  // namespace m3bind
