#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/rng.hpp"
#include "m3bind/tape.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

struct DenseLayer {
  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out]
};

// Additive low-rank reparameterization of one dense weight:
// effective W = W_base + (alpha/rank) * A * B. B starts at zero, so a fresh
// adapter leaves the forward pass bitwise unchanged.
struct LoraAdapter {
  Tensor a;  // [d_in x rank]
  Tensor b;  // [rank x d_out]
  std::size_t rank = 0;
  double alpha = 0.0;
};

// Stack of dense layers with tanh between them and no activation on the
// final projection; row normalization supplies the output nonlinearity.
struct Mlp {
  std::vector<DenseLayer> layers;
  std::vector<LoraAdapter> adapters;  // empty, or one per layer
  bool frozen = false;

  bool has_adapters() const { return !adapters.empty(); }

  std::size_t in_dim() const { return layers.front().weight.rows(); }
  std::size_t out_dim() const { return layers.back().weight.cols(); }
};

struct ImageEncoder {
  std::string modality_id;
  Mlp mlp;

  std::size_t in_dim() const { return mlp.in_dim(); }
  std::size_t out_dim() const { return mlp.out_dim(); }
};

// Mean-pooled token-embedding MLP over a vocabulary shared by every
// modality, so one text can be encoded by all modality-specific encoders.
struct TextEncoder {
  std::string modality_id;
  Tensor token_table;  // [V x d_tok]
  Mlp mlp;

  std::size_t vocab_size() const { return token_table.rows(); }
  std::size_t token_dim() const { return token_table.cols(); }
  std::size_t out_dim() const { return mlp.out_dim(); }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline Mlp make_mlp(std::size_t in_dim, std::size_t hidden_width, std::size_t hidden_layers,
                    std::size_t out_dim, Rng& rng) {
  Mlp mlp;
  std::size_t d = in_dim;
  for (std::size_t i = 0; i < hidden_layers; ++i) {
    DenseLayer layer;
    layer.weight = Tensor::randn({d, hidden_width}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    layer.bias = Tensor::zeros({hidden_width});
    mlp.layers.push_back(std::move(layer));
    d = hidden_width;
  }
  DenseLayer proj;
  proj.weight = Tensor::randn({d, out_dim}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  proj.bias = Tensor::zeros({out_dim});
  mlp.layers.push_back(std::move(proj));
  return mlp;
}

// Initialization is a pure function of (dimensions, seed): two modalities
// configured with equal dims and equal seeds get identical parameters.
inline ImageEncoder make_image_encoder(std::string modality_id, std::size_t in_dim,
                                       std::size_t hidden_width, std::size_t hidden_layers,
                                       std::size_t out_dim, std::uint64_t seed) {
  Rng rng(seed);
  ImageEncoder enc;
  enc.modality_id = std::move(modality_id);
  enc.mlp = make_mlp(in_dim, hidden_width, hidden_layers, out_dim, rng);
  return enc;
}

inline TextEncoder make_text_encoder(std::string modality_id, std::size_t vocab_size,
                                     std::size_t token_dim, std::size_t hidden_width,
                                     std::size_t hidden_layers, std::size_t out_dim,
                                     std::uint64_t seed) {
  Rng rng(seed);
  TextEncoder enc;
  enc.modality_id = std::move(modality_id);
  enc.token_table = Tensor::randn({vocab_size, token_dim}, rng);
  enc.mlp = make_mlp(token_dim, hidden_width, hidden_layers, out_dim, rng);
  return enc;
}

// ---------------------------------------------------------------------------
// LoRA lifecycle
// ---------------------------------------------------------------------------

inline void attach_lora(Mlp& mlp, std::size_t rank, double alpha, Rng& rng) {
  if (rank < 1) throw ValueError("attach_lora: rank must be >= 1");
  if (mlp.has_adapters()) throw ValueError("attach_lora: adapters already attached");
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& w = mlp.layers[i].weight;
    const std::size_t cap = std::min(w.rows(), w.cols());
    if (rank > cap) {
      throw ValueError("attach_lora: rank " + std::to_string(rank) + " exceeds min dimension " +
                       std::to_string(cap) + " of layer " + std::to_string(i) + " weight " +
                       w.shape_str());
    }
  }
  for (auto& layer : mlp.layers) {
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = Tensor::randn({layer.weight.rows(), rank}, rng, 0.02);
    ad.b = Tensor::zeros({rank, layer.weight.cols()});
    mlp.adapters.push_back(std::move(ad));
  }
  mlp.frozen = true;
}

inline void attach_lora(ImageEncoder& enc, std::size_t rank, double alpha, Rng& rng) {
  attach_lora(enc.mlp, rank, alpha, rng);
}

inline void attach_lora(TextEncoder& enc, std::size_t rank, double alpha, Rng& rng) {
  attach_lora(enc.mlp, rank, alpha, rng);
}

// Materializes W += (alpha/rank) * A * B and consumes the adapters; merging
// a second time without re-attaching is an error.
inline void merge_lora(Mlp& mlp) {
  if (!mlp.has_adapters()) {
    throw ValueError("merge_lora: no adapters attached (adapters are consumed on merge)");
  }
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& ad = mlp.adapters[i];
    const Tensor delta =
        scale(matmul(ad.a, ad.b), ad.alpha / static_cast<double>(ad.rank));
    mlp.layers[i].weight = add(mlp.layers[i].weight, delta);
  }
  mlp.adapters.clear();
  mlp.frozen = false;
}

inline void merge_lora(ImageEncoder& enc) { merge_lora(enc.mlp); }
inline void merge_lora(TextEncoder& enc) { merge_lora(enc.mlp); }

// ---------------------------------------------------------------------------
// Forward passes. Each encoder has a plain route (evaluation, finite-diff
// oracles) and a tape route (training); both share the same kernels and
// produce bitwise-identical values.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor mlp_forward(const Mlp& mlp, Tensor h) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& layer = mlp.layers[i];
    Tensor z = matmul(h, layer.weight);
    if (mlp.has_adapters()) {
      const auto& ad = mlp.adapters[i];
      const Tensor delta = scale(matmul(matmul(h, ad.a), ad.b),
                                 ad.alpha / static_cast<double>(ad.rank));
      z = add(z, delta);
    }
    z = add_bias(z, layer.bias);
    h = (i + 1 < mlp.layers.size()) ? tanh_ew(z) : std::move(z);
  }
  return row_l2_normalize(h);
}

}  // namespace detail

inline Tensor encode_images(const ImageEncoder& enc, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != enc.in_dim()) {
    throw ShapeError("encode_images(" + enc.modality_id + "): batch " + batch.shape_str() +
                     " does not match input dim " + std::to_string(enc.in_dim()));
  }
  return detail::mlp_forward(enc.mlp, batch);
}

inline Tensor encode_texts(const TextEncoder& enc,
                           const std::vector<std::vector<std::uint32_t>>& sequences) {
  return detail::mlp_forward(enc.mlp, embed_mean(enc.token_table, sequences));
}

// Memoizes tape nodes per parameter tensor so one tensor used twice in a step
// is tracked once. Only tensors in the trainable set receive gradients.
class Binding {
 public:
  Binding(Tape& tape, const std::unordered_set<const Tensor*>* trainable)
      : tape_(&tape), trainable_(trainable) {}

  NodeId node(const Tensor& t) {
    auto it = memo_.find(&t);
    if (it != memo_.end()) return it->second;
    const bool track = trainable_ != nullptr && trainable_->count(&t) > 0;
    const NodeId id = track ? tape_->input(t) : tape_->constant(t);
    memo_.emplace(&t, id);
    return id;
  }

  bool bound(const Tensor& t) const { return memo_.count(&t) > 0; }

  NodeId id_of(const Tensor& t) const {
    auto it = memo_.find(&t);
    if (it == memo_.end()) throw ValueError("Binding: tensor not bound to this tape");
    return it->second;
  }

  Tape& tape() { return *tape_; }

 private:
  Tape* tape_;
  const std::unordered_set<const Tensor*>* trainable_;
  std::unordered_map<const Tensor*, NodeId> memo_;
};

namespace detail {

inline NodeId mlp_forward(Tape& tape, Binding& bind, const Mlp& mlp, NodeId h) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& layer = mlp.layers[i];
    NodeId z = tape.matmul(h, bind.node(layer.weight));
    if (mlp.has_adapters()) {
      const auto& ad = mlp.adapters[i];
      NodeId low = tape.matmul(tape.matmul(h, bind.node(ad.a)), bind.node(ad.b));
      z = tape.add(z, tape.scale(low, ad.alpha / static_cast<double>(ad.rank)));
    }
    z = tape.add_bias(z, bind.node(layer.bias));
    h = (i + 1 < mlp.layers.size()) ? tape.tanh(z) : z;
  }
  return tape.row_l2_normalize(h);
}

}  // namespace detail

inline NodeId encode_images(Tape& tape, Binding& bind, const ImageEncoder& enc,
                            const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != enc.in_dim()) {
    throw ShapeError("encode_images(" + enc.modality_id + "): batch " + batch.shape_str() +
                     " does not match input dim " + std::to_string(enc.in_dim()));
  }
  return detail::mlp_forward(tape, bind, enc.mlp, tape.constant(batch));
}

inline NodeId encode_texts(Tape& tape, Binding& bind, const TextEncoder& enc,
                           const std::vector<std::vector<std::uint32_t>>& sequences) {
  NodeId pooled = tape.embed_mean(bind.node(enc.token_table), sequences);
  return detail::mlp_forward(tape, bind, enc.mlp, pooled);
}

// ---------------------------------------------------------------------------
// Parameter registry: deterministic name -> tensor listing for the optimizer
// and the checkpoint format.
// ---------------------------------------------------------------------------

struct ParamEntry {
  std::string name;
  Tensor* tensor = nullptr;
  bool trainable = true;
  std::string group;  // learning-rate group (modality id or "student")
};

inline void collect_params(Mlp& mlp, const std::string& prefix, const std::string& group,
                           std::vector<ParamEntry>& out) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const std::string base = prefix + "/l" + std::to_string(i);
    const bool base_trainable = !mlp.frozen;
    out.push_back({base + "/w", &mlp.layers[i].weight, base_trainable, group});
    out.push_back({base + "/b", &mlp.layers[i].bias, base_trainable, group});
    if (mlp.has_adapters()) {
      out.push_back({base + "/lora_a", &mlp.adapters[i].a, true, group});
      out.push_back({base + "/lora_b", &mlp.adapters[i].b, true, group});
    }
  }
}

// The final projection layer; the binding trainer may unfreeze these on top
// of the adapters when configured to train heads.
inline std::vector<Tensor*> projection_params(Mlp& mlp) {
  return {&mlp.layers.back().weight, &mlp.layers.back().bias};
}

inline void collect_params(ImageEncoder& enc, const std::string& prefix, const std::string& group,
                           std::vector<ParamEntry>& out) {
  collect_params(enc.mlp, prefix + "/img", group, out);
}

inline void collect_params(TextEncoder& enc, const std::string& prefix, const std::string& group,
                           std::vector<ParamEntry>& out) {
  out.push_back({prefix + "/txt/token_table", &enc.token_table, !enc.mlp.frozen, group});
  collect_params(enc.mlp, prefix + "/txt", group, out);
}

}  // namespace m3bind
