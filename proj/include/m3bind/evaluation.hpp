#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/encoders.hpp"
#include "m3bind/rng.hpp"
#include "m3bind/synthdata.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

// Class prompts: the per-class token templates. "multi" averages the
// embeddings of every template (re-normalized); "naive" uses the first one.
struct PromptSet {
  std::vector<std::vector<std::vector<std::uint32_t>>> per_class;
  bool multi = true;

  static PromptSet from_templates(const TemplatePool& pool, bool multi) {
    PromptSet p;
    p.per_class = pool.per_class;
    p.multi = multi;
    p.validate();
    return p;
  }

  void validate() const {
    if (per_class.empty()) throw ValueError("PromptSet: no classes");
    for (std::size_t k = 0; k < per_class.size(); ++k) {
      if (per_class[k].empty()) {
        throw ValueError("PromptSet: class " + std::to_string(k) + " has no templates");
      }
    }
  }

  std::size_t num_classes() const { return per_class.size(); }
};

// One unit-norm prompt embedding per class.
inline Tensor class_prompt_embeddings(const TextEncoder& enc, const PromptSet& prompts) {
  prompts.validate();
  const std::size_t K = prompts.num_classes();
  Tensor out({K, enc.out_dim()});
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::vector<std::uint32_t>> batch;
    if (prompts.multi) {
      batch = prompts.per_class[k];
    } else {
      batch.push_back(prompts.per_class[k].front());
    }
    const Tensor embeds = encode_texts(enc, batch);
    for (std::size_t c = 0; c < enc.out_dim(); ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < embeds.rows(); ++t) acc += embeds.at(t, c);
      out.at(k, c) = acc / static_cast<double>(embeds.rows());
    }
  }
  return row_l2_normalize(out);
}

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double macro_precision = 0.0;
  std::map<std::size_t, double> recall_at;
  std::vector<std::size_t> per_class_counts;
};

namespace detail {

// Rank of the correct item among scores, ties broken toward lower indices:
// an equal-scoring item only outranks the target if its index is smaller.
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t correct) {
  std::size_t rank = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[correct] || (scores[j] == scores[correct] && j < correct)) ++rank;
  }
  return rank;
}

}  // namespace detail

// Nearest class-prompt classification over cosine similarity. Embeddings are
// re-normalized internally, so predictions are invariant under positive
// rescaling of the inputs.
inline MetricsReport zero_shot_classify(const Tensor& img_embeds,
                                        const std::vector<std::uint32_t>& labels,
                                        const PromptSet& prompts, const TextEncoder& enc,
                                        const std::vector<std::size_t>& ks = {1, 5, 10}) {
  if (img_embeds.rows() != labels.size()) {
    throw ShapeError("zero_shot_classify: embeddings " + img_embeds.shape_str() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const Tensor prompt_embeds = class_prompt_embeddings(enc, prompts);
  const std::size_t K = prompt_embeds.rows();
  const Tensor queries = row_l2_normalize(img_embeds);
  const Tensor sims = matmul_nt(queries, prompt_embeds);

  MetricsReport report;
  report.per_class_counts.assign(K, 0);
  std::vector<std::size_t> true_pos(K, 0), pred_count(K, 0);
  std::map<std::size_t, std::size_t> rank_hits;
  for (std::size_t k : ks) rank_hits[k] = 0;

  const std::size_t n = queries.rows();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t label = labels[i];
    if (label >= K) throw ValueError("zero_shot_classify: label " + std::to_string(label) + " out of range");
    std::vector<double> scores(K);
    for (std::size_t k = 0; k < K; ++k) scores[k] = sims.at(i, k);
    std::size_t pred = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (scores[k] > scores[pred]) pred = k;
    }
    report.per_class_counts[label] += 1;
    pred_count[pred] += 1;
    if (pred == label) {
      ++correct;
      true_pos[label] += 1;
    }
    const std::size_t rank = detail::rank_of(scores, label);
    for (auto& [k, hits] : rank_hits) {
      if (rank < k) ++hits;
    }
  }

  report.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  double f1_sum = 0.0, prec_sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double tp = static_cast<double>(true_pos[k]);
    const double prec = pred_count[k] ? tp / static_cast<double>(pred_count[k]) : 0.0;
    const double rec =
        report.per_class_counts[k] ? tp / static_cast<double>(report.per_class_counts[k]) : 0.0;
    prec_sum += prec;
    f1_sum += (prec + rec > 0.0) ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  report.macro_precision = prec_sum / static_cast<double>(K);
  report.macro_f1 = f1_sum / static_cast<double>(K);
  for (const auto& [k, hits] : rank_hits) {
    report.recall_at[k] = static_cast<double>(hits) / static_cast<double>(n);
  }
  return report;
}

// Recall@k over cosine similarity: the fraction of queries whose single
// correct gallery row ranks in the top k.
inline std::map<std::size_t, double> retrieval(const Tensor& query_embeds,
                                               const Tensor& gallery_embeds,
                                               const std::vector<std::size_t>& pair_index,
                                               const std::vector<std::size_t>& ks = {1, 5, 10}) {
  if (query_embeds.rows() != pair_index.size()) {
    throw ShapeError("retrieval: query count does not match pair index length");
  }
  const Tensor queries = row_l2_normalize(query_embeds);
  const Tensor gallery = row_l2_normalize(gallery_embeds);
  const Tensor sims = matmul_nt(queries, gallery);
  const std::size_t G = gallery.rows();
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : ks) hits[k] = 0;
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    if (pair_index[i] >= G) {
      throw ValueError("retrieval: pair index " + std::to_string(pair_index[i]) +
                       " out of range for gallery of " + std::to_string(G));
    }
    std::vector<double> scores(G);
    for (std::size_t j = 0; j < G; ++j) scores[j] = sims.at(i, j);
    const std::size_t rank = detail::rank_of(scores, pair_index[i]);
    for (auto& [k, h] : hits) {
      if (rank < k) ++h;
    }
  }
  std::map<std::size_t, double> out;
  for (const auto& [k, h] : hits) {
    out[k] = static_cast<double>(h) / static_cast<double>(queries.rows());
  }
  return out;
}

// Emergent image-to-image retrieval across the shared space: probe tuples
// embedded by each side's image encoder, matched by tuple index. Reported
// per direction plus the direction mean.
struct CrossModalRecall {
  std::map<std::size_t, double> a_to_b;
  std::map<std::size_t, double> b_to_a;
  std::map<std::size_t, double> mean;
};

inline CrossModalRecall cross_image_retrieval(const ImageEncoder& enc_a, const ImageEncoder& enc_b,
                                              const ProbeSet& probe,
                                              const std::vector<std::size_t>& ks = {1, 5, 10}) {
  const auto it_a = probe.signals.find(enc_a.modality_id);
  const auto it_b = probe.signals.find(enc_b.modality_id);
  if (it_a == probe.signals.end() || it_b == probe.signals.end()) {
    throw ValueError("cross_image_retrieval: probe set lacks modality '" +
                     (it_a == probe.signals.end() ? enc_a.modality_id : enc_b.modality_id) + "'");
  }
  const Tensor ea = encode_images(enc_a, it_a->second);
  const Tensor eb = encode_images(enc_b, it_b->second);
  std::vector<std::size_t> identity(ea.rows());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  CrossModalRecall out;
  out.a_to_b = retrieval(ea, eb, identity, ks);
  out.b_to_a = retrieval(eb, ea, identity, ks);
  for (const auto& [k, v] : out.a_to_b) out.mean[k] = 0.5 * (v + out.b_to_a.at(k));
  return out;
}

// ---------------------------------------------------------------------------
// Few-shot linear probe: multinomial logistic regression on frozen
// embeddings, full-batch gradient descent, fixed hyperparameters (500 steps,
// lr 0.1, no regularization) so numbers are comparable across ablations.
// ---------------------------------------------------------------------------

struct FewShotResult {
  double test_accuracy = 0.0;
  double train_accuracy = 0.0;
};

inline FewShotResult few_shot_probe(const Tensor& embeds, const std::vector<std::uint32_t>& labels,
                                    std::size_t num_classes, std::size_t shots,
                                    std::uint64_t seed) {
  if (embeds.rows() != labels.size()) {
    throw ShapeError("few_shot_probe: embeddings vs labels length mismatch");
  }
  if (shots == 0) throw ValueError("few_shot_probe: shots must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw ValueError("few_shot_probe: label out of range");
    by_class[labels[i]].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto& pool = by_class[k];
    if (pool.size() < shots) {
      throw ValueError("few_shot_probe: class " + std::to_string(k) + " has only " +
                       std::to_string(pool.size()) + " examples, need " + std::to_string(shots));
    }
    // Partial Fisher-Yates: the first `shots` entries become the support set.
    for (std::size_t i = 0; i < shots; ++i) {
      const std::size_t j = i + rng.below(pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    train_idx.insert(train_idx.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
    test_idx.insert(test_idx.end(), pool.begin() + static_cast<std::ptrdiff_t>(shots), pool.end());
  }

  const std::size_t d = embeds.cols();
  auto subset = [&](const std::vector<std::size_t>& idx) {
    Tensor out({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < d; ++c) out.at(i, c) = embeds.at(idx[i], c);
    }
    return out;
  };
  const Tensor x_train = subset(train_idx);

  Tensor w({d, num_classes});
  Tensor bias({num_classes});
  const std::size_t n = train_idx.size();
  const double lr = 0.1;
  for (int iter = 0; iter < 500; ++iter) {
    const Tensor logits = add_bias(matmul(x_train, w), bias);
    const Tensor logp = log_softmax_rows(logits);
    Tensor delta({n, num_classes});  // softmax - onehot
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < num_classes; ++k) {
        delta.at(i, k) = std::exp(logp.at(i, k));
      }
      delta.at(i, labels[train_idx[i]]) -= 1.0;
    }
    const Tensor gw = scale(matmul_tn(x_train, delta), 1.0 / static_cast<double>(n));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
    for (std::size_t k = 0; k < num_classes; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += delta.at(i, k);
      bias[k] -= lr * acc / static_cast<double>(n);
    }
  }

  auto accuracy_on = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 1.0;
    const Tensor logits = add_bias(matmul(subset(idx), w), bias);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t pred = 0;
      for (std::size_t k = 1; k < num_classes; ++k) {
        if (logits.at(i, k) > logits.at(i, pred)) pred = k;
      }
      if (pred == labels[idx[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
  };

  FewShotResult result;
  result.train_accuracy = accuracy_on(train_idx);
  result.test_accuracy = accuracy_on(test_idx);
  return result;
}

// Per-modality zero-shot accuracy with the student text encoder versus each
// teacher; positive deltas mean the student improved on its teacher.
struct StudentConsistency {
  std::map<std::string, double> teacher_acc;
  std::map<std::string, double> student_acc;
  std::map<std::string, double> delta;
  double mean_delta = 0.0;
};

}  // namespace m3bind
