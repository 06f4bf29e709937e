#include <cmath>

#include "doctest.h"
#include "m3bind/evaluation.hpp"
#include "m3bind/synthdata.hpp"

using namespace m3bind;

namespace {

PromptSet tiny_prompts(std::size_t K, std::size_t V, bool multi = true) {
  DatasetSpec spec = default_dataset_spec();
  spec.num_classes = K;
  spec.vocab_size = V;
  return PromptSet::from_templates(generate_templates(spec, 99), multi);
}

}  // namespace

TEST_CASE("zero-shot: oracle embeddings score perfect accuracy") {
  const std::size_t K = 8;
  TextEncoder enc = make_text_encoder("m", 64, 8, 12, 2, 16, 41);
  const PromptSet prompts = tiny_prompts(K, 64);
  const Tensor prompt_embeds = class_prompt_embeddings(enc, prompts);

  const std::size_t n = 40;
  Tensor img({n, 16});
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % K);
    for (std::size_t c = 0; c < 16; ++c) img.at(i, c) = prompt_embeds.at(labels[i], c);
  }
  const MetricsReport r = zero_shot_classify(img, labels, prompts, enc);
  CHECK(r.accuracy == 1.0);
  CHECK(r.macro_f1 == doctest::Approx(1.0));
  CHECK(r.recall_at.at(1) == 1.0);
  CHECK(r.per_class_counts == std::vector<std::size_t>(K, n / K));
}

TEST_CASE("zero-shot: random embeddings sit at chance for K=8") {
  const std::size_t K = 8, n = 10000;
  TextEncoder enc = make_text_encoder("m", 64, 8, 12, 2, 16, 42);
  const PromptSet prompts = tiny_prompts(K, 64);
  Rng rng(5);
  const Tensor img = Tensor::randn({n, 16}, rng);
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(rng.below(K));
  const MetricsReport r = zero_shot_classify(img, labels, prompts, enc);
  CHECK(std::abs(r.accuracy - 0.125) <= 0.01);
}

TEST_CASE("zero-shot: predictions invariant under positive rescaling") {
  const std::size_t K = 4, n = 64;
  TextEncoder enc = make_text_encoder("m", 64, 8, 12, 2, 16, 43);
  const PromptSet prompts = tiny_prompts(K, 64);
  Rng rng(6);
  const Tensor img = Tensor::randn({n, 16}, rng);
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(rng.below(K));
  const MetricsReport base = zero_shot_classify(img, labels, prompts, enc);
  const MetricsReport scaled = zero_shot_classify(scale(img, 5.0), labels, prompts, enc);
  CHECK(base.accuracy == scaled.accuracy);
  CHECK(base.macro_f1 == scaled.macro_f1);
  CHECK(base.recall_at == scaled.recall_at);
}

TEST_CASE("zero-shot: metrics invariant under identical row permutation") {
  const std::size_t K = 4, n = 32;
  TextEncoder enc = make_text_encoder("m", 64, 8, 12, 2, 16, 44);
  const PromptSet prompts = tiny_prompts(K, 64);
  Rng rng(7);
  const Tensor img = Tensor::randn({n, 16}, rng);
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(rng.below(K));

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = (i * 7 + 3) % n;
  Tensor img_p({n, 16});
  std::vector<std::uint32_t> labels_p(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels_p[i] = labels[perm[i]];
    for (std::size_t c = 0; c < 16; ++c) img_p.at(i, c) = img.at(perm[i], c);
  }
  const MetricsReport a = zero_shot_classify(img, labels, prompts, enc);
  const MetricsReport b = zero_shot_classify(img_p, labels_p, prompts, enc);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.macro_f1 == doctest::Approx(b.macro_f1).epsilon(1e-14));
  CHECK(a.recall_at == b.recall_at);
}

TEST_CASE("retrieval: self-retrieval is perfect; recall is monotone in k") {
  Rng rng(8);
  const Tensor gallery = Tensor::randn({20, 12}, rng);
  std::vector<std::size_t> identity(20);
  for (std::size_t i = 0; i < 20; ++i) identity[i] = i;
  const auto r = retrieval(gallery, gallery, identity, {1, 5, 10, 20});
  CHECK(r.at(1) == 1.0);
  CHECK(r.at(20) == 1.0);

  const Tensor queries = Tensor::randn({20, 12}, rng);
  const auto rq = retrieval(queries, gallery, identity, {1, 5, 10, 20});
  CHECK(rq.at(1) <= rq.at(5));
  CHECK(rq.at(5) <= rq.at(10));
  CHECK(rq.at(10) <= rq.at(20));
  CHECK(rq.at(20) == 1.0);  // k >= gallery size

  CHECK_THROWS_AS(retrieval(queries, gallery, std::vector<std::size_t>(20, 25), {1}), ValueError);
}

TEST_CASE("retrieval: unrelated gallery of 100 sits at chance over 1e4 trials") {
  Rng rng(9);
  const std::size_t G = 100;
  std::vector<std::size_t> identity(G);
  for (std::size_t i = 0; i < G; ++i) identity[i] = i;
  double r1 = 0.0, r10 = 0.0;
  const int trials = 100;  // 100 galleries x 100 queries = 1e4 query trials
  for (int t = 0; t < trials; ++t) {
    const Tensor queries = Tensor::randn({G, 64}, rng);
    const Tensor gallery = Tensor::randn({G, 64}, rng);
    const auto r = retrieval(queries, gallery, identity, {1, 10});
    r1 += r.at(1);
    r10 += r.at(10);
  }
  CHECK(std::abs(r1 / trials - 0.01) <= 0.01);
  CHECK(std::abs(r10 / trials - 0.10) <= 0.01);
}

TEST_CASE("retrieval: ties break toward the lower gallery index") {
  const Tensor queries({1, 2}, {1, 0});
  const Tensor gallery({3, 2}, {1, 0, 1, 0, 0, 1});  // rows 0 and 1 tie
  CHECK(retrieval(queries, gallery, {0}, {1}).at(1) == 1.0);
  CHECK(retrieval(queries, gallery, {1}, {1}).at(1) == 0.0);
}

TEST_CASE("few-shot probe: separable full-coverage case fits the support exactly") {
  // Two well-separated clusters in the embedding plane.
  const std::size_t n = 20;
  Tensor embeds({n, 2});
  std::vector<std::uint32_t> labels(n);
  Rng rng(10);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % 2);
    embeds.at(i, 0) = (labels[i] == 0 ? 1.0 : -1.0) + 0.05 * rng.gaussian();
    embeds.at(i, 1) = 0.05 * rng.gaussian();
  }
  const FewShotResult r = few_shot_probe(embeds, labels, 2, 10, 1);
  CHECK(r.train_accuracy == 1.0);

  CHECK_THROWS_AS(few_shot_probe(embeds, labels, 2, 11, 1), ValueError);
}

TEST_CASE("few-shot probe: shuffled labels collapse to chance") {
  const std::size_t n = 400, K = 4;
  Rng rng(11);
  const Tensor embeds = Tensor::randn({n, 8}, rng);
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(i % K);
  const FewShotResult r = few_shot_probe(embeds, labels, K, 10, 2);
  CHECK(std::abs(r.test_accuracy - 1.0 / K) <= 0.08);
}

TEST_CASE("few-shot probe: deterministic given seed and inputs") {
  Rng rng(12);
  const Tensor embeds = Tensor::randn({80, 6}, rng);
  std::vector<std::uint32_t> labels(80);
  for (std::size_t i = 0; i < 80; ++i) labels[i] = static_cast<std::uint32_t>(i % 4);
  const FewShotResult a = few_shot_probe(embeds, labels, 4, 5, 77);
  const FewShotResult b = few_shot_probe(embeds, labels, 4, 5, 77);
  CHECK(a.test_accuracy == b.test_accuracy);
  const FewShotResult c = few_shot_probe(embeds, labels, 4, 5, 78);
  (void)c;  // different seed may differ; it must at least run
}

TEST_CASE("cross-image retrieval: identical encoders reduce to self-retrieval") {
  DatasetSpec spec = default_dataset_spec();
  spec.modalities = {{"a", 12, 64}, {"b", 12, 64}};
  spec.eval_per_modality = 16;
  spec.probe_tuples = 24;
  spec.latent_dim = 16;
  const GeneratedData data = generate_dataset(spec, 55);

  ImageEncoder enc_a = make_image_encoder("a", 12, 16, 2, 8, 60);
  ImageEncoder enc_b = enc_a;
  enc_b.modality_id = "b";
  // Same mixing for both probes would be needed for exact equality; here we
  // check the degenerate same-modality case instead.
  ImageEncoder enc_a2 = enc_a;
  const CrossModalRecall r = cross_image_retrieval(enc_a, enc_a2, data.probe);
  CHECK(r.a_to_b.at(1) == 1.0);
  CHECK(r.b_to_a.at(1) == 1.0);

  ImageEncoder enc_missing = make_image_encoder("zz", 12, 16, 2, 8, 61);
  CHECK_THROWS_AS(cross_image_retrieval(enc_a, enc_missing, data.probe), ValueError);
}
