#include <cmath>

#include "doctest.h"
#include "m3bind/encoders.hpp"
#include "m3bind/optim.hpp"

using namespace m3bind;

namespace {

Tensor random_batch(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({n, d}, rng);
}

}  // namespace

TEST_CASE("encode_images: unit-norm rows and dimension checking") {
  ImageEncoder enc = make_image_encoder("xray", 6, 8, 2, 4, 21);
  const Tensor out = encode_images(enc, random_batch(5, 6, 1));
  CHECK(out.cols() == 4);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < out.cols(); ++c) sq += out.at(r, c) * out.at(r, c);
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(encode_images(enc, random_batch(5, 7, 1)), ShapeError);
}

TEST_CASE("single identity layer: [3,4] maps to [0.6,0.8] (no final activation)") {
  ImageEncoder enc;
  enc.modality_id = "toy";
  DenseLayer layer;
  layer.weight = Tensor({2, 2}, {1, 0, 0, 1});
  layer.bias = Tensor::zeros({2});
  enc.mlp.layers.push_back(layer);
  const Tensor out = encode_images(enc, Tensor({1, 2}, {3, 4}));
  CHECK(out.at(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(out.at(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("encode_texts: determinism and repetition-invariant pooling") {
  TextEncoder enc = make_text_encoder("ecg", 10, 4, 8, 2, 4, 22);
  const Tensor two = encode_texts(enc, {{3, 5, 1}, {3, 5, 1}});
  for (std::size_t c = 0; c < two.cols(); ++c) {
    CHECK(two.at(0, c) == two.at(1, c));
  }
  const Tensor rep = encode_texts(enc, {{7}, {7, 7}});
  for (std::size_t c = 0; c < rep.cols(); ++c) {
    CHECK(rep.at(0, c) == rep.at(1, c));
  }
  CHECK_THROWS_AS(encode_texts(enc, {{}}), ValueError);
  CHECK_THROWS_AS(encode_texts(enc, {{10}}), ValueError);
}

TEST_CASE("architecture symmetry: equal dims and seeds give identical parameters") {
  const ImageEncoder a = make_image_encoder("a", 6, 8, 2, 4, 777);
  const ImageEncoder b = make_image_encoder("b", 6, 8, 2, 4, 777);
  REQUIRE(a.mlp.layers.size() == b.mlp.layers.size());
  for (std::size_t i = 0; i < a.mlp.layers.size(); ++i) {
    CHECK(a.mlp.layers[i].weight == b.mlp.layers[i].weight);
    CHECK(a.mlp.layers[i].bias == b.mlp.layers[i].bias);
  }
}

TEST_CASE("attach_lora: zero-init identity is bitwise, rank cap is enforced") {
  ImageEncoder enc = make_image_encoder("xray", 6, 8, 2, 4, 23);
  const Tensor batch = random_batch(4, 6, 3);
  const Tensor before = encode_images(enc, batch);

  ImageEncoder too_big = enc;
  Rng rng_big(5);
  CHECK_THROWS_AS(attach_lora(too_big, 5, 8.0, rng_big), ValueError);  // min dim is 4

  Rng rng(5);
  attach_lora(enc, 2, 8.0, rng);
  CHECK(enc.mlp.frozen);
  CHECK(encode_images(enc, batch) == before);
}

TEST_CASE("frozen base stays bitwise unchanged across adapter training steps") {
  ImageEncoder enc = make_image_encoder("xray", 6, 8, 2, 4, 24);
  Rng rng(6);
  attach_lora(enc, 2, 8.0, rng);
  const std::vector<Tensor> base_before = [&] {
    std::vector<Tensor> t;
    for (const auto& l : enc.mlp.layers) {
      t.push_back(l.weight);
      t.push_back(l.bias);
    }
    return t;
  }();

  std::vector<ParamEntry> params;
  collect_params(enc, "xray", "xray", params);
  std::vector<ParamEntry> trainable;
  std::unordered_set<const Tensor*> trainable_set;
  for (const auto& p : params) {
    if (p.trainable) {
      trainable.push_back(p);
      trainable_set.insert(p.tensor);
    }
  }
  AdamW opt(trainable, {});
  const Tensor batch = random_batch(4, 6, 7);
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    Binding bind(tape, &trainable_set);
    const NodeId out = encode_images(tape, bind, enc, batch);
    const NodeId loss = tape.reduce_mean(out);
    const GradMap gm = tape.backward(loss);
    std::unordered_map<const Tensor*, Tensor> grads;
    for (const auto& p : trainable) grads.emplace(p.tensor, gm.at(bind.id_of(*p.tensor)));
    opt.step(grads, {{"xray", 0.05}}, 1.0);
  }

  std::size_t i = 0;
  for (const auto& l : enc.mlp.layers) {
    CHECK(l.weight == base_before[i++]);
    CHECK(l.bias == base_before[i++]);
  }
  // The adapters themselves did move.
  bool adapters_moved = false;
  for (const auto& ad : enc.mlp.adapters) {
    for (std::size_t j = 0; j < ad.b.size(); ++j) {
      if (ad.b[j] != 0.0) adapters_moved = true;
    }
  }
  CHECK(adapters_moved);
}

TEST_CASE("merge_lora: zero delta is bitwise, random delta matches within 1e-10") {
  ImageEncoder enc = make_image_encoder("xray", 6, 8, 2, 4, 25);
  Rng rng(8);
  attach_lora(enc, 2, 8.0, rng);

  SUBCASE("B = 0 merges to the base weights bitwise") {
    ImageEncoder merged = enc;
    const std::vector<Tensor> base = [&] {
      std::vector<Tensor> t;
      for (const auto& l : enc.mlp.layers) t.push_back(l.weight);
      return t;
    }();
    merge_lora(merged);
    for (std::size_t i = 0; i < merged.mlp.layers.size(); ++i) {
      CHECK(merged.mlp.layers[i].weight == base[i]);
    }
    CHECK_THROWS_AS(merge_lora(merged), ValueError);  // adapters consumed on merge
  }

  SUBCASE("random adapters: merged forward equals adapted forward on 10 batches") {
    for (auto& ad : enc.mlp.adapters) {
      Rng r2(100 + ad.rank);
      ad.b = Tensor::randn(ad.b.shape(), r2, 0.3);
      ad.a = Tensor::randn(ad.a.shape(), r2, 0.3);
    }
    ImageEncoder merged = enc;
    merge_lora(merged);
    for (int t = 0; t < 10; ++t) {
      const Tensor batch = random_batch(5, 6, 200 + t);
      const Tensor adapted = encode_images(enc, batch);
      const Tensor plain = encode_images(merged, batch);
      for (std::size_t i = 0; i < adapted.size(); ++i) {
        CHECK(std::abs(adapted[i] - plain[i]) < 1e-10);
      }
    }
  }
}

TEST_CASE("tape and plain encoder forwards agree bitwise, with and without adapters") {
  TextEncoder enc = make_text_encoder("path", 12, 4, 8, 2, 4, 26);
  const std::vector<std::vector<std::uint32_t>> seqs{{0, 3, 7}, {11, 2}, {5}};

  auto tape_forward = [&] {
    Tape tape;
    Binding bind(tape, nullptr);
    return tape.value(encode_texts(tape, bind, enc, seqs));
  };
  CHECK(tape_forward() == encode_texts(enc, seqs));

  Rng rng(9);
  attach_lora(enc, 2, 8.0, rng);
  for (auto& ad : enc.mlp.adapters) {
    Rng r2(300);
    ad.b = Tensor::randn(ad.b.shape(), r2, 0.2);
  }
  CHECK(tape_forward() == encode_texts(enc, seqs));
}
