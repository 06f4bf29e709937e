#include <cmath>

#include "doctest.h"
#include "m3bind/encoders.hpp"
#include "m3bind/gradcheck.hpp"
#include "m3bind/objectives.hpp"

using namespace m3bind;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return row_l2_normalize(Tensor::randn({n, d}, rng));
}

}  // namespace

TEST_CASE("contrastive loss: single pair is exactly zero") {
  const Tensor one = unit_rows(1, 4, 1);
  CHECK(clip_contrastive_loss(one, one, 0.07, false) == 0.0);
  CHECK(clip_contrastive_loss(one, one, 0.07, true) == 0.0);
}

TEST_CASE("contrastive loss: orthonormal pair at tau=1 gives 2*log(1+e^-1)") {
  const Tensor img({2, 2}, {1, 0, 0, 1});
  const double expected = 2.0 * std::log(1.0 + std::exp(-1.0));
  CHECK(clip_contrastive_loss(img, img, 1.0, false) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(clip_contrastive_loss(img, img, 1.0, true) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("contrastive loss: wrong pairing costs strictly more than the right one") {
  const Tensor img({2, 2}, {1, 0, 0, 1});
  const Tensor swapped({2, 2}, {0, 1, 1, 0});
  // Brute force over both pairings of the orthonormal set.
  const double correct = clip_contrastive_loss(img, img, 0.5, false);
  const double wrong = clip_contrastive_loss(img, swapped, 0.5, false);
  CHECK(correct < wrong);
}

TEST_CASE("contrastive loss: input contracts") {
  const Tensor not_unit({2, 2}, {1, 1, 0, 1});
  const Tensor ok = unit_rows(2, 2, 2);
  CHECK_THROWS_AS(clip_contrastive_loss(not_unit, ok, 0.07, false), ValueError);
  CHECK_THROWS_AS((Tensor{{0, 2}}), ShapeError);  // empty batches cannot exist
  CHECK_THROWS_AS(clip_contrastive_loss(ok, ok, 0.0, false), ValueError);
}

TEST_CASE("contrastive loss: non-negative, bounded-margin comparison") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor img = unit_rows(4, 6, 100 + seed);
    const Tensor txt = unit_rows(4, 6, 200 + seed);
    CHECK(clip_contrastive_loss(img, txt, 0.5, false) >= 0.0);
  }
  // Matched pairs at +1 / mismatched at -1 beat the all-equal configuration.
  const Tensor separable({2, 2}, {1, 0, -1, 0});
  const Tensor collapsed({2, 2}, {1, 0, 1, 0});
  CHECK(clip_contrastive_loss(separable, separable, 0.5, false) <
        clip_contrastive_loss(collapsed, collapsed, 0.5, false));
}

TEST_CASE("contrastive loss: permutation equivariance") {
  const Tensor img = unit_rows(5, 8, 3);
  const Tensor txt = unit_rows(5, 8, 4);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor img_p({5, 8}), txt_p({5, 8});
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 8; ++c) {
      img_p.at(i, c) = img.at(perm[i], c);
      txt_p.at(i, c) = txt.at(perm[i], c);
    }
  }
  for (bool sym : {false, true}) {
    const double base = clip_contrastive_loss(img, txt, 0.07, sym);
    const double permuted = clip_contrastive_loss(img_p, txt_p, 0.07, sym);
    CHECK(std::abs(base - permuted) <= 1e-12);
  }
}

TEST_CASE("contrastive loss: sharper temperature strictly lowers a separable batch") {
  const Tensor img({2, 2}, {1, 0, -1, 0});
  double prev = clip_contrastive_loss(img, img, 1.0, false);
  for (double tau : {0.5, 0.1}) {
    const double cur = clip_contrastive_loss(img, img, tau, false);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("pairwise text mse: zeros, constant offset, pair combinatorics") {
  const Tensor base = unit_rows(3, 4, 5);
  std::map<std::string, Tensor> embeds{{"a", base}, {"b", base}, {"c", base}};
  auto all_zero = pairwise_text_mse(embeds);
  CHECK(all_zero.size() == 3);  // C(3,2)
  for (const auto& [pair, v] : all_zero) CHECK(v == 0.0);

  Tensor offset = base;
  const double c = 0.25;
  for (std::size_t i = 0; i < offset.size(); ++i) offset[i] += c;
  const auto two = pairwise_text_mse({{"a", base}, {"b", offset}});
  CHECK(two.at({"a", "b"}) == doctest::Approx(c * c).epsilon(1e-12));

  const Tensor wrong_shape = unit_rows(3, 5, 6);
  CHECK_THROWS_AS(pairwise_text_mse({{"a", base}, {"b", wrong_shape}}), ShapeError);
}

TEST_CASE("total bind loss: degenerate, hand value, lambda off, missing weight") {
  const BindLossReport single =
      total_bind_loss({{"a", 0.8}}, {}, {{"a", 1.0}}, 7.0);
  CHECK(single.total == doctest::Approx(0.8));

  const BindLossReport two = total_bind_loss({{"a", 0.5}, {"b", 0.7}}, {{{"a", "b"}, 0.02}},
                                             {{"a", 1.0}, {"b", 1.0}}, 10.0);
  CHECK(two.total == doctest::Approx(1.4).epsilon(1e-12));

  const BindLossReport no_lambda = total_bind_loss({{"a", 0.5}, {"b", 0.7}}, {{{"a", "b"}, 0.02}},
                                                   {{"a", 1.0}, {"b", 1.0}}, 0.0);
  CHECK(no_lambda.total == doctest::Approx(1.2).epsilon(1e-12));

  CHECK_THROWS_AS(total_bind_loss({{"a", 0.5}}, {}, {}, 1.0), ValueError);
}

TEST_CASE("bind loss report reconstructs its total from the stored parts") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::map<std::string, double> clips{{"a", rng.uniform()}, {"b", rng.uniform()},
                                        {"c", rng.uniform()}};
    std::map<ModalityPair, double> mses{{{"a", "b"}, rng.uniform()},
                                        {{"a", "c"}, rng.uniform()},
                                        {{"b", "c"}, rng.uniform()}};
    std::map<std::string, double> weights{{"a", 0.1 + rng.uniform()},
                                          {"b", 0.1 + rng.uniform()},
                                          {"c", 0.1 + rng.uniform()}};
    const bool weighted = trial % 2 == 0;
    const BindLossReport r = total_bind_loss(clips, mses, weights, 10.0 * rng.uniform(), weighted);
    CHECK(std::abs(r.total - r.reconstruct()) <= 1e-10);
  }
}

TEST_CASE("kd losses: fixed points, linearity, summation") {
  const Tensor student = unit_rows(4, 6, 8);
  CHECK(kd_mse_loss({{"a", student}, {"b", student}}, student) == 0.0);

  Tensor offset = student;
  const double c = 0.5;
  for (std::size_t i = 0; i < offset.size(); ++i) offset[i] += c;
  const double three = kd_mse_loss({{"a", student}, {"b", student}, {"c", student}}, offset);
  CHECK(three == doctest::Approx(3.0 * c * c).epsilon(1e-12));

  // Teachers with individual MSEs 0.1 and 0.3 sum to 0.4.
  Tensor t1 = student, t2 = student;
  t1[0] += std::sqrt(0.1 * static_cast<double>(student.size()));
  t2[0] += std::sqrt(0.3 * static_cast<double>(student.size()));
  const double sum = kd_mse_loss({{"a", t1}, {"b", t2}}, student);
  CHECK(sum == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("kd contrastive shares the contrastive kernel") {
  const Tensor a = unit_rows(3, 5, 9);
  const Tensor b = unit_rows(3, 5, 10);
  CHECK(kd_contrastive_loss(a, b, 0.3) == clip_contrastive_loss(a, b, 0.3, false));
  const Tensor one = unit_rows(1, 5, 11);
  CHECK(kd_contrastive_loss(one, one, 0.3) == 0.0);
}

TEST_CASE("seskd: plain sum, stage-1 degenerate form") {
  CHECK(seskd_loss(0.0, 0.0) == 0.0);
  CHECK(seskd_loss(0.4, 0.6) == doctest::Approx(1.0));
  CHECK(seskd_loss(0.37, 0.0) == doctest::Approx(0.37));  // stage 1: KD alone
}

// Gradient correctness through full encoder stacks; the acceptance suite runs
// the full 20-seed sweep, this is the fast smoke version.
TEST_CASE("objective gradients through encoder stacks match finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ImageEncoder img_enc = make_image_encoder("m", 5, 6, 2, 4, 900 + seed);
    TextEncoder txt_enc = make_text_encoder("m", 8, 3, 6, 2, 4, 950 + seed);
    Rng rng(seed);
    const Tensor batch = Tensor::randn({3, 5}, rng);
    const std::vector<std::vector<std::uint32_t>> seqs{{0, 2}, {5, 7, 1}, {3}};

    // All parameters of both encoders are tracked.
    std::vector<ParamEntry> params;
    collect_params(img_enc, "m", "m", params);
    collect_params(txt_enc, "m", "m", params);
    std::unordered_set<const Tensor*> trainable;
    for (const auto& p : params) trainable.insert(p.tensor);

    Tape tape;
    Binding bind(tape, &trainable);
    const NodeId ie = encode_images(tape, bind, img_enc, batch);
    const NodeId te = encode_texts(tape, bind, txt_enc, seqs);
    const NodeId loss = clip_contrastive_node(tape, ie, te, 0.5, true);
    const GradMap gm = tape.backward(loss);

    for (const auto& p : params) {
      const Tensor fd = finite_diff_grad(
          [&](const Tensor& probe) {
            const Tensor saved = *p.tensor;
            *p.tensor = probe;
            const double v = clip_contrastive_loss(encode_images(img_enc, batch),
                                                   encode_texts(txt_enc, seqs), 0.5, true);
            *p.tensor = saved;
            return v;
          },
          *p.tensor);
      CHECK(max_rel_error(gm.at(bind.id_of(*p.tensor)), fd) <= 1e-4);
    }
  }
}
