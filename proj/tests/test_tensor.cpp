#include <cmath>

#include "doctest.h"
#include "m3bind/gradcheck.hpp"
#include "m3bind/rng.hpp"
#include "m3bind/tensor.hpp"

using namespace m3bind;

TEST_CASE("matmul: identity, hand product, shape errors") {
  Rng rng(1);
  const Tensor m = Tensor::randn({2, 2}, rng);
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  CHECK(matmul(eye, m) == m);

  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {0, 1});
  const Tensor prod = matmul(a, b);
  CHECK(prod.shape() == std::vector<std::size_t>{2, 1});
  CHECK(prod[0] == doctest::Approx(2.0));
  CHECK(prod[1] == doctest::Approx(4.0));

  const Tensor bad({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(matmul(bad, bad), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(bad, bad), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("row_l2_normalize: 3-4-5 row, idempotence, degenerate row") {
  const Tensor x({1, 2}, {3, 4});
  const Tensor n = row_l2_normalize(x);
  CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-15));

  // Unit rows pass through unchanged, and normalization is idempotent.
  Rng rng(2);
  const Tensor r = row_l2_normalize(Tensor::randn({5, 7}, rng));
  const Tensor rr = row_l2_normalize(r);
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(std::abs(rr[i] - r[i]) <= 1e-15);
  }

  const Tensor zero({1, 2}, {0, 0});
  CHECK_THROWS_WITH_AS(row_l2_normalize(zero), doctest::Contains("row 0"), NumericError);
  const Tensor zero_row1({2, 2}, {1, 0, 0, 0});
  CHECK_THROWS_WITH_AS(row_l2_normalize(zero_row1), doctest::Contains("row 1"), NumericError);
}

TEST_CASE("log_softmax_rows: symmetry, overflow stability, scalar oracle") {
  const Tensor sym({1, 2}, {0, 0});
  const Tensor ls = log_softmax_rows(sym);
  CHECK(ls[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(ls[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  const Tensor big({1, 2}, {1000, 0});
  const Tensor lb = log_softmax_rows(big);
  CHECK(lb.all_finite());
  CHECK(std::abs(lb[0]) < 1e-300);  // first entry is effectively 0

  const Tensor one({1, 2}, {1, 0});
  const Tensor lo = log_softmax_rows(one);
  const double expected0 = -std::log(1.0 + std::exp(-1.0));
  CHECK(lo[0] == doctest::Approx(expected0).epsilon(1e-14));
  CHECK(lo[1] == doctest::Approx(-1.0 + expected0).epsilon(1e-14));
}

TEST_CASE("log_softmax_rows: exp rows sum to one for magnitudes up to 1e3") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({4, 6}, rng, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= 1e3 * rng.uniform();
    const Tensor ls = log_softmax_rows(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 6; ++c) sum += std::exp(ls.at(r, c));
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("mse: identity, unit offset, hand value, shape error") {
  const Tensor a({2}, {1, 1});
  CHECK(mse(a, a).item() == 0.0);
  const Tensor zero({2}, {0, 0});
  CHECK(mse(a, zero).item() == doctest::Approx(1.0));
  const Tensor c({2}, {2, 0});
  CHECK(mse(c, zero).item() == doctest::Approx(2.0));
  const Tensor wide({3}, {0, 0, 0});
  CHECK_THROWS_AS(mse(a, wide), ShapeError);
}

TEST_CASE("finite_diff_grad: quadratic, constant, linear oracles") {
  const Tensor x3 = Tensor::scalar(3.0);
  const Tensor g = finite_diff_grad([](const Tensor& t) { return t[0] * t[0]; }, x3);
  CHECK(std::abs(g[0] - 6.0) <= 1e-8);

  Rng rng(4);
  const Tensor x = Tensor::randn({5}, rng);
  const Tensor gc = finite_diff_grad([](const Tensor&) { return 7.5; }, x);
  for (std::size_t i = 0; i < gc.size(); ++i) CHECK(gc[i] == 0.0);

  const Tensor coef = Tensor::randn({5}, rng);
  const Tensor gl = finite_diff_grad(
      [&](const Tensor& t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) acc += t[i] * coef[i];
        return acc;
      },
      x);
  for (std::size_t i = 0; i < gl.size(); ++i) CHECK(std::abs(gl[i] - coef[i]) <= 1e-9);
}

TEST_CASE("non-finite results are rejected, not propagated") {
  const Tensor big = Tensor::filled({2, 2}, 1e308);
  CHECK_THROWS_AS(add(big, big), NumericError);
  CHECK_THROWS_AS(scale(big, 10.0), NumericError);
  const Tensor ill({1, 1}, {700.0});
  CHECK_THROWS_AS(exp_ew(scale(ill, 2.0)), NumericError);
}

TEST_CASE("arithmetic is deterministic across repeated evaluation") {
  Rng rng1(99), rng2(99);
  const Tensor a1 = Tensor::randn({8, 8}, rng1);
  const Tensor a2 = Tensor::randn({8, 8}, rng2);
  CHECK(a1 == a2);
  const Tensor p1 = matmul(a1, transpose(a1));
  const Tensor p2 = matmul(a2, transpose(a2));
  CHECK(p1 == p2);
  CHECK(row_l2_normalize(p1) == row_l2_normalize(p2));
}

TEST_CASE("gather_rows and embed_mean: selection, pooling, vocab errors") {
  const Tensor table({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  const Tensor rows = gather_rows(table, {2, 0});
  CHECK(rows.at(0, 0) == 4.0);
  CHECK(rows.at(1, 1) == 1.0);
  CHECK_THROWS_AS(gather_rows(table, {4}), ValueError);

  // Pooled vector equals the row mean of the selected embeddings.
  const Tensor pooled = embed_mean(table, {{0, 1}});
  CHECK(pooled.at(0, 0) == doctest::Approx(1.0));
  CHECK(pooled.at(0, 1) == doctest::Approx(2.0));
  CHECK_THROWS_AS(embed_mean(table, {{}}), ValueError);
  CHECK_THROWS_AS(embed_mean(table, {{9}}), ValueError);
}
