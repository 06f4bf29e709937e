#include <cmath>

#include "doctest.h"
#include "m3bind/gradcheck.hpp"
#include "m3bind/tape.hpp"

using namespace m3bind;

TEST_CASE("backward: mean-squared toward zero gives grad equal to the weights") {
  Tape tape;
  const NodeId w = tape.input(Tensor({2}, {1, 2}));
  const NodeId zero = tape.constant(Tensor({2}, {0, 0}));
  const NodeId loss = tape.mse(w, zero);
  const GradMap gm = tape.backward(loss);
  CHECK(gm.at(w)[0] == doctest::Approx(1.0));
  CHECK(gm.at(w)[1] == doctest::Approx(2.0));
}

TEST_CASE("backward: parameters the loss never touches get a zero gradient") {
  Tape tape;
  const NodeId used = tape.input(Tensor({2}, {1, 1}));
  const NodeId unused = tape.input(Tensor({3}, {5, 5, 5}));
  const NodeId loss = tape.reduce_sum(used);
  const GradMap gm = tape.backward(loss);
  CHECK(gm.has(unused));
  for (std::size_t i = 0; i < 3; ++i) CHECK(gm.at(unused)[i] == 0.0);
}

TEST_CASE("backward: gradient of a sum of sub-losses is the sum of gradients") {
  Rng rng(11);
  const Tensor x = Tensor::randn({3}, rng);
  const Tensor t1 = Tensor::randn({3}, rng);
  const Tensor t2 = Tensor::randn({3}, rng);

  auto grad_of = [&](bool first, bool second) {
    Tape tape;
    const NodeId xi = tape.input(x);
    NodeId loss = Tape::kNone;
    if (first) loss = tape.mse(xi, tape.constant(t1));
    if (second) {
      const NodeId l2 = tape.mse(xi, tape.constant(t2));
      loss = (loss == Tape::kNone) ? l2 : tape.add(loss, l2);
    }
    return tape.backward(loss).at(xi);
  };

  const Tensor g1 = grad_of(true, false);
  const Tensor g2 = grad_of(false, true);
  const Tensor g12 = grad_of(true, true);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g12[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward: empty tape is a no-op, non-scalar loss is rejected") {
  Tape tape;
  const GradMap gm = tape.backward(0);
  CHECK(gm.size() == 0);

  Tape tape2;
  const NodeId vec = tape2.input(Tensor({3}, {1, 2, 3}));
  CHECK_THROWS_AS(tape2.backward(vec), ShapeError);
}

TEST_CASE("tape: node ids are topologically ordered by construction") {
  Tape tape;
  const NodeId a = tape.input(Tensor({2}, {1, 2}));
  const NodeId b = tape.constant(Tensor({2}, {3, 4}));
  const NodeId c = tape.add(a, b);
  const NodeId d = tape.mul(c, c);
  CHECK(a < c);
  CHECK(b < c);
  CHECK(c < d);
  CHECK_THROWS_AS(tape.add(a, 99), ValueError);
}

TEST_CASE("tape forward values match the plain kernels bitwise") {
  Rng rng(12);
  const Tensor x = Tensor::randn({4, 5}, rng);
  const Tensor w = Tensor::randn({5, 3}, rng);
  const Tensor b = Tensor::randn({3}, rng, 0.1);

  Tape tape;
  const NodeId xi = tape.constant(x);
  const NodeId out =
      tape.row_l2_normalize(tape.tanh(tape.add_bias(tape.matmul(xi, tape.constant(w)), tape.constant(b))));
  const Tensor plain = row_l2_normalize(tanh_ew(add_bias(matmul(x, w), b)));
  CHECK(tape.value(out) == plain);
}

TEST_CASE("every primitive's backward matches central finite differences") {
  Rng rng(13);
  const double kTol = 1e-6;

  auto check = [&](auto build_tape, auto eval_plain, const Tensor& x) {
    Tape tape;
    const NodeId xi = tape.input(x);
    const NodeId loss = build_tape(tape, xi);
    const GradMap gm = tape.backward(loss);
    const Tensor fd = finite_diff_grad(eval_plain, x);
    CHECK(max_rel_error(gm.at(xi), fd) <= kTol);
  };

  const Tensor m = Tensor::randn({3, 4}, rng);
  const Tensor other = Tensor::randn({3, 4}, rng);
  const Tensor sq = Tensor::randn({3, 3}, rng);
  const Tensor w = Tensor::randn({4, 3}, rng);
  const Tensor bias = Tensor::randn({3}, rng, 0.2);

  check([&](Tape& t, NodeId x) { return t.reduce_sum(t.tanh(x)); },
        [&](const Tensor& x) { return reduce_sum(tanh_ew(x)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_mean(t.exp(x)); },
        [&](const Tensor& x) { return reduce_mean(exp_ew(x)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_sum(t.mul(x, t.constant(other))); },
        [&](const Tensor& x) { return reduce_sum(mul(x, other)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_sum(t.sub(t.scale(x, 1.7), t.constant(other))); },
        [&](const Tensor& x) { return reduce_sum(sub(scale(x, 1.7), other)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_mean(t.matmul(x, t.constant(w))); },
        [&](const Tensor& x) { return reduce_mean(matmul(x, w)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_mean(t.add_bias(t.transpose(x), t.constant(bias))); },
        [&](const Tensor& x) { return reduce_mean(add_bias(transpose(x), bias)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_sum(t.row_l2_normalize(x)); },
        [&](const Tensor& x) { return reduce_sum(row_l2_normalize(x)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.reduce_mean(t.log_softmax_rows(x)); },
        [&](const Tensor& x) { return reduce_mean(log_softmax_rows(x)).item(); }, m);
  check([&](Tape& t, NodeId x) { return t.sum_diag(t.log_softmax_rows(x)); },
        [&](const Tensor& x) { return sum_diag(log_softmax_rows(x)).item(); }, sq);
  check([&](Tape& t, NodeId x) { return t.mse(x, t.constant(other)); },
        [&](const Tensor& x) { return mse(x, other).item(); }, m);

  // Table-indexed primitives: gradient flows into the table.
  const Tensor table = Tensor::randn({5, 3}, rng);
  const std::vector<std::vector<std::uint32_t>> seqs{{0, 2, 2}, {4}, {1, 3}};
  check([&](Tape& t, NodeId x) { return t.reduce_sum(t.embed_mean(x, seqs)); },
        [&](const Tensor& x) { return reduce_sum(embed_mean(x, seqs)).item(); }, table);
  check([&](Tape& t, NodeId x) { return t.reduce_mean(t.gather_rows(x, {1, 1, 4})); },
        [&](const Tensor& x) { return reduce_mean(gather_rows(x, {1, 1, 4})).item(); }, table);

  // Scalar-node multiply: gradient reaches both the tensor and the scalar.
  {
    Tape tape;
    const NodeId xi = tape.input(m);
    const NodeId s = tape.input(Tensor::scalar(0.7));
    const NodeId loss = tape.reduce_sum(tape.mul_scalar_node(xi, s));
    const GradMap gm = tape.backward(loss);
    const Tensor fd_x = finite_diff_grad(
        [&](const Tensor& x) { return reduce_sum(scale(x, 0.7)).item(); }, m);
    CHECK(max_rel_error(gm.at(xi), fd_x) <= kTol);
    const Tensor fd_s = finite_diff_grad(
        [&](const Tensor& sv) { return reduce_sum(scale(m, sv[0])).item(); }, Tensor::scalar(0.7));
    CHECK(max_rel_error(gm.at(s), fd_s) <= kTol);
  }
}
