#include <cmath>

#include "doctest.h"
#include "m3bind/balancing.hpp"

using namespace m3bind;

TEST_CASE("sampling probabilities: uniform cases and the worked 2/3-1/3 example") {
  const auto uniform = sampling_probs({{{"a", 50}, {"b", 50}, {"c", 50}}, 1.3, 2e-5});
  for (const auto& [id, p] : uniform) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // beta = 0 ignores sizes entirely.
  const auto beta0 = sampling_probs({{{"a", 10}, {"b", 100000}}, 0.0, 2e-5});
  CHECK(beta0.at("a") == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(beta0.at("b") == doctest::Approx(0.5).epsilon(1e-12));

  const auto probs = sampling_probs({{{"a", 100}, {"b", 400}}, 0.5, 2e-5});
  CHECK(probs.at("a") == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(probs.at("b") == doctest::Approx(1.0 / 3).epsilon(1e-12));

  CHECK_THROWS_AS(sampling_probs({{}, 0.5, 2e-5}), ValueError);
}

TEST_CASE("learning-rate scaling: base case, worked value, sqrt law") {
  CHECK(scaled_lr({{{"a", 1}}, 0.5, 2e-5}).at("a") == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(scaled_lr({{{"a", 10000}}, 0.5, 2e-5}).at("a") == doctest::Approx(2e-7).epsilon(1e-12));
  const auto lrs = scaled_lr({{{"a", 500}, {"b", 2000}}, 0.5, 3e-4});
  CHECK(lrs.at("a") == doctest::Approx(2.0 * lrs.at("b")).epsilon(1e-12));
}

TEST_CASE("loss weights: worked values and size ratio") {
  CHECK(loss_weight({{{"a", 4}}, 0.5, 2e-5}).at("a") == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(loss_weight({{{"a", 1}}, 0.5, 2e-5}).at("a") == doctest::Approx(1.0).epsilon(1e-12));
  const auto w = loss_weight({{{"a", 100}, {"b", 400}}, 0.5, 2e-5});
  CHECK(w.at("a") / w.at("b") == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("probabilities sum to one for extreme sizes and beta in [0,2]") {
  for (double beta : {0.0, 0.25, 0.5, 1.0, 2.0}) {
    const auto probs = sampling_probs(
        {{{"a", 1}, {"b", 1000}, {"c", 1000000}, {"d", 1000000000}}, beta, 2e-5});
    double total = 0.0;
    for (const auto& [id, p] : probs) total += p;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("monotonicity: smaller corpora get larger p, lr and weight") {
  const ModalityStats stats{{{"small", 100}, {"large", 900}}, 0.5, 2e-5};
  const auto p = sampling_probs(stats);
  const auto lr = scaled_lr(stats);
  const auto w = loss_weight(stats);
  CHECK(p.at("small") > p.at("large"));
  CHECK(lr.at("small") > lr.at("large"));
  CHECK(w.at("small") > w.at("large"));
}

TEST_CASE("balancing off: natural sampling, flat rates, unit weights") {
  const ModalityStats stats{{{"a", 100}, {"b", 300}}, 0.5, 2e-5};
  const BalancePlan plan = make_balance_plan(stats, false);
  CHECK(plan.probs.at("a") == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(plan.probs.at("b") == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(plan.lrs.at("a") == 2e-5);
  CHECK(plan.lrs.at("b") == 2e-5);
  CHECK(plan.weights.at("a") == 1.0);
  CHECK(plan.weights.at("b") == 1.0);
}

TEST_CASE("draw_modality: degenerate, frequency and determinism checks") {
  const BalancePlan single = make_balance_plan({{{"only", 7}}, 0.5, 2e-5}, true);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(draw_modality(single, rng) == "only");

  const BalancePlan plan = make_balance_plan({{{"a", 100}, {"b", 400}}, 0.5, 2e-5}, true);
  Rng rng2(2);
  int count_a = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    if (draw_modality(plan, rng2) == "a") ++count_a;
  }
  CHECK(std::abs(static_cast<double>(count_a) / n - 2.0 / 3) <= 0.01);

  Rng r1(42), r2(42);
  for (int i = 0; i < 1000; ++i) CHECK(draw_modality(plan, r1) == draw_modality(plan, r2));
}

TEST_CASE("draw_modality: chi-square against the plan passes at p > 0.01") {
  // Critical values of chi-square at p = 0.01, df = 1..6.
  const double crit[] = {6.6349, 9.2103, 11.3449, 13.2767, 15.0863, 16.8119};
  const ModalityStats stats{
      {{"xray", 4000}, {"ct", 1500}, {"retina", 800}, {"ecg", 400}, {"path", 2000}}, 0.5, 2e-5};
  const BalancePlan plan = make_balance_plan(stats, true);
  Rng rng(7);
  std::map<std::string, int> counts;
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[draw_modality(plan, rng)]++;
  double chi2 = 0.0;
  for (const auto& [id, p] : plan.probs) {
    const double expected = p * n;
    const double diff = counts[id] - expected;
    chi2 += diff * diff / expected;
  }
  CHECK(chi2 < crit[plan.probs.size() - 2]);
}
