#include <cmath>

#include "doctest.h"
#include "fptrans/errors.hpp"
#include "fptrans/objective.hpp"
#include "fptrans/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fptrans;
using namespace fptrans::objective;
using testutil::randn;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double p_of(std::vector<double> sims, double tau) {
  const auto n = sims.size();
  return probability_from_similarities(Tensor::from_data({1, n}, std::move(sims)), tau).item();
}

model::ProxySet proxies_from(const Tensor& stacked) {
  model::ProxySet p;
  p.foreground = ops::reshape(ops::slice(stacked, 0, 0, 1), {stacked.dim(1)});
  for (std::size_t n = 1; n < stacked.dim(0); ++n) {
    p.background.push_back(ops::reshape(ops::slice(stacked, 0, n, 1), {stacked.dim(1)}));
  }
  return p;
}

}  // namespace

TEST_CASE("foreground probability") {
  SUBCASE("hand value") { CHECK(p_of({1, -1, -1}, 1.0) == doctest::Approx(0.880797).epsilon(1e-6)); }
  SUBCASE("tie with the strongest background is one half") {
    CHECK(p_of({0.3, -0.2, 0.3}, 0.1) == 0.5);
    CHECK(p_of({0.3, 0.3}, 0.7) == 0.5);
  }
  SUBCASE("single background proxy matches the two-way closed form") {
    const double sf = 0.4, sn = -0.1, tau = 0.2;
    CHECK(p_of({sf, sn}, tau) == doctest::Approx(std::exp(sf / tau) / (std::exp(sf / tau) + std::exp(sn / tau))));
  }
  SUBCASE("only the strongest background proxy matters") {
    CHECK(p_of({0.2, 0.5, -0.9, 0.1}, 0.1) == doctest::Approx(p_of({0.2, 0.5}, 0.1)).epsilon(1e-15));
  }
  SUBCASE("no background proxy is a sigmoid of the foreground similarity") {
    CHECK(p_of({0.5}, 0.25) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
  }
  SUBCASE("finite at extreme logits") {
    for (double s : {1e3, -1e3}) {
      const double p = p_of({s, -s}, 0.1);
      CHECK(std::isfinite(p));
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
    auto g = Tensor::from_data({1, 2}, {1e3, -1e3}, true);
    auto p = probability_from_similarities(g, 0.1);
    ops::sum(p).backward();
    for (double v : g.grad()) CHECK(std::isfinite(v));
  }
  SUBCASE("monotone in both similarities") {
    double prev = 0;
    for (double sf = -1; sf <= 1; sf += 0.1) {
      const double p = p_of({sf, 0.1, -0.3}, 0.1);
      CHECK(p > prev);
      prev = p;
    }
    prev = 1;
    for (double sn = -1; sn <= 1; sn += 0.1) {
      const double p = p_of({0.2, sn, -2.0}, 0.1);
      CHECK(p < prev);
      prev = p;
    }
  }
  SUBCASE("gradient routes to the first maximal background column") {
    auto s = Tensor::from_data({1, 3}, {0.1, 0.4, 0.4}, true);
    ops::sum(probability_from_similarities(s, 0.5)).backward();
    CHECK(s.grad()[1] != 0.0);
    CHECK(s.grad()[2] == 0.0);
  }
  SUBCASE("matches cosine similarities of features and proxies") {
    auto f = randn({5, 4}, 1, 1.0, false);
    auto stacked = randn({3, 4}, 2, 1.0, false);
    auto p = foreground_probability(f, proxies_from(stacked), 0.1);
    auto fv = values(f), sv = values(stacked);
    for (std::size_t i = 0; i < 5; ++i) {
      const double sf = oracle::cosine(&fv[i * 4], &sv[0], 4);
      const double sn = std::max(oracle::cosine(&fv[i * 4], &sv[4], 4), oracle::cosine(&fv[i * 4], &sv[8], 4));
      CHECK(p.data()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-(sf - sn) / 0.1))).epsilon(1e-12));
    }
  }
}

TEST_CASE("binary cross-entropy and classification loss") {
  SUBCASE("one half everywhere is ln 2") {
    const std::vector<double> y{1, 0, 1, 1};
    CHECK(binary_cross_entropy(Tensor::full({4}, 0.5), y).item() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("exact predictions cost only the clamp floor") {
    const std::vector<double> y{1, 0};
    const double loss = binary_cross_entropy(Tensor::from_data({2}, {1.0, 0.0}), y).item();
    CHECK(loss >= 0.0);
    CHECK(loss <= -std::log(1.0 - kProbabilityClamp) + 1e-15);
  }
  SUBCASE("certain mistakes are bounded by the clamp") {
    const std::vector<double> y{0};
    CHECK(binary_cross_entropy(Tensor::full({1}, 1.0), y).item() == doctest::Approx(-std::log(kProbabilityClamp)));
  }
  SUBCASE("classification loss on equal similarities is ln 2") {
    auto f = Tensor::full({2, 2, 3}, 1.0);
    auto proxies = proxies_from(Tensor::full({2, 3}, 2.0));
    Mask y(2, 2);
    y.values = {1, 0, 0, 1};
    CHECK(classification_loss(f, proxies, y, 0.1).item() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("gradient check through the probability and cosine") {
    auto f = randn({2, 3, 4}, 3);
    auto stacked = randn({3, 4}, 4);
    Mask y(2, 3);
    y.values = {1, 0, 0, 1, 1, 0};
    auto loss = [&] { return classification_loss(f, proxies_from(stacked), y, 0.5); };
    CHECK(testutil::gradient_error(loss, {f, stacked}) <= 1e-5);
  }
}

TEST_CASE("pairwise loss") {
  SUBCASE("identical foreground features cost -ln sigmoid(10)") {
    auto f = Tensor::full({2, 2, 3}, 0.7);
    const Tensor supports[] = {f};
    const Mask ys[] = {Mask(2, 2, 1)};
    const double want = -std::log(1.0 / (1.0 + std::exp(-10.0)));
    CHECK(pairwise_loss(f, supports, Mask(2, 2, 1), ys, 0.1).item() == doctest::Approx(want).epsilon(1e-9));
    CHECK(want == doctest::Approx(4.54e-5).epsilon(1e-3));
  }
  SUBCASE("orthogonal foreground-background pair is ln 2") {
    auto q = Tensor::from_data({1, 1, 2}, {1, 0});
    const Tensor supports[] = {Tensor::from_data({1, 1, 2}, {0, 1})};
    const Mask ys[] = {Mask(1, 1, 0)};
    CHECK(pairwise_loss(q, supports, Mask(1, 1, 1), ys, 0.1).item() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("background pairs are excluded") {
    // Adding a bg-bg pair with an arbitrary similarity leaves the mean unchanged.
    auto q = Tensor::from_data({1, 2, 2}, {1, 0, 0.3, 0.8});
    const Tensor supports[] = {Tensor::from_data({1, 2, 2}, {0, 1, -0.5, 0.2})};
    Mask qy(1, 2), sy(1, 2);
    qy.values = {1, 0};
    sy.values = {0, 0};
    const Mask ys[] = {sy};
    // Only (q0, s0) and (q0, s1) qualify.
    auto qv = values(q), sv = values(supports[0]);
    std::vector<double> q0(qv.begin(), qv.begin() + 2);
    const double expect = oracle::pairwise_loss(q0, {1}, sv, {0, 0}, 2, 0.1);
    CHECK(pairwise_loss(q, supports, qy, ys, 0.1).item() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("no foreground anywhere is an invalid episode") {
    auto f = randn({2, 2, 3}, 5, 1.0, false);
    const Tensor supports[] = {f};
    const Mask ys[] = {Mask(2, 2, 0)};
    CHECK_THROWS_AS(pairwise_loss(f, supports, Mask(2, 2, 0), ys, 0.1), EpisodeInvalid);
  }
  SUBCASE("brute-force double loop on 4x4 maps") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      auto q = randn({4, 4, 6}, 10 + seed, 1.0, false), s = randn({4, 4, 6}, 50 + seed, 1.0, false);
      auto qy = oracle::random_mask(4, 4, 0.3, rng), sy = oracle::random_mask(4, 4, 0.3, rng);
      if (qy.count() + sy.count() == 0) qy.values[0] = 1;
      const Tensor supports[] = {s};
      const Mask ys[] = {sy};
      const double got = pairwise_loss(q, supports, qy, ys, 0.1).item();
      CHECK(std::abs(got - oracle::pairwise_loss(values(q), qy.values, values(s), sy.values, 6, 0.1)) <= 1e-10);
    }
  }
  SUBCASE("shots are pooled") {
    auto q = randn({2, 2, 3}, 20, 1.0, false);
    auto s1 = randn({2, 2, 3}, 21, 1.0, false), s2 = randn({2, 2, 3}, 22, 1.0, false);
    Mask qy(2, 2), y1(2, 2), y2(2, 2);
    qy.values = {1, 0, 0, 0};
    y1.values = {0, 1, 1, 0};
    y2.values = {0, 0, 0, 0};
    const Tensor supports[] = {s1, s2};
    const Mask ys[] = {y1, y2};
    // Stack the shots side by side: the pooled pair set is the same.
    auto sv = values(s1), s2v = values(s2);
    sv.insert(sv.end(), s2v.begin(), s2v.end());
    std::vector<std::uint8_t> syv = y1.values;
    syv.insert(syv.end(), y2.values.begin(), y2.values.end());
    const double expect = oracle::pairwise_loss(values(q), qy.values, sv, syv, 3, 0.1);
    CHECK(pairwise_loss(q, supports, qy, ys, 0.1).item() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("subsampling is deterministic and uses at most the limit") {
    auto q = randn({4, 4, 3}, 30, 1.0, false), s = randn({4, 4, 3}, 31, 1.0, false);
    const Tensor supports[] = {s};
    const Mask ys[] = {Mask(4, 4, 1)};
    Rng a(1), b(1), c(2);
    const double x = pairwise_loss(q, supports, Mask(4, 4, 1), ys, 0.1, 10, &a).item();
    CHECK(x == pairwise_loss(q, supports, Mask(4, 4, 1), ys, 0.1, 10, &b).item());
    CHECK(x != pairwise_loss(q, supports, Mask(4, 4, 1), ys, 0.1, 10, &c).item());
    Rng d(1);
    CHECK(pairwise_loss(q, supports, Mask(4, 4, 1), ys, 0.1, 256, &d).item() ==
          doctest::Approx(pairwise_loss(q, supports, Mask(4, 4, 1), ys, 0.1).item()).epsilon(1e-14));
  }
  SUBCASE("gradient check") {
    auto q = randn({2, 2, 3}, 40), s = randn({2, 2, 3}, 41);
    Mask qy(2, 2), sy(2, 2);
    qy.values = {1, 1, 0, 0};
    sy.values = {0, 1, 0, 1};
    const Tensor supports[] = {s};
    const Mask ys[] = {sy};
    CHECK(testutil::gradient_error([&] { return pairwise_loss(q, supports, qy, ys, 0.5); }, {q, s}) <= 1e-5);
  }
}

TEST_CASE("total loss") {
  auto one = Tensor::full({}, 1.0);
  CHECK(total_loss(one, one, one, 2e-2).item() == doctest::Approx(2.02).epsilon(1e-15));
  CHECK(total_loss(one, one, Tensor::full({}, 7.0), 0.0).item() == 2.0);
  const double a = total_loss(one, one, Tensor::full({}, 3.0), 0.1).item() - 2.0;
  const double b = total_loss(one, one, Tensor::full({}, 3.0), 0.2).item() - 2.0;
  CHECK(b == doctest::Approx(2 * a));
  SUBCASE("non-finite components are named") {
    try {
      total_loss(one, Tensor::full({}, std::nan("")), one, 0.1);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("ce_prompt") != std::string::npos);
    }
    CHECK_THROWS_AS(total_loss(one, one, Tensor::full({}, INFINITY), 0.1), DivergenceError);
  }
}

TEST_CASE("mask prediction") {
  auto f = randn({4, 4, 5}, 60, 1.0, false);
  auto stacked = randn({3, 5}, 61, 1.0, false);
  auto proxies = proxies_from(stacked);
  SUBCASE("probabilities lie strictly inside (0, 1)") {
    const auto map = probability_map(f, proxies, 0.1);
    for (double v : map.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  SUBCASE("deterministic") { CHECK(predict_mask(f, proxies, 0.1, 16, 16) == predict_mask(f, proxies, 0.1, 16, 16)); }
  SUBCASE("common positive rescaling leaves the mask unchanged") {
    auto m = predict_mask(f, proxies, 0.1, 16, 16);
    for (double k : {1e-3, 0.5, 3.0, 1e3}) {
      CHECK(predict_mask(ops::scale(f, k), proxies_from(ops::scale(stacked, k)), 0.1, 16, 16) == m);
    }
  }
  SUBCASE("threshold is strict and follows the upsampled map") {
    auto map = probability_map(f, proxies, 0.1);
    auto up = ops::bilinear_resize(ops::reshape(map, {4, 4, 1}), 16, 16);
    auto m = predict_mask(f, proxies, 0.1, 16, 16);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(m.values[i] == (up.data()[i] > 0.5 ? 1 : 0));
  }
  SUBCASE("ties go to background") {
    auto flat = Tensor::full({2, 2, 5}, 1.0);
    auto tie = proxies_from(Tensor::full({2, 5}, 1.0));
    CHECK(predict_mask(flat, tie, 0.1, 4, 4).count() == 0);
  }
  SUBCASE("proxies from the query's own labels separate a clean map") {
    std::vector<double> v(4 * 4 * 2);
    Mask y(4, 4);
    for (std::size_t i = 0; i < 16; ++i) {
      y.values[i] = (i % 4) < 2 ? 1 : 0;
      v[2 * i] = y.values[i] ? 1.0 : 0.1;
      v[2 * i + 1] = y.values[i] ? 0.1 : 1.0;
    }
    auto g = Tensor::from_data({4, 4, 2}, v);
    model::ProxySet own;
    own.foreground = prompting::masked_mean(ops::reshape(g, {16, 2}), y);
    Mask bg = y;
    for (auto& b : bg.values) b = 1 - b;
    own.background.push_back(prompting::masked_mean(ops::reshape(g, {16, 2}), bg));
    CHECK(predict_mask(g, own, 0.1, 4, 4) == y);
  }
}
