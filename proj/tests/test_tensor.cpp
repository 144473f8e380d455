#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fptrans/errors.hpp"
#include "fptrans/ops.hpp"
#include "test_util.hpp"

using namespace fptrans;
using testutil::gradient_error;
using testutil::leaf;
using testutil::randn;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("tensor construction checks shape and length") {
  auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
  CHECK(Tensor::scalar(3.5).rank() == 0);
  CHECK(Tensor::scalar(3.5).item() == 3.5);
}

TEST_CASE("grad is populated only for participating leaves that require it") {
  auto a = leaf({2}, {1, 2});
  auto b = leaf({2}, {3, 4});
  auto unused = leaf({2}, {5, 6});
  auto constant = Tensor::from_data({2}, {1, 1});
  ops::sum(ops::mul(ops::add(a, constant), b)).backward();
  CHECK(a.has_grad());
  CHECK(b.has_grad());
  CHECK_FALSE(unused.has_grad());
  CHECK_FALSE(constant.has_grad());
  CHECK(values(a.grad_tensor()) == std::vector<double>{3, 4});
  CHECK(values(b.grad_tensor()) == std::vector<double>{2, 3});
}

TEST_CASE("no-grad guard records nothing") {
  auto a = leaf({2}, {1, 2});
  Tensor y;
  {
    NoGradGuard guard;
    y = ops::sum(ops::mul(a, a));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_mode_enabled());
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    auto m = randn({2, 2}, 1);
    auto i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(values(ops::matmul(i2, m)) == values(m));
  }
  SUBCASE("hand example") {
    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from_data({2, 1}, {1, 1});
    auto c = ops::matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(values(c) == std::vector<double>{3, 7});
  }
  SUBCASE("annihilation") {
    auto z = Tensor::zeros({3, 2});
    const auto out = ops::matmul(z, randn({2, 4}, 2));
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("mismatch names both shapes") {
    try {
      ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
    }
  }
  SUBCASE("gradient") {
    auto a = randn({3, 4}, 3), b = randn({4, 2}, 4);
    CHECK(gradient_error([&] { return ops::sum(ops::matmul(a, b)); }, {a, b}) <= 1e-4);
  }
}

TEST_CASE("softmax") {
  SUBCASE("uniform") {
    const auto out = ops::softmax(Tensor::full({5}, 0.3), 0);
    for (double v : out.data()) CHECK(v == doctest::Approx(0.2));
  }
  SUBCASE("[0, ln 2] -> [1/3, 2/3]") {
    auto s = ops::softmax(Tensor::from_data({2}, {0.0, std::log(2.0)}), 0);
    CHECK(s[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("shift invariance") {
    auto x = randn({3, 4}, 5);
    auto a = ops::softmax(x, 1), b = ops::softmax(ops::add_scalar(x, 7.5), 1);
    testutil::check_close(a.data(), b.data(), 1e-12);
  }
  SUBCASE("rows sum to one for |x| <= 50") {
    auto x = ops::scale(ops::clamp(randn({20, 9}, 6, 30.0, false), -50, 50), 1.0);
    for (std::size_t axis : {0u, 1u}) {
      auto s = ops::sum_axis(ops::softmax(x, axis), axis);
      const auto out = s;
      for (double v : out.data()) CHECK(std::abs(v - 1.0) <= 1e-9);
    }
  }
  SUBCASE("finite-difference Jacobian of the first output at zero") {
    auto x = Tensor::from_data({2}, {0.0, 0.0}, true);
    auto g = finite_difference_gradient([](const Tensor& t) { return ops::softmax(t, 0)[0]; }, x);
    CHECK(g[0] == doctest::Approx(0.25).epsilon(1e-8));
    CHECK(g[1] == doctest::Approx(-0.25).epsilon(1e-8));
  }
}

TEST_CASE("layer norm") {
  auto ones = Tensor::full({4}, 1.0), zeros = Tensor::zeros({4});
  SUBCASE("constant token maps to zeros") {
    const auto out = ops::layer_norm(Tensor::full({2, 4}, 3.0), ones, zeros);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("output mean is beta and std is |gamma|") {
    auto x = randn({3, 16}, 7, 4.0, false);
    auto y = ops::layer_norm(x, Tensor::full({16}, -2.0), Tensor::full({16}, 0.5));
    for (std::size_t r = 0; r < 3; ++r) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < 16; ++j) mu += y.at(r, j) / 16;
      for (std::size_t j = 0; j < 16; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu) / 16;
      CHECK(mu == doctest::Approx(0.5).epsilon(1e-9));
      CHECK(std::sqrt(var) == doctest::Approx(2.0).epsilon(1e-6));
    }
  }
  SUBCASE("gradient within 1e-5") {
    auto x = randn({3, 4}, 8), g = randn({4}, 9), b = randn({4}, 10);
    auto w = randn({3, 4}, 11, 1.0, false);
    CHECK(gradient_error([&] { return ops::sum(ops::mul(ops::layer_norm(x, g, b), w)); }, {x, g, b}) <= 1e-5);
  }
}

TEST_CASE("cosine similarity") {
  auto v = Tensor::from_data({3}, {0.3, -1.2, 2.0});
  CHECK(ops::cosine_similarity(v, v).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ops::cosine_similarity(v, ops::neg(v)).item() == doctest::Approx(-1.0).epsilon(1e-12));
  auto a = Tensor::from_data({2}, {1, 0}), b = Tensor::from_data({2}, {1, 1});
  CHECK(ops::cosine_similarity(a, b).item() == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(ops::cosine_similarity(Tensor::zeros({2}), b).item() == 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double c = ops::cosine_similarity(randn({5}, seed), randn({5}, seed + 100)).item();
    CHECK(std::abs(c) <= 1.0 + 1e-12);
  }
}

TEST_CASE("finite differences") {
  SUBCASE("squared norm gives 2x") {
    auto x = randn({6}, 12);
    auto g = finite_difference_gradient([](const Tensor& t) { return ops::sum(ops::mul(t, t)).item(); }, x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(g[i] - 2 * x[i]) <= 1e-6);
  }
  SUBCASE("constant gives zeros") {
    auto x = randn({4}, 13);
    const auto out = finite_difference_gradient([](const Tensor&) { return 3.0; }, x);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("buffer restored exactly") {
    auto x = randn({4}, 14);
    const auto before = values(x);
    finite_difference_gradient([](const Tensor& t) { return std::sin(t[0]) * t[3]; }, x);
    CHECK(values(x) == before);
  }
}

TEST_CASE("max over an axis routes the gradient to the lowest-index argmax") {
  auto x = leaf({2, 3}, {1, 5, 5, 7, 2, 7});
  auto m = ops::max_axis(x, 1);
  CHECK(values(m) == std::vector<double>{5, 7});
  ops::sum(m).backward();
  CHECK(values(x.grad_tensor()) == std::vector<double>{0, 1, 0, 1, 0, 0});
}

TEST_CASE("a tensor feeding two consumers accumulates both gradients") {
  auto x = randn({3}, 15);
  auto f = [&] { return ops::sum(ops::add(ops::mul(x, x), ops::exp(x))); };
  CHECK(gradient_error(f, {x}) <= 1e-6);
  x.zero_grad();
  f().backward();
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x[i] + std::exp(x[i])));
}

TEST_CASE("elementwise and reduction kernels pass gradient checks at five seeds") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CAPTURE(seed);
    auto a = randn({3, 4}, 100 + seed), b = randn({3, 4}, 200 + seed);
    auto w = randn({3, 4}, 300 + seed, 1.0, false);
    auto weighted = [&](const Tensor& t) { return ops::sum(ops::mul(t, w)); };
    CHECK(gradient_error([&] { return weighted(ops::add(a, b)); }, {a, b}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::sub(a, b)); }, {a, b}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::mul(a, b)); }, {a, b}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::relu(a)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::gelu(a)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::sigmoid(a)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::exp(a)); }, {a}) <= 1e-4);
    auto pos = leaf({3, 4}, values(ops::add_scalar(ops::exp(a.detach()), 0.1)));
    CHECK(gradient_error([&] { return weighted(ops::log(pos)); }, {pos}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::softmax(a, 1)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::softmax(a, 0)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return ops::mean(ops::mul(a, b)); }, {a, b}) <= 1e-4);
    CHECK(gradient_error([&] { return ops::sum(ops::mul(ops::mean_axis(a, 0), ops::sum_axis(b, 0))); }, {a, b}) <= 1e-4);
    CHECK(gradient_error([&] { return ops::sum(ops::max_axis(a, 1)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::reshape(ops::transpose(ops::reshape(a, {4, 3})), {3, 4})); }, {a}) <=
          1e-4);
    auto v = randn({4}, 400 + seed);
    CHECK(gradient_error([&] { return weighted(ops::add_row_vector(a, v)); }, {a, v}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::repeat_rows(v, 3)); }, {v}) <= 1e-4);
    auto lw = randn({4, 4}, 500 + seed);
    CHECK(gradient_error([&] { return weighted(ops::linear(a, lw, v)); }, {a, lw, v}) <= 1e-4);
    CHECK(gradient_error([&] { return ops::sum(ops::cosine_matrix(a, b)); }, {a, b}) <= 1e-4);
    CHECK(gradient_error([&] { return weighted(ops::row_normalize(a)); }, {a}) <= 1e-4);
    CHECK(gradient_error([&] { return ops::cosine_similarity(ops::reshape(ops::slice(a, 0, 0, 1), {4}), v); }, {a, v}) <=
          1e-4);
  }
}

TEST_CASE("concat, split, slice and gather") {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 1}, {5, 6});
  const Tensor parts[] = {a, b};
  auto c = ops::concat(parts, 1);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(values(c) == std::vector<double>{1, 2, 5, 3, 4, 6});
  const std::size_t sizes[] = {2, 1};
  auto back = ops::split(c, 1, sizes);
  CHECK(values(back[0]) == values(a));
  CHECK(values(back[1]) == values(b));
  CHECK(values(ops::slice(c, 0, 1, 1)) == std::vector<double>{3, 4, 6});
  const std::size_t idx[] = {5, 0, 5};
  CHECK(values(ops::gather(c, idx)) == std::vector<double>{6, 1, 6});

  auto x = randn({3, 2}, 16), y = randn({1, 2}, 17);
  auto w = randn({4, 2}, 18, 1.0, false);
  CHECK(gradient_error(
            [&] {
              const Tensor ps[] = {x, y};
              return ops::sum(ops::mul(ops::concat(ps, 0), w));
            },
            {x, y}) <= 1e-4);
  auto z = randn({2, 5}, 19);
  CHECK(gradient_error(
            [&] {
              const std::size_t s[] = {2, 3};
              auto pieces = ops::split(z, 1, s);
              return ops::add(ops::sum(ops::mul(pieces[0], pieces[0])), ops::sum(ops::exp(pieces[1])));
            },
            {z}) <= 1e-4);
  CHECK(gradient_error([&] { return ops::sum(ops::exp(ops::gather(z, idx))); }, {z}) <= 1e-4);
}

TEST_CASE("bilinear resize") {
  SUBCASE("same size is the identity") {
    auto x = randn({3, 4, 2}, 20, 1.0, false);
    CHECK(values(ops::bilinear_resize(x, 3, 4)) == values(x));
  }
  SUBCASE("constant stays constant") {
    const auto out = ops::bilinear_resize(Tensor::full({2, 2, 3}, 1.5), 5, 7);
    for (double v : out.data()) {
      CHECK(v == doctest::Approx(1.5).epsilon(1e-12));
    }
  }
  SUBCASE("2x upsampling of a 1x2 ramp (half-pixel centres)") {
    auto x = Tensor::from_data({1, 2, 1}, {0.0, 1.0});
    auto y = ops::bilinear_resize(x, 1, 4);
    CHECK(values(y) == std::vector<double>{0.0, 0.25, 0.75, 1.0});
  }
  SUBCASE("gradient") {
    auto x = randn({3, 3, 2}, 21);
    auto w = randn({6, 5, 2}, 22, 1.0, false);
    CHECK(gradient_error([&] { return ops::sum(ops::mul(ops::bilinear_resize(x, 6, 5), w)); }, {x}) <= 1e-4);
  }
}

TEST_CASE("pointwise and transposed convolutions") {
  SUBCASE("1x1 conv is a per-pixel linear map") {
    auto x = randn({2, 3, 4}, 23, 1.0, false);
    auto w = randn({4, 5}, 24, 1.0, false), b = randn({5}, 25, 1.0, false);
    auto y = ops::pointwise_conv(x, w, b);
    auto ref = ops::linear(ops::reshape(x, {6, 4}), w, b);
    CHECK(values(y) == values(ref));
  }
  SUBCASE("2x2 transposed conv scatters each pixel into its own 2x2 block") {
    auto x = Tensor::from_data({1, 2, 1}, {1.0, 2.0});
    auto w = Tensor::from_data({2, 2, 1, 1}, {1, 2, 3, 4});
    auto y = ops::transposed_conv_2x2(x, w, Tensor::full({1}, 0.5));
    CHECK(y.shape() == Shape{2, 4, 1});
    CHECK(values(y) == std::vector<double>{1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5});
  }
  SUBCASE("gradients") {
    auto x = randn({2, 2, 3}, 26), w = randn({3, 2}, 27), b = randn({2}, 28);
    auto dw = randn({2, 2, 3, 2}, 29);
    auto wy = randn({4, 4, 2}, 30, 1.0, false), wy2 = randn({2, 2, 2}, 31, 1.0, false);
    CHECK(gradient_error([&] { return ops::sum(ops::mul(ops::pointwise_conv(x, w, b), wy2)); },
                         {x, w, b}) <= 1e-4);
    CHECK(gradient_error([&] { return ops::sum(ops::mul(ops::transposed_conv_2x2(x, dw, b), wy)); }, {x, dw, b}) <= 1e-4);
  }
}

TEST_CASE("backward replay is bitwise deterministic") {
  auto run = [] {
    auto a = randn({4, 3}, 31), b = randn({3, 5}, 32);
    auto y = ops::sum(ops::gelu(ops::softmax(ops::matmul(a, b), 1)));
    y.backward();
    auto out = values(a.grad_tensor());
    auto gb = values(b.grad_tensor());
    out.insert(out.end(), gb.begin(), gb.end());
    out.push_back(y.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("gelu uses the exact erf form") {
  auto x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  auto y = ops::gelu(x);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(y[i] == doctest::Approx(0.5 * x[i] * (1 + std::erf(x[i] / std::numbers::sqrt2))).epsilon(1e-14));
  }
}

TEST_CASE("sigmoid is stable for large magnitudes") {
  auto y = ops::sigmoid(Tensor::from_data({2}, {1e4, -1e4}));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 0.0);
  CHECK(std::isfinite(y[1]));
}
