#include <cmath>
#include <map>

#include "doctest.h"
#include "fptrans/errors.hpp"
#include "fptrans/ops.hpp"
#include "fptrans/prompting.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fptrans;
using namespace fptrans::prompting;
using testutil::randn;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("masked mean") {
  SUBCASE("one selected position is that row verbatim") {
    auto f = randn({6, 3}, 1, 1.0, false);
    Mask m(2, 3);
    m.values[4] = 1;
    CHECK(values(masked_mean(f, m)) == values(ops::reshape(ops::slice(f, 0, 4, 1), {3})));
  }
  SUBCASE("all ones gives the global mean") {
    auto f = randn({6, 3}, 2, 1.0, false);
    testutil::check_close(masked_mean(f, Mask(2, 3, 1)).data(), ops::mean_axis(f, 0).data(), 1e-15);
  }
  SUBCASE("hand average") {
    auto f = Tensor::from_data({2, 2}, {1, 3, 5, 7});
    CHECK(values(masked_mean(f, Mask(1, 2, 1))) == std::vector<double>{3, 5});
  }
  SUBCASE("empty mask is an invalid episode") {
    CHECK_THROWS_AS(masked_mean(Tensor::zeros({4, 2}), Mask(2, 2, 0)), EpisodeInvalid);
  }
  SUBCASE("brute-force loop on random 16x8 features") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      auto f = randn({16, 8}, 100 + seed, 1.0, false);
      auto fg = oracle::random_mask(4, 4, 0.5, rng);
      if (fg.count() == 0) fg.values[0] = 1;
      auto bg = fg;
      for (auto& v : bg.values) v = 1 - v;
      std::vector<Mask> regions;
      if (bg.count() > 0) regions.push_back(bg);
      auto pooled = masked_mean_features(f, fg, regions);
      std::vector<double> fv(f.data().begin(), f.data().end());
      testutil::check_close(pooled.foreground.data(), oracle::masked_mean(fv, 8, fg.values), 1e-12);
      for (std::size_t n = 0; n < regions.size(); ++n) {
        testutil::check_close(pooled.background[n].data(), oracle::masked_mean(fv, 8, regions[n].values), 1e-12);
      }
    }
  }
  SUBCASE("differentiable with respect to the features") {
    auto f = randn({4, 3}, 3);
    Mask m(2, 2);
    m.values = {1, 0, 1, 1};
    CHECK(testutil::gradient_error([&] { return ops::sum(ops::exp(masked_mean(f, m))); }, {f}) <= 1e-6);
  }
}

TEST_CASE("pool sampling") {
  SUBCASE("D = S + 1 uses every token") {
    Rng rng(1);
    auto idx = sample_pool_indices(4, 4, rng);
    std::ranges::sort(idx);
    CHECK(idx == std::vector<std::size_t>{0, 1, 2, 3});
  }
  SUBCASE("deterministic for a seed and distinct") {
    Rng a(7), b(7);
    auto x = sample_pool_indices(16, 4, a);
    CHECK(x == sample_pool_indices(16, 4, b));
    std::ranges::sort(x);
    CHECK(std::ranges::adjacent_find(x) == x.end());
  }
  SUBCASE("too small a pool is a configuration error") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_pool_indices(3, 4, rng), ConfigError);
  }
  SUBCASE("each index appears with frequency 3/8 within 3 sigma") {
    Rng rng(99);
    const int draws = 10000;
    std::map<std::size_t, int> counts;
    for (int i = 0; i < draws; ++i)
      for (auto k : sample_pool_indices(8, 3, rng)) ++counts[k];
    const double p = 3.0 / 8.0, sigma = std::sqrt(draws * p * (1 - p));
    for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(counts[k] - draws * p) <= 3 * sigma);
  }
}

TEST_CASE("prompt construction") {
  SUBCASE("zero tokens repeat the mean") {
    auto u = Tensor::from_data({3}, {1, 2, 3});
    auto set = build_prompts(u, {}, Tensor::zeros({2, 3}), {}, 2);
    CHECK(values(set.foreground) == std::vector<double>{1, 2, 3, 1, 2, 3});
  }
  SUBCASE("zero mean gives the token") {
    auto z = randn({2, 3}, 4, 1.0, false);
    auto set = build_prompts(Tensor::zeros({3}), {}, z, {}, 2);
    CHECK(values(set.foreground) == values(z));
  }
  SUBCASE("hand sum") {
    auto u = Tensor::from_data({2}, {1, 2});
    auto z = Tensor::from_data({2, 2}, {0.1, 0.1, -0.1, -0.1});
    const Tensor bg_means[] = {u};
    const Tensor bg_tokens[] = {z};
    auto set = build_prompts(u, bg_means, z, bg_tokens, 2);
    testutil::check_close(set.foreground.data(), std::vector<double>{1.1, 2.1, 0.9, 1.9}, 1e-15);
    CHECK(set.prompt_count() == 2);
    CHECK(set.token_count() == 4);
    CHECK(set.stacked().shape() == Shape{4, 2});
  }
  SUBCASE("gradient reaches pool tokens as the prompt gradient") {
    auto u = randn({3}, 5, 1.0, false);
    auto z = randn({2, 3}, 6);
    auto w = randn({2, 3}, 7, 1.0, false);
    auto f = [&] { return ops::sum(ops::mul(ops::exp(build_prompts(u, {}, z, {}, 2).foreground), w)); };
    CHECK(testutil::gradient_error(f, {z}) <= 1e-6);
  }
}

TEST_CASE("prompt features and full generation") {
  vit::ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.channels = 8;
  c.blocks = 2;
  c.heads = 2;
  c.mlp_hidden = 16;
  c.key_dim = c.value_dim = 8;
  Rng rng(11);
  auto backbone = vit::ViTParams::init(c, rng);
  auto image = randn({3, 16, 16}, 12, 1.0, false);

  auto a = extract_prompt_features(image, backbone, c);
  auto b = extract_prompt_features(image, backbone, c);
  CHECK(a.shape() == Shape{4, 8});
  CHECK(values(a) == values(b));
  CHECK(values(a) == values(vit::plain_forward(image, backbone, c).patch_tokens));
  CHECK_FALSE(a.requires_grad());

  auto pool = TokenPool::init(8, 2, 8, rng);
  CHECK(pool.size() == 8);
  Mask fg(2, 2);
  fg.values = {1, 0, 0, 0};
  Rng prng(3);
  const partition::PartitionResult parts[] = {partition::partition(fg, 3, prng)};
  const Tensor feats[] = {a};
  const Mask fgs[] = {fg};
  Rng g1(5), g2(5);
  auto set = generate_prompts(feats, fgs, parts, pool, 3, g1);
  CHECK(set.pool_indices == sample_pool_indices(8, 4, g2));
  CHECK(set.token_count() == (1 + 3) * 2);
  // p_f = E(u_f) + z_f exactly.
  auto expected = ops::add(ops::repeat_rows(masked_mean(a, fg), 2), pool.tokens[set.pool_indices[0]]);
  CHECK(values(set.foreground) == values(expected));

  SUBCASE("two shots keep K x S background prompts and share tokens per region") {
    Mask fg2(2, 2);
    fg2.values = {0, 0, 1, 1};
    Rng r2(8);
    const partition::PartitionResult parts2[] = {partition::partition(fg, 3, r2), partition::partition(fg2, 3, r2)};
    const Tensor feats2[] = {a, b};
    const Mask fgs2[] = {fg, fg2};
    Rng g3(9);
    auto set2 = generate_prompts(feats2, fgs2, parts2, pool, 3, g3);
    // Shot 1 has 3 regions, shot 2 only 2 background cells.
    CHECK(set2.background.size() == 5);
    CHECK(set2.token_count() == (1 + 5) * 2);
    auto fg_mean = ops::scale(ops::add(masked_mean(a, fg), masked_mean(b, fg2)), 0.5);
    auto want_fg = ops::add(ops::repeat_rows(fg_mean, 2), pool.tokens[set2.pool_indices[0]]);
    testutil::check_close(set2.foreground.data(), want_fg.data(), 1e-15);
    auto want_bg = ops::add(ops::repeat_rows(masked_mean(b, parts2[1].masks[0]), 2), pool.tokens[set2.pool_indices[1]]);
    CHECK(values(set2.background[3]) == values(want_bg));
  }
}
