#include "fptrans/prompting.hpp"

#include <algorithm>
#include <numeric>

#include "fptrans/errors.hpp"
#include "fptrans/ops.hpp"

namespace fptrans::prompting {

TokenPool TokenPool::init(std::size_t pool_size, std::size_t tokens_per_prompt, std::size_t channels, Rng& rng) {
  TokenPool pool;
  for (std::size_t i = 0; i < pool_size; ++i) {
    pool.tokens.push_back(truncated_normal({tokens_per_prompt, channels}, 0.02, rng));
  }
  return pool;
}

NamedTensors TokenPool::named_parameters(const std::string& prefix) const {
  NamedTensors out;
  for (std::size_t i = 0; i < tokens.size(); ++i) out.push_back({prefix + "token" + std::to_string(i), tokens[i]});
  return out;
}

TokenPool TokenPool::clone() const {
  TokenPool pool;
  for (const auto& t : tokens) {
    auto c = t.detach();
    c.set_requires_grad(t.requires_grad());
    pool.tokens.push_back(c);
  }
  return pool;
}

Tensor masked_mean(const Tensor& features, const Mask& mask) {
  if (features.rank() != 2 || features.dim(0) != mask.size()) {
    throw DimensionError("masked_mean: features " + shape_to_string(features.shape()) + " vs mask " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  const auto count = mask.count();
  if (count == 0) throw EpisodeInvalid("masked average pooling over an empty mask");
  std::vector<double> weights(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) weights[i] = mask.values[i] ? 1.0 / static_cast<double>(count) : 0.0;
  auto row = Tensor::from_data({1, mask.size()}, std::move(weights));
  return ops::reshape(ops::matmul(row, features), {features.dim(1)});
}

PooledFeatures masked_mean_features(const Tensor& features, const Mask& foreground,
                                    std::span<const Mask> background_regions) {
  PooledFeatures out;
  out.foreground = masked_mean(features, foreground);
  for (const auto& region : background_regions) out.background.push_back(masked_mean(features, region));
  return out;
}

std::vector<std::size_t> sample_pool_indices(std::size_t pool_size, std::size_t count, Rng& rng) {
  if (pool_size < count) {
    throw ConfigError("token pool of size " + std::to_string(pool_size) + " cannot supply " + std::to_string(count) +
                      " distinct tokens");
  }
  std::vector<std::size_t> all(pool_size);
  std::iota(all.begin(), all.end(), std::size_t{0});
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool_size - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(count);
  return all;
}

Tensor PromptSet::stacked() const {
  std::vector<Tensor> parts{foreground};
  parts.insert(parts.end(), background.begin(), background.end());
  return ops::concat(parts, 0);
}

PromptSet build_prompts(const Tensor& foreground_mean, std::span<const Tensor> background_means,
                        const Tensor& foreground_token, std::span<const Tensor> background_tokens,
                        std::size_t tokens_per_prompt) {
  if (background_means.size() != background_tokens.size()) {
    throw DimensionError("build_prompts: " + std::to_string(background_means.size()) + " background means but " +
                         std::to_string(background_tokens.size()) + " tokens");
  }
  PromptSet set;
  set.tokens_per_prompt = tokens_per_prompt;
  set.foreground = ops::add(ops::repeat_rows(foreground_mean, tokens_per_prompt), foreground_token);
  for (std::size_t n = 0; n < background_means.size(); ++n) {
    set.background.push_back(ops::add(ops::repeat_rows(background_means[n], tokens_per_prompt), background_tokens[n]));
  }
  return set;
}

Tensor extract_prompt_features(const Tensor& image, const vit::ViTParams& extractor, const vit::ViTConfig& config) {
  NoGradGuard no_grad;
  return vit::plain_forward(image, extractor, config).patch_tokens.detach();
}

PromptSet generate_prompts(std::span<const Tensor> support_features, std::span<const Mask> foreground_masks,
                           std::span<const partition::PartitionResult> partitions, const TokenPool& pool,
                           std::size_t regions, Rng& rng) {
  const auto shots = support_features.size();
  if (shots == 0 || foreground_masks.size() != shots || partitions.size() != shots) {
    throw DimensionError("generate_prompts: support features, masks and partitions must have one entry per shot");
  }
  const auto indices = sample_pool_indices(pool.size(), regions + 1, rng);

  Tensor fg_sum;
  std::vector<Tensor> bg_means, bg_tokens;
  for (std::size_t k = 0; k < shots; ++k) {
    auto pooled = masked_mean_features(support_features[k], foreground_masks[k], partitions[k].masks);
    fg_sum = k == 0 ? pooled.foreground : ops::add(fg_sum, pooled.foreground);
    for (std::size_t n = 0; n < pooled.background.size(); ++n) {
      bg_means.push_back(pooled.background[n]);
      bg_tokens.push_back(pool.tokens[indices[1 + n]]);
    }
  }
  auto fg_mean = shots == 1 ? fg_sum : ops::scale(fg_sum, 1.0 / static_cast<double>(shots));
  auto set = build_prompts(fg_mean, bg_means, pool.tokens[indices[0]], bg_tokens, pool.tokens[indices[0]].dim(0));
  set.pool_indices = indices;
  return set;
}

}  // namespace fptrans::prompting
