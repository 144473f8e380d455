#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fptrans/mask.hpp"
#include "fptrans/partition.hpp"
#include "fptrans/random.hpp"
#include "fptrans/tensor.hpp"
#include "fptrans/vit.hpp"

namespace fptrans::prompting {

/// D learnable G x C token blocks; a fresh subset augments each episode's
/// prompts.
struct TokenPool {
  std::vector<Tensor> tokens;

  static TokenPool init(std::size_t pool_size, std::size_t tokens_per_prompt, std::size_t channels, Rng& rng);
  std::size_t size() const { return tokens.size(); }
  NamedTensors named_parameters(const std::string& prefix) const;
  TokenPool clone() const;
};

/// Mean of the rows of features[HW x C] selected by `mask` (flattened
/// row-major). Throws EpisodeInvalid for an empty mask.
Tensor masked_mean(const Tensor& features, const Mask& mask);

struct PooledFeatures {
  Tensor foreground;               // [C]
  std::vector<Tensor> background;  // one [C] per region
};

PooledFeatures masked_mean_features(const Tensor& features, const Mask& foreground,
                                    std::span<const Mask> background_regions);

/// `count` distinct indices in [0, pool_size), uniform without replacement.
/// Throws ConfigError when pool_size < count.
std::vector<std::size_t> sample_pool_indices(std::size_t pool_size, std::size_t count, Rng& rng);

struct PromptSet {
  Tensor foreground;               // [G x C]
  std::vector<Tensor> background;  // [G x C] each; K x S' blocks in K-shot
  std::vector<std::size_t> pool_indices;
  std::size_t tokens_per_prompt = 0;

  std::size_t prompt_count() const { return 1 + background.size(); }
  std::size_t token_count() const { return prompt_count() * tokens_per_prompt; }
  /// [p_f; p_1; ...; p_n] stacked along rows.
  Tensor stacked() const;
};

/// p = E(u) + z, where E repeats the mean vector G times. `background_tokens`
/// pairs with `background_means` one to one.
PromptSet build_prompts(const Tensor& foreground_mean, std::span<const Tensor> background_means,
                        const Tensor& foreground_token, std::span<const Tensor> background_tokens,
                        std::size_t tokens_per_prompt);

/// Patch-token states of the last block of a plain forward pass, [HW x C],
/// computed without recording a graph.
Tensor extract_prompt_features(const Tensor& image, const vit::ViTParams& extractor, const vit::ViTConfig& config);

/// Full prompt generation for an episode. Per shot: masked means of the
/// foreground and of each Voronoi region. The foreground means are averaged
/// over shots; background means are kept per shot and region. Draws
/// `regions + 1` pool tokens; background region n of every shot uses token n.
PromptSet generate_prompts(std::span<const Tensor> support_features, std::span<const Mask> foreground_masks,
                           std::span<const partition::PartitionResult> partitions, const TokenPool& pool,
                           std::size_t regions, Rng& rng);

}  // namespace fptrans::prompting
