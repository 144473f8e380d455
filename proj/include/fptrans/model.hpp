#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fptrans/mask.hpp"
#include "fptrans/partition.hpp"
#include "fptrans/prompting.hpp"
#include "fptrans/random.hpp"
#include "fptrans/tensor.hpp"
#include "fptrans/vit.hpp"

namespace fptrans::model {

struct ModelConfig {
  vit::ViTConfig vit;
  std::size_t upsampler_hidden = 256;
  std::size_t prompt_tokens = 4;  // G
  std::size_t regions = 3;        // S
  std::size_t pool_size = 16;     // D

  void validate() const;
  std::size_t patch_grid() const { return vit.grid(); }
  /// Spatial size of the upsampled features (one 2x stage).
  std::size_t feature_grid() const { return 2 * vit.grid(); }
};

/// Bottleneck g = Conv1x1 -> ReLU -> DeConv2x2 -> ReLU -> Conv1x1.
struct UpsamplerParams {
  Tensor conv1_w, conv1_b;    // [C x hidden], [hidden]
  Tensor deconv_w, deconv_b;  // [2 x 2 x hidden x hidden], [hidden]
  Tensor conv2_w, conv2_b;    // [hidden x C], [C]

  static UpsamplerParams init(std::size_t channels, std::size_t hidden, Rng& rng);
  NamedTensors named_parameters(const std::string& prefix) const;
  UpsamplerParams clone() const;
};

struct FPTransParams {
  vit::ViTParams backbone;  // shared by the query and support branches
  UpsamplerParams upsampler;
  prompting::TokenPool pool;

  static FPTransParams init(const ModelConfig& config, Rng& rng);
  NamedTensors named_parameters() const;
  FPTransParams clone() const;
};

/// One foreground vector and any number of background vectors, all [C].
struct ProxySet {
  Tensor foreground;
  std::vector<Tensor> background;

  /// [(1 + n) x C], foreground first.
  Tensor stacked() const;
};

struct ForwardOptions {
  /// Average prompt and class-token states across branches after every
  /// block. When off, every branch keeps private states seeded from P^0.
  bool sync_prompts = true;
  /// Run prompts through each block separately from the image tokens, so
  /// neither group attends to the other.
  bool isolate_prompts = false;
};

struct EpisodeForward {
  Tensor query_features;                  // [2g x 2g x C]
  std::vector<Tensor> support_features;   // per shot, [2g x 2g x C]
  Tensor prompt_states;                   // P^L, [(1 + n) G x C]
  std::vector<Tensor> synced_prompts;     // P^0 .. P^L (P^0 only when unsynced)
  std::vector<Tensor> query_prompts;      // P_q^1 .. P_q^L
  std::vector<std::vector<Tensor>> support_prompts;  // [shot][block] P_s^l
  Tensor class_state;                     // [C]
};

/// X' = Resize(X) + g(X) for patch tokens [N x C] on a grid x grid layout.
Tensor upsample_features(const Tensor& patch_tokens, const UpsamplerParams& upsampler, std::size_t grid);

/// P + g(P) with the transposed convolution acting as identity, since
/// prompt tokens have no spatial layout.
Tensor project_prompts(const Tensor& prompts, const UpsamplerParams& upsampler);

/// Query and K support branches through the shared blocks; after block l
/// P^l = (P_q^l + sum_k P_s^{l,(k)}) / (K + 1), likewise for the class token.
EpisodeForward forward_episode(const FPTransParams& params, const ModelConfig& config, const Tensor& query_image,
                               std::span<const Tensor> support_images, const prompting::PromptSet& prompts,
                               const ForwardOptions& options = {});

/// Direct two-branch form for K = 1: P^l = (P_q^l + P_s^l) / 2.
EpisodeForward forward_episode_one_shot(const FPTransParams& params, const ModelConfig& config,
                                        const Tensor& query_image, const Tensor& support_image,
                                        const prompting::PromptSet& prompts);

/// Masked means of upsampled support features. The foreground proxy is the
/// average over shots; background proxies are kept per shot and region.
ProxySet feature_based_proxies(std::span<const Tensor> support_features, std::span<const Mask> foreground_masks,
                               std::span<const partition::PartitionResult> partitions);

/// Projects P^L and averages each prompt's G tokens.
ProxySet prompt_based_proxies(const Tensor& prompt_states, const UpsamplerParams& upsampler,
                              std::size_t tokens_per_prompt);

}  // namespace fptrans::model
