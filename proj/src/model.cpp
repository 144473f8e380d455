#include "fptrans/model.hpp"

#include "fptrans/errors.hpp"
#include "fptrans/ops.hpp"

namespace fptrans::model {

namespace {

Tensor copy_leaf(const Tensor& t) {
  auto c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

// Tokens of one branch between blocks.
struct BranchState {
  Tensor cls;      // [1 x C]
  Tensor patches;  // [N x C]
  Tensor prompts;  // [T_p x C]
};

BranchState run_block(const BranchState& in, const vit::BlockParams& block, std::size_t heads, bool isolate) {
  const auto n = in.patches.dim(0), tp = in.prompts.dim(0);
  BranchState out;
  if (isolate) {
    const Tensor image_parts[] = {in.cls, in.patches};
    auto image_out = vit::transformer_block(ops::concat(image_parts, 0), block, heads);
    out.cls = ops::slice(image_out, 0, 0, 1);
    out.patches = ops::slice(image_out, 0, 1, n);
    out.prompts = vit::transformer_block(in.prompts, block, heads);
    return out;
  }
  const Tensor parts[] = {in.cls, in.patches, in.prompts};
  auto seq = vit::transformer_block(ops::concat(parts, 0), block, heads);
  out.cls = ops::slice(seq, 0, 0, 1);
  out.patches = ops::slice(seq, 0, 1, n);
  out.prompts = ops::slice(seq, 0, 1 + n, tp);
  return out;
}

BranchState initial_state(const Tensor& image, const FPTransParams& params, const ModelConfig& config,
                          const Tensor& prompts) {
  auto tokens = vit::embed_tokens(image, params.backbone, config.vit);
  return {ops::slice(tokens, 0, 0, 1), ops::slice(tokens, 0, 1, config.vit.num_patches()), prompts};
}

}  // namespace

void ModelConfig::validate() const {
  vit.validate();
  if (upsampler_hidden == 0) throw ConfigError("upsampler_hidden must be positive");
  if (prompt_tokens == 0) throw ConfigError("prompt_tokens must be positive");
  if (regions == 0) throw ConfigError("regions must be positive");
  if (pool_size < regions + 1) {
    throw ConfigError("pool_size " + std::to_string(pool_size) + " is smaller than regions + 1 = " +
                      std::to_string(regions + 1));
  }
}

UpsamplerParams UpsamplerParams::init(std::size_t channels, std::size_t hidden, Rng& rng) {
  UpsamplerParams p;
  p.conv1_w = truncated_normal({channels, hidden}, 0.02, rng);
  p.conv1_b = Tensor::zeros({hidden}, true);
  p.deconv_w = truncated_normal({2, 2, hidden, hidden}, 0.02, rng);
  p.deconv_b = Tensor::zeros({hidden}, true);
  p.conv2_w = truncated_normal({hidden, channels}, 0.02, rng);
  p.conv2_b = Tensor::zeros({channels}, true);
  return p;
}

NamedTensors UpsamplerParams::named_parameters(const std::string& prefix) const {
  return {{prefix + "conv1_w", conv1_w}, {prefix + "conv1_b", conv1_b},   {prefix + "deconv_w", deconv_w},
          {prefix + "deconv_b", deconv_b}, {prefix + "conv2_w", conv2_w}, {prefix + "conv2_b", conv2_b}};
}

UpsamplerParams UpsamplerParams::clone() const {
  return {copy_leaf(conv1_w), copy_leaf(conv1_b), copy_leaf(deconv_w),
          copy_leaf(deconv_b), copy_leaf(conv2_w), copy_leaf(conv2_b)};
}

FPTransParams FPTransParams::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  FPTransParams p;
  p.backbone = vit::ViTParams::init(config.vit, rng);
  p.upsampler = UpsamplerParams::init(config.vit.channels, config.upsampler_hidden, rng);
  p.pool = prompting::TokenPool::init(config.pool_size, config.prompt_tokens, config.vit.channels, rng);
  return p;
}

NamedTensors FPTransParams::named_parameters() const {
  auto out = backbone.named_parameters("backbone/");
  auto up = upsampler.named_parameters("upsampler/");
  auto pl = pool.named_parameters("pool/");
  out.insert(out.end(), up.begin(), up.end());
  out.insert(out.end(), pl.begin(), pl.end());
  return out;
}

FPTransParams FPTransParams::clone() const { return {backbone.clone(), upsampler.clone(), pool.clone()}; }

Tensor ProxySet::stacked() const {
  std::vector<Tensor> rows{ops::reshape(foreground, {1, foreground.numel()})};
  for (const auto& b : background) rows.push_back(ops::reshape(b, {1, b.numel()}));
  return ops::concat(rows, 0);
}

Tensor upsample_features(const Tensor& patch_tokens, const UpsamplerParams& upsampler, std::size_t grid) {
  if (patch_tokens.rank() != 2 || patch_tokens.dim(0) != grid * grid) {
    throw DimensionError("upsample_features: tokens " + shape_to_string(patch_tokens.shape()) + " do not form a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  }
  const auto c = patch_tokens.dim(1);
  auto spatial = ops::reshape(patch_tokens, {grid, grid, c});
  auto hidden = ops::relu(ops::pointwise_conv(spatial, upsampler.conv1_w, upsampler.conv1_b));
  hidden = ops::relu(ops::transposed_conv_2x2(hidden, upsampler.deconv_w, upsampler.deconv_b));
  auto residual = ops::pointwise_conv(hidden, upsampler.conv2_w, upsampler.conv2_b);
  return ops::add(ops::bilinear_resize(spatial, 2 * grid, 2 * grid), residual);
}

Tensor project_prompts(const Tensor& prompts, const UpsamplerParams& upsampler) {
  // ReLU -> identity -> ReLU collapses to a single ReLU.
  auto hidden = ops::relu(ops::linear(prompts, upsampler.conv1_w, upsampler.conv1_b));
  return ops::add(prompts, ops::linear(hidden, upsampler.conv2_w, upsampler.conv2_b));
}

EpisodeForward forward_episode(const FPTransParams& params, const ModelConfig& config, const Tensor& query_image,
                               std::span<const Tensor> support_images, const prompting::PromptSet& prompts,
                               const ForwardOptions& options) {
  if (support_images.empty()) throw DimensionError("forward_episode: no support images");
  const auto shots = support_images.size();
  const auto grid = config.patch_grid();
  const auto channels = config.vit.channels;
  const double inv_branches = 1.0 / static_cast<double>(shots + 1);

  EpisodeForward out;
  const auto p0 = prompts.stacked();
  out.synced_prompts.push_back(p0);
  out.support_prompts.resize(shots);

  BranchState query = initial_state(query_image, params, config, p0);
  std::vector<BranchState> supports;
  for (const auto& image : support_images) supports.push_back(initial_state(image, params, config, p0));

  for (const auto& block : params.backbone.blocks) {
    query = run_block(query, block, config.vit.heads, options.isolate_prompts);
    for (auto& s : supports) s = run_block(s, block, config.vit.heads, options.isolate_prompts);

    out.query_prompts.push_back(query.prompts);
    for (std::size_t k = 0; k < shots; ++k) out.support_prompts[k].push_back(supports[k].prompts);

    if (options.sync_prompts) {
      Tensor prompt_sum = query.prompts, cls_sum = query.cls;
      for (const auto& s : supports) {
        prompt_sum = ops::add(prompt_sum, s.prompts);
        cls_sum = ops::add(cls_sum, s.cls);
      }
      const auto synced = ops::scale(prompt_sum, inv_branches);
      const auto synced_cls = ops::scale(cls_sum, inv_branches);
      out.synced_prompts.push_back(synced);
      query.prompts = synced;
      query.cls = synced_cls;
      for (auto& s : supports) {
        s.prompts = synced;
        s.cls = synced_cls;
      }
    }
  }

  out.prompt_states = options.sync_prompts ? out.synced_prompts.back() : supports.front().prompts;
  out.class_state = ops::reshape(query.cls, {channels});
  out.query_features = upsample_features(query.patches, params.upsampler, grid);
  for (const auto& s : supports) out.support_features.push_back(upsample_features(s.patches, params.upsampler, grid));
  return out;
}

EpisodeForward forward_episode_one_shot(const FPTransParams& params, const ModelConfig& config,
                                        const Tensor& query_image, const Tensor& support_image,
                                        const prompting::PromptSet& prompts) {
  const auto grid = config.patch_grid();
  EpisodeForward out;
  const auto p0 = prompts.stacked();
  out.synced_prompts.push_back(p0);
  out.support_prompts.resize(1);

  BranchState query = initial_state(query_image, params, config, p0);
  BranchState support = initial_state(support_image, params, config, p0);
  for (const auto& block : params.backbone.blocks) {
    query = run_block(query, block, config.vit.heads, false);
    support = run_block(support, block, config.vit.heads, false);
    out.query_prompts.push_back(query.prompts);
    out.support_prompts[0].push_back(support.prompts);
    const auto p = ops::scale(ops::add(query.prompts, support.prompts), 0.5);
    const auto x = ops::scale(ops::add(query.cls, support.cls), 0.5);
    out.synced_prompts.push_back(p);
    query.prompts = support.prompts = p;
    query.cls = support.cls = x;
  }
  out.prompt_states = out.synced_prompts.back();
  out.class_state = ops::reshape(query.cls, {config.vit.channels});
  out.query_features = upsample_features(query.patches, params.upsampler, grid);
  out.support_features.push_back(upsample_features(support.patches, params.upsampler, grid));
  return out;
}

ProxySet feature_based_proxies(std::span<const Tensor> support_features, std::span<const Mask> foreground_masks,
                               std::span<const partition::PartitionResult> partitions) {
  const auto shots = support_features.size();
  if (shots == 0 || foreground_masks.size() != shots || partitions.size() != shots) {
    throw DimensionError("feature_based_proxies: need one mask and partition per support shot");
  }
  ProxySet proxies;
  Tensor fg_sum;
  for (std::size_t k = 0; k < shots; ++k) {
    const auto& f = support_features[k];
    if (f.rank() != 3) throw DimensionError("feature_based_proxies: expected [H x W x C] features");
    auto flat = ops::reshape(f, {f.dim(0) * f.dim(1), f.dim(2)});
    auto pooled = prompting::masked_mean_features(flat, foreground_masks[k], partitions[k].masks);
    fg_sum = k == 0 ? pooled.foreground : ops::add(fg_sum, pooled.foreground);
    for (auto& b : pooled.background) proxies.background.push_back(std::move(b));
  }
  proxies.foreground = shots == 1 ? fg_sum : ops::scale(fg_sum, 1.0 / static_cast<double>(shots));
  return proxies;
}

ProxySet prompt_based_proxies(const Tensor& prompt_states, const UpsamplerParams& upsampler,
                              std::size_t tokens_per_prompt) {
  if (prompt_states.rank() != 2 || tokens_per_prompt == 0 || prompt_states.dim(0) % tokens_per_prompt != 0 ||
      prompt_states.dim(0) < tokens_per_prompt) {
    throw DimensionError("prompt_based_proxies: " + shape_to_string(prompt_states.shape()) +
                         " is not a stack of G=" + std::to_string(tokens_per_prompt) + " token prompts");
  }
  auto projected = project_prompts(prompt_states, upsampler);
  const auto prompts = prompt_states.dim(0) / tokens_per_prompt;
  ProxySet proxies;
  for (std::size_t p = 0; p < prompts; ++p) {
    auto v = ops::mean_axis(ops::slice(projected, 0, p * tokens_per_prompt, tokens_per_prompt), 0);
    if (p == 0) {
      proxies.foreground = v;
    } else {
      proxies.background.push_back(v);
    }
  }
  return proxies;
}

}  // namespace fptrans::model
