#include "fptrans/vit.hpp"

#include <cmath>

#include "fptrans/errors.hpp"
#include "fptrans/ops.hpp"

namespace fptrans::vit {

namespace {

constexpr double kInitStd = 0.02;

Tensor copy_leaf(const Tensor& t) {
  auto c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

}  // namespace

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (channels == 0 || heads == 0 || mlp_hidden == 0) throw ConfigError("channels, heads and mlp_hidden must be positive");
  if (key_dim == 0 || value_dim == 0 || key_dim % heads != 0 || value_dim % heads != 0) {
    throw ConfigError("key_dim and value_dim must be positive multiples of heads");
  }
}

ViTParams ViTParams::init(const ViTConfig& config, Rng& rng) {
  config.validate();
  const auto c = config.channels;
  ViTParams p;
  p.embed_w = truncated_normal({config.patch_length(), c}, kInitStd, rng);
  p.embed_b = Tensor::zeros({c}, true);
  p.pos_embed = truncated_normal({config.num_patches() + 1, c}, kInitStd, rng);
  p.cls_token = Tensor::zeros({c}, true);
  for (std::size_t l = 0; l < config.blocks; ++l) {
    BlockParams b;
    b.ln1_gamma = Tensor::full({c}, 1.0, true);
    b.ln1_beta = Tensor::zeros({c}, true);
    b.wq = truncated_normal({c, config.key_dim}, kInitStd, rng);
    b.wk = truncated_normal({c, config.key_dim}, kInitStd, rng);
    b.wv = truncated_normal({c, config.value_dim}, kInitStd, rng);
    b.wo = truncated_normal({config.value_dim, c}, kInitStd, rng);
    b.bo = Tensor::zeros({c}, true);
    b.ln2_gamma = Tensor::full({c}, 1.0, true);
    b.ln2_beta = Tensor::zeros({c}, true);
    b.w1 = truncated_normal({c, config.mlp_hidden}, kInitStd, rng);
    b.b1 = Tensor::zeros({config.mlp_hidden}, true);
    b.w2 = truncated_normal({config.mlp_hidden, c}, kInitStd, rng);
    b.b2 = Tensor::zeros({c}, true);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

NamedTensors ViTParams::named_parameters(const std::string& prefix) const {
  NamedTensors out{{prefix + "embed_w", embed_w},
                   {prefix + "embed_b", embed_b},
                   {prefix + "pos_embed", pos_embed},
                   {prefix + "cls_token", cls_token}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const auto bp = prefix + "block" + std::to_string(l) + "/";
    out.insert(out.end(), {{bp + "ln1_gamma", b.ln1_gamma},
                           {bp + "ln1_beta", b.ln1_beta},
                           {bp + "wq", b.wq},
                           {bp + "wk", b.wk},
                           {bp + "wv", b.wv},
                           {bp + "wo", b.wo},
                           {bp + "bo", b.bo},
                           {bp + "ln2_gamma", b.ln2_gamma},
                           {bp + "ln2_beta", b.ln2_beta},
                           {bp + "w1", b.w1},
                           {bp + "b1", b.b1},
                           {bp + "w2", b.w2},
                           {bp + "b2", b.b2}});
  }
  return out;
}

ViTParams ViTParams::clone() const {
  ViTParams p;
  p.embed_w = copy_leaf(embed_w);
  p.embed_b = copy_leaf(embed_b);
  p.pos_embed = copy_leaf(pos_embed);
  p.cls_token = copy_leaf(cls_token);
  for (const auto& b : blocks) {
    p.blocks.push_back({copy_leaf(b.ln1_gamma), copy_leaf(b.ln1_beta), copy_leaf(b.wq), copy_leaf(b.wk),
                        copy_leaf(b.wv), copy_leaf(b.wo), copy_leaf(b.bo), copy_leaf(b.ln2_gamma),
                        copy_leaf(b.ln2_beta), copy_leaf(b.w1), copy_leaf(b.b1), copy_leaf(b.w2),
                        copy_leaf(b.b2)});
  }
  return p;
}

std::size_t parameter_count(const ViTConfig& config) {
  const auto c = config.channels;
  const auto per_block = 4 * c + 2 * c * config.key_dim + c * config.value_dim + config.value_dim * c + c +
                         c * config.mlp_hidden + config.mlp_hidden + config.mlp_hidden * c + c;
  return config.patch_length() * c + c + (config.num_patches() + 1) * c + c + config.blocks * per_block;
}

namespace {

void check_image(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("expected image of shape [3 x H x W], got " + shape_to_string(image.shape()));
  }
  if (patch_size == 0 || image.dim(1) % patch_size != 0 || image.dim(2) % patch_size != 0) {
    throw DimensionError("image " + shape_to_string(image.shape()) + " is not divisible into " +
                         std::to_string(patch_size) + "x" + std::to_string(patch_size) + " patches");
  }
}

// For patch p and in-patch offset e, the flat index into [3 x H x W].
std::vector<std::size_t> patch_index_map(std::size_t height, std::size_t width, std::size_t patch) {
  const auto gh = height / patch, gw = width / patch;
  std::vector<std::size_t> idx;
  idx.reserve(3 * height * width);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            idx.push_back((c * height + py * patch + y) * width + px * patch + x);
  return idx;
}

}  // namespace

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  check_image(image, patch_size);
  const auto h = image.dim(1), w = image.dim(2);
  const auto idx = patch_index_map(h, w, patch_size);
  const auto n = (h / patch_size) * (w / patch_size);
  return ops::reshape(ops::gather(image, idx), {n, 3 * patch_size * patch_size});
}

Tensor unpatchify(const Tensor& patches, std::size_t patch_size, std::size_t height, std::size_t width) {
  if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0) {
    throw DimensionError("unpatchify: size not divisible by patch size");
  }
  const auto forward = patch_index_map(height, width, patch_size);
  if (patches.numel() != forward.size()) {
    throw DimensionError("unpatchify: " + shape_to_string(patches.shape()) + " does not hold a 3x" +
                         std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) inverse[forward[i]] = i;
  return ops::reshape(ops::gather(patches, inverse), {3, height, width});
}

Tensor embed(const Tensor& patches, const ViTParams& params) {
  return ops::linear(patches, params.embed_w, params.embed_b);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: incompatible Q/K/V shapes " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt_d);
  return ops::matmul(ops::softmax(scores, 1), v);
}

Tensor multi_head_attention(const Tensor& x, const BlockParams& block, std::size_t heads) {
  auto q = ops::matmul(x, block.wq);
  auto k = ops::matmul(x, block.wk);
  auto v = ops::matmul(x, block.wv);
  if (heads == 1) return ops::add_row_vector(ops::matmul(attention(q, k, v), block.wo), block.bo);
  const auto dk = q.dim(1) / heads, dv = v.dim(1) / heads;
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(attention(ops::slice(q, 1, h * dk, dk), ops::slice(k, 1, h * dk, dk), ops::slice(v, 1, h * dv, dv)));
  }
  return ops::add_row_vector(ops::matmul(ops::concat(outs, 1), block.wo), block.bo);
}

Tensor transformer_block(const Tensor& x, const BlockParams& block, std::size_t heads) {
  auto attn = multi_head_attention(ops::layer_norm(x, block.ln1_gamma, block.ln1_beta), block, heads);
  auto mid = ops::add(attn, x);
  auto hidden = ops::gelu(ops::linear(ops::layer_norm(mid, block.ln2_gamma, block.ln2_beta), block.w1, block.b1));
  return ops::add(ops::linear(hidden, block.w2, block.b2), mid);
}

Tensor embed_tokens(const Tensor& image, const ViTParams& params, const ViTConfig& config) {
  if (image.rank() != 3 || image.dim(1) != config.image_size || image.dim(2) != config.image_size) {
    throw DimensionError("image " + shape_to_string(image.shape()) + " does not match configured size " +
                         std::to_string(config.image_size));
  }
  auto tokens = embed(patchify(image, config.patch_size), params);
  const Tensor parts[] = {ops::reshape(params.cls_token, {1, config.channels}), tokens};
  return ops::add(ops::concat(parts, 0), params.pos_embed);
}

PlainForward plain_forward(const Tensor& image, const ViTParams& params, const ViTConfig& config) {
  PlainForward out;
  out.states.push_back(embed_tokens(image, params, config));
  for (const auto& block : params.blocks) {
    out.states.push_back(transformer_block(out.states.back(), block, config.heads));
  }
  const auto& last = out.states.back();
  out.patch_tokens = ops::slice(last, 0, 1, config.num_patches());
  out.class_token = ops::reshape(ops::slice(last, 0, 0, 1), {config.channels});
  return out;
}

}  // namespace fptrans::vit
