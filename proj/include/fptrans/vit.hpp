#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fptrans/random.hpp"
#include "fptrans/tensor.hpp"

namespace fptrans::vit {

struct ViTConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 32;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t key_dim = 32;
  std::size_t value_dim = 32;

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_length() const { return 3 * patch_size * patch_size; }
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv;  // [C x d_k], [C x d_k], [C x d_v]
  Tensor wo, bo;      // [d_v x C], [C]
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1;  // [C x hidden]
  Tensor w2, b2;  // [hidden x C]
};

struct ViTParams {
  Tensor embed_w;    // [3P^2 x C]
  Tensor embed_b;    // [C]
  Tensor pos_embed;  // [(N+1) x C]
  Tensor cls_token;  // [C]
  std::vector<BlockParams> blocks;

  static ViTParams init(const ViTConfig& config, Rng& rng);
  NamedTensors named_parameters(const std::string& prefix) const;
  /// Deep copy with fresh leaves (no shared storage).
  ViTParams clone() const;
};

/// Number of scalar parameters implied by a config.
std::size_t parameter_count(const ViTConfig& config);

/// image[3 x H x W] -> [N x 3P^2], patches in row-major order, each flattened
/// channel-major (c, y, x). Differentiable.
Tensor patchify(const Tensor& image, std::size_t patch_size);
/// Inverse of patchify for a square grid.
Tensor unpatchify(const Tensor& patches, std::size_t patch_size, std::size_t height, std::size_t width);

/// Linear projection of flattened patches: [N x 3P^2] -> [N x C].
Tensor embed(const Tensor& patches, const ViTParams& params);

/// Softmax(Q K^T / sqrt(d)) V with d = key dim of Q.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Heads split the channels of Q/K/V evenly; outputs are concatenated and
/// projected by W_O.
Tensor multi_head_attention(const Tensor& x, const BlockParams& block, std::size_t heads);

/// Pre-norm block: X' = MSA(LN(X)) + X; out = MLP(LN(X')) + X'.
Tensor transformer_block(const Tensor& x, const BlockParams& block, std::size_t heads);

/// [x_cls, Embed(patches)] + E_pos, shape [(N+1) x C].
Tensor embed_tokens(const Tensor& image, const ViTParams& params, const ViTConfig& config);

struct PlainForward {
  std::vector<Tensor> states;  // X^0 .. X^L, each [(N+1) x C], row 0 is the class token
  Tensor patch_tokens;         // rows 1..N of X^L
  Tensor class_token;          // row 0 of X^L, shape [C]
};

PlainForward plain_forward(const Tensor& image, const ViTParams& params, const ViTConfig& config);

}  // namespace fptrans::vit
