#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fptrans/tensor.hpp"

// Differentiable kernels. Shapes are never broadcast implicitly: apart from
// tensor-scalar arithmetic every alignment goes through a named op
// (add_row_vector, repeat_rows, ...). All ops throw DimensionError on
// mismatched shapes.
namespace fptrans::ops {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kCosineEps = 1e-8;

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Tensor-scalar.
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// Gradient passes where lo <= x <= hi, zero elsewhere.
Tensor clamp(const Tensor& x, double lo, double hi);

/// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// x[m x n] + v[n] added to every row.
Tensor add_row_vector(const Tensor& x, const Tensor& v);
/// v[n] -> [count x n]
Tensor repeat_rows(const Tensor& v, std::size_t count);
/// x[m x k] * w[k x n] + b[n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Numerically stable softmax (max-subtracted) along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last dimension, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);

/// Scalar reductions (result shape []).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reductions that drop `axis`.
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
/// Maximum along `axis`; the gradient goes entirely to the argmax, lowest
/// index on ties.
Tensor max_axis(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes);
/// Picks flat elements: result[i] = x.data()[indices[i]], shape [indices.size()].
Tensor gather(const Tensor& x, std::span<const std::size_t> indices);

/// Rows divided by max(||row||, eps).
Tensor row_normalize(const Tensor& x, double eps = kCosineEps);
/// a.b / (max(||a||,eps) * max(||b||,eps)) for two length-C vectors; shape [].
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = kCosineEps);
/// Cosine similarity of every row of a[m x C] with every row of b[n x C].
Tensor cosine_matrix(const Tensor& a, const Tensor& b, double eps = kCosineEps);

// Spatial maps are channels-last: [H x W x C].

/// Bilinear interpolation with half-pixel centers (align_corners = false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// 1x1 convolution; w[Cin x Cout], b[Cout].
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);
/// 2x2 stride-2 transposed convolution; w[2 x 2 x Cin x Cout], b[Cout]
/// -> [2H x 2W x Cout].
Tensor transposed_conv_2x2(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace fptrans::ops
