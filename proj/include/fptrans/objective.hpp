#pragma once

#include <cstddef>
#include <span>

#include "fptrans/mask.hpp"
#include "fptrans/model.hpp"
#include "fptrans/random.hpp"
#include "fptrans/tensor.hpp"

namespace fptrans::objective {

/// Probabilities are clamped to [kProbabilityClamp, 1 - kProbabilityClamp]
/// before taking logs.
inline constexpr double kProbabilityClamp = 1e-7;

struct LossConfig {
  double temperature = 0.1;
  double pair_weight = 2e-2;
  /// Max qualifying pairs per episode; 0 keeps all of them.
  std::size_t pair_subsample_limit = 65536;

  void validate() const;
};

/// Foreground probability from a similarity table [M x (1 + n)] whose first
/// column is sim(F, u_f) and the rest sim(F, u_n):
///   exp(s_f / t) / (exp(s_f / t) + max_n exp(s_n / t)) = sigmoid((s_f - max_n s_n) / t).
/// With n = 0 the background term is dropped and the result is sigmoid(s_f / t).
/// Returns [M].
Tensor probability_from_similarities(const Tensor& similarities, double temperature);

/// Per-row foreground probability of features[M x C] against `proxies`.
Tensor foreground_probability(const Tensor& features, const model::ProxySet& proxies, double temperature);

/// Mean binary cross-entropy of probabilities [M] against {0, 1} targets.
Tensor binary_cross_entropy(const Tensor& probabilities, std::span<const double> targets);

/// Mean per-position cross-entropy of the query map [h x w x C] classified
/// against `proxies`; labels at the same h x w resolution.
Tensor classification_loss(const Tensor& query_features, const model::ProxySet& proxies, const Mask& labels,
                           double temperature);

/// Pairwise loss over all (query i, support j) pairs with at least one
/// foreground label; target 1 when the labels agree. Pairs from all shots
/// are pooled. With limit > 0 and more qualifying pairs than `limit`, a
/// uniform subset of `limit` pairs drawn from `rng` is used. Throws
/// EpisodeInvalid when no pair qualifies.
Tensor pairwise_loss(const Tensor& query_features, std::span<const Tensor> support_features,
                     const Mask& query_labels, std::span<const Mask> support_labels, double temperature,
                     std::size_t limit = 0, Rng* rng = nullptr);

struct LossBreakdown {
  Tensor total;
  Tensor ce;         // feature-based proxies
  Tensor ce_prompt;  // prompt-based proxies
  Tensor pair;
};

/// ce + ce_prompt + weight * pair. Throws DivergenceError naming the first
/// non-finite component.
Tensor total_loss(const Tensor& ce, const Tensor& ce_prompt, const Tensor& pair, double pair_weight);

/// Probability map [h x w] of the query features (no graph recorded).
Tensor probability_map(const Tensor& query_features, const model::ProxySet& proxies, double temperature);

/// Bilinearly upsamples the probability map to out_h x out_w and marks
/// foreground where it is strictly above 0.5.
Mask predict_mask(const Tensor& query_features, const model::ProxySet& proxies, double temperature,
                  std::size_t out_h, std::size_t out_w);

}  // namespace fptrans::objective
