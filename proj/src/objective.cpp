#include "fptrans/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fptrans/errors.hpp"
#include "fptrans/ops.hpp"

namespace fptrans::objective {

namespace {

Tensor flatten_map(const Tensor& map) {
  if (map.rank() != 3) throw DimensionError("expected an [h x w x C] feature map, got " + shape_to_string(map.shape()));
  return ops::reshape(map, {map.dim(0) * map.dim(1), map.dim(2)});
}

void check_labels(const Tensor& map, const Mask& labels, const char* what) {
  if (labels.height != map.dim(0) || labels.width != map.dim(1)) {
    throw DimensionError(std::string(what) + ": labels " + std::to_string(labels.height) + "x" +
                         std::to_string(labels.width) + " do not match features " + shape_to_string(map.shape()));
  }
}

}  // namespace

void LossConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  if (!(pair_weight >= 0)) throw ConfigError("pair_weight must be nonnegative");
}

Tensor probability_from_similarities(const Tensor& similarities, double temperature) {
  if (similarities.rank() != 2) {
    throw DimensionError("probability_from_similarities: expected [M x (1+n)], got " +
                         shape_to_string(similarities.shape()));
  }
  const auto m = similarities.dim(0), cols = similarities.dim(1);
  auto fg = ops::reshape(ops::slice(similarities, 1, 0, 1), {m});
  if (cols == 1) return ops::sigmoid(ops::scale(fg, 1.0 / temperature));
  auto bg_max = ops::max_axis(ops::slice(similarities, 1, 1, cols - 1), 1);
  return ops::sigmoid(ops::scale(ops::sub(fg, bg_max), 1.0 / temperature));
}

Tensor foreground_probability(const Tensor& features, const model::ProxySet& proxies, double temperature) {
  return probability_from_similarities(ops::cosine_matrix(features, proxies.stacked()), temperature);
}

Tensor binary_cross_entropy(const Tensor& probabilities, std::span<const double> targets) {
  if (probabilities.rank() != 1 || probabilities.dim(0) != targets.size()) {
    throw DimensionError("binary_cross_entropy: probabilities " + shape_to_string(probabilities.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const auto n = targets.size();
  std::vector<double> neg_targets(n);
  for (std::size_t i = 0; i < n; ++i) neg_targets[i] = 1.0 - targets[i];
  auto y = Tensor::from_data({n}, std::vector<double>(targets.begin(), targets.end()));
  auto not_y = Tensor::from_data({n}, std::move(neg_targets));
  auto p = ops::clamp(probabilities, kProbabilityClamp, 1.0 - kProbabilityClamp);
  auto log_p = ops::log(p);
  auto log_not_p = ops::log(ops::add_scalar(ops::neg(p), 1.0));
  return ops::neg(ops::mean(ops::add(ops::mul(y, log_p), ops::mul(not_y, log_not_p))));
}

Tensor classification_loss(const Tensor& query_features, const model::ProxySet& proxies, const Mask& labels,
                           double temperature) {
  auto flat = flatten_map(query_features);
  check_labels(query_features, labels, "classification_loss");
  std::vector<double> targets(labels.values.begin(), labels.values.end());
  return binary_cross_entropy(foreground_probability(flat, proxies, temperature), targets);
}

Tensor pairwise_loss(const Tensor& query_features, std::span<const Tensor> support_features,
                     const Mask& query_labels, std::span<const Mask> support_labels, double temperature,
                     std::size_t limit, Rng* rng) {
  if (support_features.empty() || support_features.size() != support_labels.size()) {
    throw DimensionError("pairwise_loss: need one label mask per support feature map");
  }
  auto query = flatten_map(query_features);
  check_labels(query_features, query_labels, "pairwise_loss");

  std::vector<Tensor> support_rows;
  std::vector<std::uint8_t> support_y;
  for (std::size_t k = 0; k < support_features.size(); ++k) {
    check_labels(support_features[k], support_labels[k], "pairwise_loss");
    support_rows.push_back(flatten_map(support_features[k]));
    support_y.insert(support_y.end(), support_labels[k].values.begin(), support_labels[k].values.end());
  }
  auto support = support_rows.size() == 1 ? support_rows.front() : ops::concat(support_rows, 0);

  const auto mq = query.dim(0), ms = support.dim(0);
  std::vector<std::size_t> pairs;
  for (std::size_t i = 0; i < mq; ++i)
    for (std::size_t j = 0; j < ms; ++j)
      if (query_labels.values[i] + support_y[j] >= 1) pairs.push_back(i * ms + j);
  if (pairs.empty()) throw EpisodeInvalid("pairwise loss has no pair with a foreground member");

  if (limit > 0 && pairs.size() > limit) {
    if (rng == nullptr) throw std::invalid_argument("pairwise_loss: subsampling requires an rng");
    // Partial Fisher-Yates, then restore index order.
    for (std::size_t i = 0; i < limit; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pairs.size() - 1);
      std::swap(pairs[i], pairs[pick(*rng)]);
    }
    pairs.resize(limit);
    std::sort(pairs.begin(), pairs.end());
  }

  std::vector<double> targets(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto i = pairs[p] / ms, j = pairs[p] % ms;
    targets[p] = query_labels.values[i] == support_y[j] ? 1.0 : 0.0;
  }
  auto logits = ops::scale(ops::cosine_matrix(query, support), 1.0 / temperature);
  return binary_cross_entropy(ops::sigmoid(ops::gather(logits, pairs)), targets);
}

Tensor total_loss(const Tensor& ce, const Tensor& ce_prompt, const Tensor& pair, double pair_weight) {
  const std::pair<const char*, const Tensor*> parts[] = {{"ce", &ce}, {"ce_prompt", &ce_prompt}, {"pair", &pair}};
  for (const auto& [name, t] : parts) {
    if (!std::isfinite(t->item())) {
      throw DivergenceError(std::string("loss component '") + name + "' is not finite (" +
                            std::to_string(t->item()) + ")");
    }
  }
  return ops::add(ops::add(ce, ce_prompt), ops::scale(pair, pair_weight));
}

Tensor probability_map(const Tensor& query_features, const model::ProxySet& proxies, double temperature) {
  NoGradGuard no_grad;
  auto probs = foreground_probability(flatten_map(query_features), proxies, temperature);
  return ops::reshape(probs, {query_features.dim(0), query_features.dim(1)});
}

Mask predict_mask(const Tensor& query_features, const model::ProxySet& proxies, double temperature,
                  std::size_t out_h, std::size_t out_w) {
  NoGradGuard no_grad;
  auto probs = probability_map(query_features, proxies, temperature);
  auto up = ops::bilinear_resize(ops::reshape(probs, {probs.dim(0), probs.dim(1), 1}), out_h, out_w);
  Mask mask(out_h, out_w);
  const auto v = up.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask.values[i] = v[i] > 0.5 ? 1 : 0;
  return mask;
}

}  // namespace fptrans::objective
