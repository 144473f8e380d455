#pragma once

// Brute-force reference implementations, written as plain loops over
// std::vector so they share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fptrans/mask.hpp"
#include "fptrans/random.hpp"

namespace oracle {

struct Partition {
  std::vector<std::pair<int, int>> seeds;
  std::vector<std::vector<std::uint8_t>> masks;
};

/// Farthest-point seeds by exhaustive search, then nearest-seed labels by
/// exhaustive search. The first seed consumes the rng exactly as the
/// library does (one uniform index over the row-major background list).
inline Partition partition(const fptrans::Mask& mask, std::size_t regions, fptrans::Rng& rng) {
  std::vector<std::pair<int, int>> bg;
  for (std::size_t r = 0; r < mask.height; ++r)
    for (std::size_t c = 0; c < mask.width; ++c)
      if (mask.at(r, c) == 0) bg.emplace_back(static_cast<int>(r), static_cast<int>(c));
  Partition out;
  if (bg.empty() || regions == 0) return out;
  const auto s = std::min(regions, bg.size());
  auto d2 = [](std::pair<int, int> a, std::pair<int, int> b) {
    return (a.first - b.first) * (a.first - b.first) + (a.second - b.second) * (a.second - b.second);
  };
  std::uniform_int_distribution<std::size_t> pick(0, bg.size() - 1);
  out.seeds.push_back(bg[pick(rng)]);
  while (out.seeds.size() < s) {
    long best = -1;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < bg.size(); ++i) {
      long nearest = -1;
      for (auto seed : out.seeds) {
        const long d = d2(bg[i], seed);
        if (nearest < 0 || d < nearest) nearest = d;
      }
      if (nearest > best) {
        best = nearest;
        best_i = i;
      }
    }
    out.seeds.push_back(bg[best_i]);
  }
  out.masks.assign(s, std::vector<std::uint8_t>(mask.size(), 0));
  for (auto p : bg) {
    std::size_t label = 0;
    for (std::size_t n = 1; n < s; ++n)
      if (d2(p, out.seeds[n]) < d2(p, out.seeds[label])) label = n;
    out.masks[label][static_cast<std::size_t>(p.first) * mask.width + static_cast<std::size_t>(p.second)] = 1;
  }
  return out;
}

/// Mean of the rows of a row-major [M x C] array selected by a flat mask.
inline std::vector<double> masked_mean(const std::vector<double>& f, std::size_t channels,
                                       const std::vector<std::uint8_t>& mask) {
  std::vector<double> sum(channels, 0.0);
  double count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    count += 1;
    for (std::size_t c = 0; c < channels; ++c) sum[c] += f[i * channels + c];
  }
  for (auto& v : sum) v /= count;
  return sum;
}

inline double cosine(const double* a, const double* b, std::size_t n, double eps = 1e-8) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
}

/// Pairwise BCE over every (query, support) pair with a foreground member.
inline double pairwise_loss(const std::vector<double>& q, const std::vector<std::uint8_t>& qy,
                            const std::vector<double>& s, const std::vector<std::uint8_t>& sy, std::size_t channels,
                            double tau) {
  double total = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < qy.size(); ++i) {
    for (std::size_t j = 0; j < sy.size(); ++j) {
      if (qy[i] + sy[j] < 1) continue;
      const double logit = cosine(&q[i * channels], &s[j * channels], channels) / tau;
      double p = 1.0 / (1.0 + std::exp(-logit));
      p = std::clamp(p, 1e-7, 1.0 - 1e-7);
      const double y = qy[i] == sy[j] ? 1.0 : 0.0;
      total += -(y * std::log(p) + (1 - y) * std::log(1 - p));
      pairs += 1;
    }
  }
  return total / pairs;
}

inline fptrans::Mask random_mask(std::size_t h, std::size_t w, double p_fg, fptrans::Rng& rng) {
  std::bernoulli_distribution fg(p_fg);
  fptrans::Mask m(h, w);
  for (auto& v : m.values) v = fg(rng) ? 1 : 0;
  return m;
}

}  // namespace oracle
