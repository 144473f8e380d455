#include "fptrans/partition.hpp"

#include <limits>
#include <string>

#include "fptrans/errors.hpp"

namespace fptrans::partition {

std::vector<Position> collect_background_positions(const Mask& mask) {
  std::vector<Position> out;
  for (std::size_t r = 0; r < mask.height; ++r)
    for (std::size_t c = 0; c < mask.width; ++c)
      if (mask.at(r, c) == 0) out.push_back({static_cast<int>(r), static_cast<int>(c)});
  return out;
}

std::vector<Position> farthest_point_sample_from(std::span<const Position> candidates, std::size_t count,
                                                 std::size_t first_index) {
  if (count > candidates.size()) {
    throw PartitionInfeasible("cannot pick " + std::to_string(count) + " seeds from " +
                              std::to_string(candidates.size()) + " background positions");
  }
  if (count == 0) return {};
  if (first_index >= candidates.size()) throw std::out_of_range("farthest_point_sample_from: first index");

  std::vector<Position> seeds{candidates[first_index]};
  // Running min distance from each candidate to the chosen seeds.
  std::vector<long long> nearest(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) nearest[i] = squared_distance(candidates[i], seeds[0]);

  while (seeds.size() < count) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
      if (nearest[i] > nearest[best]) best = i;
    }
    seeds.push_back(candidates[best]);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(candidates[i], candidates[best]));
    }
  }
  return seeds;
}

std::vector<Position> farthest_point_sample(std::span<const Position> candidates, std::size_t count, Rng& rng) {
  if (count > candidates.size()) {
    throw PartitionInfeasible("cannot pick " + std::to_string(count) + " seeds from " +
                              std::to_string(candidates.size()) + " background positions");
  }
  if (count == 0) return {};
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return farthest_point_sample_from(candidates, count, pick(rng));
}

std::vector<std::size_t> voronoi_assign(std::span<const Position> candidates, std::span<const Position> seeds) {
  if (seeds.empty()) throw std::invalid_argument("voronoi_assign: no seeds");
  std::vector<std::size_t> labels(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    long long best = std::numeric_limits<long long>::max();
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto d = squared_distance(candidates[i], seeds[s]);
      if (d < best) {
        best = d;
        labels[i] = s;
      }
    }
  }
  return labels;
}

PartitionResult partition(const Mask& mask, std::size_t regions, Rng& rng) {
  PartitionResult result;
  result.requested_regions = regions;
  const auto background = collect_background_positions(mask);
  if (background.empty() || regions == 0) return result;

  const auto effective = std::min(regions, background.size());
  result.seeds = farthest_point_sample(background, effective, rng);
  const auto labels = voronoi_assign(background, result.seeds);
  result.masks.assign(effective, Mask(mask.height, mask.width));
  for (std::size_t i = 0; i < background.size(); ++i) {
    result.masks[labels[i]].at(background[i].row, background[i].col) = 1;
  }
  return result;
}

Mask downsample_mask(const Mask& mask, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || mask.height % height != 0 || mask.width % width != 0) {
    throw DimensionError("cannot downsample a " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " mask to " + std::to_string(height) + "x" + std::to_string(width));
  }
  const auto fy = mask.height / height, fx = mask.width / width;
  Mask out(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      std::size_t ones = 0;
      for (std::size_t y = 0; y < fy; ++y)
        for (std::size_t x = 0; x < fx; ++x) ones += mask.at(r * fy + y, c * fx + x);
      out.at(r, c) = 2 * ones > fy * fx ? 1 : 0;
    }
  }
  return out;
}

}  // namespace fptrans::partition
