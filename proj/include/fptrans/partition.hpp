#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <vector>

#include "fptrans/mask.hpp"
#include "fptrans/random.hpp"

// Voronoi partition of a support background into local regions: seeds are
// picked by farthest-point sampling, then every background pixel joins its
// nearest seed. Distances are squared Euclidean on (row, col); every tie goes
// to the lowest index (row-major for candidates, seed order for regions).
namespace fptrans::partition {

struct Position {
  int row = 0;
  int col = 0;

  friend auto operator<=>(const Position&, const Position&) = default;
};

inline long long squared_distance(Position a, Position b) {
  const long long dr = a.row - b.row, dc = a.col - b.col;
  return dr * dr + dc * dc;
}

struct PartitionResult {
  std::vector<Position> seeds;
  std::vector<Mask> masks;  // one per seed, pairwise disjoint, union = background
  std::size_t requested_regions = 0;

  std::size_t effective_regions() const { return seeds.size(); }
  /// Fewer regions than requested (small or empty background).
  bool degenerate() const { return seeds.size() < requested_regions; }
};

/// Coordinates where the mask is 0, in row-major order.
std::vector<Position> collect_background_positions(const Mask& mask);

/// First seed uniform over `candidates`, then repeated farthest-point picks.
/// Throws PartitionInfeasible when count > candidates.size().
std::vector<Position> farthest_point_sample(std::span<const Position> candidates, std::size_t count, Rng& rng);

/// Farthest-point sampling with a fixed first seed (index into candidates).
std::vector<Position> farthest_point_sample_from(std::span<const Position> candidates, std::size_t count,
                                                 std::size_t first_index);

/// Nearest-seed label for every candidate.
std::vector<std::size_t> voronoi_assign(std::span<const Position> candidates, std::span<const Position> seeds);

/// Splits the background of `mask` into up to `regions` Voronoi cells. When
/// the background has fewer pixels than `regions`, every background pixel
/// becomes a seed; an empty background yields an empty result.
PartitionResult partition(const Mask& mask, std::size_t regions, Rng& rng);

/// Majority-vote downsampling: a target cell is 1 iff strictly more than half
/// of its source pixels are 1. Sizes must divide evenly.
Mask downsample_mask(const Mask& mask, std::size_t height, std::size_t width);

}  // namespace fptrans::partition
