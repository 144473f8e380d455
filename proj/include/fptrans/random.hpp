#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fptrans/tensor.hpp"

namespace fptrans {

using Rng = std::mt19937_64;

/// Independent stream seeds derived from one master seed.
enum class Stream : std::uint64_t {
  kDataset = 1,
  kInit = 2,
  kTrainEpisodes = 3,
  kEvalEpisodes = 4,
};

std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index = 0);
Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t index = 0);

/// Normal(0, std) resampled until |x| <= 2 std.
Tensor truncated_normal(Shape shape, double std, Rng& rng, bool requires_grad = true);

}  // namespace fptrans
