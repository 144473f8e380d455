#include "fptrans/random.hpp"

#include <cmath>

namespace fptrans {

std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t index) {
  return Rng(derive_seed(master, stream, index));
}

Tensor truncated_normal(Shape shape, double std, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) {
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * std);
  }
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace fptrans
