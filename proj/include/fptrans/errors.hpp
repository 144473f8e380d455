#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fptrans {

/// Shapes that do not line up (matmul inner dims, indivisible grids, ...).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fewer background positions than requested seeds.
class PartitionInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The episode cannot be used (empty foreground, no qualifying pairs).
/// Training resamples when it sees this.
class EpisodeInvalid : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A loss component or gradient became NaN/Inf.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fptrans
