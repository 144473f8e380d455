#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fptrans {

/// Binary H x W grid, row-major, values in {0, 1}.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint8_t at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
  std::uint8_t& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  std::size_t size() const { return values.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : values) n += v;
    return n;
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

}  // namespace fptrans
