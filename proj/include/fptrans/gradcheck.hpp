#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "fptrans/tensor.hpp"

namespace fptrans {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every
/// coordinate of `x`. `x` must be a leaf; its buffer is perturbed in place
/// and restored exactly, so `f` may read it through any alias.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-4);

/// Same, restricted to the listed flat coordinates; other entries are 0.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                                  std::span<const std::size_t> coords, double h = 1e-4);

/// Denominator floor for relative errors: gradients smaller than this are
/// compared absolutely, since central differences carry O(h^2) truncation
/// error that swamps tiny magnitudes.
inline constexpr double kRelativeErrorFloor = 1e-6;

/// |a - b| / max(|a|, |b|, floor)
double relative_error(double analytic, double numeric, double floor = kRelativeErrorFloor);

/// Largest elementwise relative error over `coords` (all when empty).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          std::span<const std::size_t> coords = {}, double floor = kRelativeErrorFloor);

}  // namespace fptrans
