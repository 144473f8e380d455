#include "fptrans/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fptrans/errors.hpp"

namespace fptrans {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
  std::vector<std::size_t> all(x.numel());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return finite_difference_gradient(f, std::move(x), all, h);
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                                  std::span<const std::size_t> coords, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_difference_gradient: h must be positive");
  auto buf = x.mutable_data();
  std::vector<double> out(buf.size(), 0.0);
  for (auto i : coords) {
    if (i >= buf.size()) throw DimensionError("finite_difference_gradient: coordinate out of range");
    const double saved = buf[i];
    buf[i] = saved + h;
    const double up = f(x);
    buf[i] = saved - h;
    const double down = f(x);
    buf[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          std::span<const std::size_t> coords, double floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("max_relative_error: length mismatch");
  double worst = 0.0;
  auto visit = [&](std::size_t i) { worst = std::max(worst, relative_error(analytic[i], numeric[i], floor)); };
  if (coords.empty()) {
    for (std::size_t i = 0; i < analytic.size(); ++i) visit(i);
  } else {
    for (auto i : coords) visit(i);
  }
  return worst;
}

}  // namespace fptrans
