#include "fptrans/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fptrans/errors.hpp"

namespace fptrans::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using detail::Node;

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
std::vector<double>& input_grad(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }
const std::vector<double>& input_data(const Node& self, std::size_t i) { return self.inputs[i]->data; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(x.shape()));
  }
}

void require_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_to_string(x.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

// Applies f elementwise; backward multiplies the upstream gradient by
// dfdx(x, y).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    auto& gx = input_grad(self, 0);
    const auto& xs = input_data(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(xs[i], self.data[i]);
  });
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      auto& g = input_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = input_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& xa = input_data(self, 0);
    const auto& xb = input_data(self, 1);
    if (wants(self, 0)) {
      auto& g = input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xb[i];
    }
    if (wants(self, 1)) {
      auto& g = input_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xa[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    ConstMap g(self.grad.data(), m, n);
    if (wants(self, 0)) {
      MutMap(input_grad(self, 0).data(), m, k).noalias() += g * ConstMap(input_data(self, 1).data(), k, n).transpose();
    }
    if (wants(self, 1)) {
      MutMap(input_grad(self, 1).data(), k, n).noalias() += ConstMap(input_data(self, 0).data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  return Tensor::make_result({n, m}, std::move(out), {x}, [m, n](Node& self) {
    MutMap(input_grad(self, 0).data(), m, n) += ConstMap(self.grad.data(), n, m).transpose();
  });
}

Tensor add_row_vector(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "add_row_vector");
  require_rank(v, 1, "add_row_vector");
  if (x.dim(1) != v.dim(0)) {
    throw DimensionError("add_row_vector: " + shape_to_string(x.shape()) + " vs " + shape_to_string(v.shape()));
  }
  const auto m = x.dim(0), n = x.dim(1);
  const auto xs = x.data(), vs = v.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xs[i * n + j] + vs[j];
  return Tensor::make_result(x.shape(), std::move(out), {x, v}, [m, n](Node& self) {
    if (wants(self, 0)) {
      auto& g = input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = input_grad(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor repeat_rows(const Tensor& v, std::size_t count) {
  require_rank(v, 1, "repeat_rows");
  if (count == 0) throw DimensionError("repeat_rows: count must be positive");
  const auto n = v.dim(0);
  const auto vs = v.data();
  std::vector<double> out(count * n);
  for (std::size_t r = 0; r < count; ++r) std::copy(vs.begin(), vs.end(), out.begin() + r * n);
  return Tensor::make_result({count, n}, std::move(out), {v}, [count, n](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row_vector(matmul(x, w), b); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_axis(x, axis, "softmax");
  const auto s = split_axis(x.shape(), axis);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(in[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [s](Node& self) {
    auto& gx = input_grad(self, 0);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const auto idx = base + k * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const auto n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma/beta " + shape_to_string(gamma.shape()) + "/" +
                         shape_to_string(beta.shape()) + " do not match last dim of " + shape_to_string(x.shape()));
  }
  const auto rows = x.numel() / n;
  const auto in = x.data(), gm = gamma.data(), bt = beta.data();
  std::vector<double> out(in.size()), xhat(in.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = gm[j] * h + bt[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& g = self.grad;
        const auto& gm = input_data(self, 1);
        if (wants(self, 1)) {
          auto& gg = input_grad(self, 1);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
        }
        if (wants(self, 2)) {
          auto& gb = input_grad(self, 2);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        }
        if (wants(self, 0)) {
          auto& gx = input_grad(self, 0);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[r * n + j] * gm[j];
              mean_d += d;
              mean_dh += d * xhat[r * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dh /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[r * n + j] * gm[j];
              gx[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dh);
            }
          }
        }
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result({}, {total}, {x}, [](Node& self) {
    auto& g = input_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  require_axis(x, axis, "sum_axis");
  const auto s = split_axis(x.shape(), axis);
  const auto in = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.extent + k) * s.inner + i];
  return Tensor::make_result(drop_axis(x.shape(), axis), std::move(out), {x}, [s](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.extent; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.extent + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  require_axis(x, axis, "mean_axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor max_axis(const Tensor& x, std::size_t axis) {
  require_axis(x, axis, "max_axis");
  const auto s = split_axis(x.shape(), axis);
  const auto in = x.data();
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.extent * s.inner + i;
      for (std::size_t k = 1; k < s.extent; ++k) {
        const auto idx = (o * s.extent + k) * s.inner + i;
        if (in[idx] > in[best]) best = idx;
      }
      out[o * s.inner + i] = in[best];
      arg[o * s.inner + i] = best;
    }
  }
  return Tensor::make_result(drop_axis(x.shape(), axis), std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  const auto in = x.data();
  return Tensor::make_result(std::move(shape), std::vector<double>(in.begin(), in.end()), {x}, [](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_to_string(ref));
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const auto& sh = p.shape();
    bool ok = sh.size() == ref.size();
    for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = (i == axis) || sh[i] == ref[i];
    if (!ok) throw DimensionError("concat: " + shape_to_string(sh) + " incompatible with " + shape_to_string(ref));
    extents.push_back(sh[axis]);
    total += sh[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const auto s = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto in = parts[p].data();
    const auto n = extents[p];
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(in.begin() + o * n * s.inner, n * s.inner, out.begin() + (o * total + offset) * s.inner);
    }
    offset += n;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result(std::move(out_shape), std::move(out), std::move(inputs),
                             [s, total, extents = std::move(extents)](Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t p = 0; p < extents.size(); ++p) {
                                 const auto n = extents[p];
                                 if (wants(self, p)) {
                                   auto& g = input_grad(self, p);
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                     for (std::size_t e = 0; e < n * s.inner; ++e)
                                       g[o * n * s.inner + e] += self.grad[(o * total + offset) * s.inner + e];
                                 }
                                 offset += n;
                               }
                             });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_axis(x, axis, "slice");
  if (length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for " + shape_to_string(x.shape()));
  }
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto in = x.data();
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.begin() + (o * s.extent + start) * s.inner, length * s.inner, out.begin() + o * length * s.inner);
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [s, start, length](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < length * s.inner; ++e)
        g[(o * s.extent + start) * s.inner + e] += self.grad[o * length * s.inner + e];
  });
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes) {
  std::vector<Tensor> out;
  std::size_t start = 0;
  for (auto n : sizes) {
    out.push_back(slice(x, axis, start, n));
    start += n;
  }
  if (start != x.dim(axis)) {
    throw DimensionError("split: sizes sum to " + std::to_string(start) + " but axis has " +
                         std::to_string(x.dim(axis)));
  }
  return out;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices) {
  const auto in = x.data();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= in.size()) throw DimensionError("gather: index out of range");
    out[i] = in[indices[i]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const auto n = idx.size();
  return Tensor::make_result({n}, std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor row_normalize(const Tensor& x, double eps) {
  require_rank(x, 2, "row_normalize");
  const auto m = x.dim(0), n = x.dim(1);
  const auto in = x.data();
  std::vector<double> out(in.size()), denom(m);
  std::vector<char> clipped(m);
  for (std::size_t r = 0; r < m; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) sq += in[r * n + j] * in[r * n + j];
    const double norm = std::sqrt(sq);
    clipped[r] = norm <= eps;
    denom[r] = clipped[r] ? eps : norm;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[r * n + j] / denom[r];
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x},
      [m, n, denom = std::move(denom), clipped = std::move(clipped)](Node& self) {
        auto& gx = input_grad(self, 0);
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t r = 0; r < m; ++r) {
          double dot = 0.0;
          if (!clipped[r]) {
            for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) / denom[r];
        }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  require_rank(a, 1, "cosine_similarity");
  require_same_shape(a, b, "cosine_similarity");
  const Shape row{1, a.dim(0)};
  return reshape(cosine_matrix(reshape(a, row), reshape(b, row), eps), {});
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b, double eps) {
  require_rank(a, 2, "cosine_matrix");
  require_rank(b, 2, "cosine_matrix");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("cosine_matrix: feature dims differ " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  return matmul(row_normalize(a, eps), transpose(row_normalize(b, eps)));
}

namespace {

struct Lerp {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

std::vector<Lerp> lerp_table(std::size_t in, std::size_t out) {
  std::vector<Lerp> t(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const auto hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    t[i] = {lo, hi, 1.0 - frac, frac};
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize: empty output size");
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto rows = lerp_table(h, out_h);
  auto cols = lerp_table(w, out_w);
  const auto in = x.data();
  std::vector<double> out(out_h * out_w * c, 0.0);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const Lerp& r = rows[i];
      const Lerp& q = cols[j];
      const std::size_t taps[4] = {r.lo * w + q.lo, r.lo * w + q.hi, r.hi * w + q.lo, r.hi * w + q.hi};
      const double wts[4] = {r.w_lo * q.w_lo, r.w_lo * q.w_hi, r.w_hi * q.w_lo, r.w_hi * q.w_hi};
      double* dst = out.data() + (i * out_w + j) * c;
      for (int t = 0; t < 4; ++t) {
        const double* src = in.data() + taps[t] * c;
        for (std::size_t k = 0; k < c; ++k) dst[k] += wts[t] * src[k];
      }
    }
  }
  return Tensor::make_result({out_h, out_w, c}, std::move(out), {x},
                             [w, c, out_h, out_w, rows = std::move(rows), cols = std::move(cols)](Node& self) {
                               auto& gx = input_grad(self, 0);
                               for (std::size_t i = 0; i < out_h; ++i) {
                                 for (std::size_t j = 0; j < out_w; ++j) {
                                   const Lerp& r = rows[i];
                                   const Lerp& q = cols[j];
                                   const std::size_t taps[4] = {r.lo * w + q.lo, r.lo * w + q.hi, r.hi * w + q.lo,
                                                                r.hi * w + q.hi};
                                   const double wts[4] = {r.w_lo * q.w_lo, r.w_lo * q.w_hi, r.w_hi * q.w_lo,
                                                          r.w_hi * q.w_hi};
                                   const double* g = self.grad.data() + (i * out_w + j) * c;
                                   for (int t = 0; t < 4; ++t) {
                                     double* dst = gx.data() + taps[t] * c;
                                     for (std::size_t k = 0; k < c; ++k) dst[k] += wts[t] * g[k];
                                   }
                                 }
                               }
                             });
}

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 3, "pointwise_conv");
  require_rank(w, 2, "pointwise_conv");
  const auto h = x.dim(0), wd = x.dim(1);
  auto flat = linear(reshape(x, {h * wd, x.dim(2)}), w, b);
  return reshape(flat, {h, wd, w.dim(1)});
}

Tensor transposed_conv_2x2(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 3, "transposed_conv_2x2");
  const auto h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  if (w.rank() != 4 || w.dim(0) != 2 || w.dim(1) != 2 || w.dim(2) != cin) {
    throw DimensionError("transposed_conv_2x2: weight " + shape_to_string(w.shape()) + " incompatible with input " +
                         shape_to_string(x.shape()));
  }
  const auto cout = w.dim(3);
  if (b.shape() != Shape{cout}) throw DimensionError("transposed_conv_2x2: bias " + shape_to_string(b.shape()));
  const auto hw = h * wd;
  const auto out_w = 2 * wd;
  std::vector<double> out(4 * hw * cout);
  ConstMap xin(x.data().data(), hw, cin);
  RowMat tap(hw, cout);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto di = k / 2, dj = k % 2;
    tap.noalias() = xin * ConstMap(w.data().data() + k * cin * cout, cin, cout);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < wd; ++j) {
        double* dst = out.data() + ((2 * i + di) * out_w + (2 * j + dj)) * cout;
        const auto bs = b.data();
        for (std::size_t c = 0; c < cout; ++c) dst[c] = tap(i * wd + j, c) + bs[c];
      }
    }
  }
  return Tensor::make_result({2 * h, out_w, cout}, std::move(out), {x, w, b}, [h, wd, cin, cout](Node& self) {
    const auto hw = h * wd;
    const auto out_w = 2 * wd;
    RowMat gtap(hw, cout);
    for (std::size_t k = 0; k < 4; ++k) {
      const auto di = k / 2, dj = k % 2;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j) {
          const double* src = self.grad.data() + ((2 * i + di) * out_w + (2 * j + dj)) * cout;
          for (std::size_t c = 0; c < cout; ++c) gtap(i * wd + j, c) = src[c];
        }
      if (wants(self, 0)) {
        MutMap(input_grad(self, 0).data(), hw, cin).noalias() +=
            gtap * ConstMap(input_data(self, 1).data() + k * cin * cout, cin, cout).transpose();
      }
      if (wants(self, 1)) {
        MutMap(input_grad(self, 1).data() + k * cin * cout, cin, cout).noalias() +=
            ConstMap(input_data(self, 0).data(), hw, cin).transpose() * gtap;
      }
      if (wants(self, 2)) {
        auto& gb = input_grad(self, 2);
        for (std::size_t r = 0; r < hw; ++r)
          for (std::size_t c = 0; c < cout; ++c) gb[c] += gtap(r, c);
      }
    }
  });
}

}  // namespace fptrans::ops
