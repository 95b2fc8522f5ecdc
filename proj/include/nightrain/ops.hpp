#pragma once

// Differentiable operations on BasicTensor. Every op checks its shape
// contract, computes the forward value, and (when recording) attaches a
// closure that adds the vector-Jacobian product into each parent's grad.

#include <cmath>
#include <numbers>
#include <vector>

#include "nightrain/tensor.hpp"

namespace nightrain {

namespace detail {

inline void expect(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

// c[m,n] += a[m,k] * b[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + kk] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      T* crow = c + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
TensorNode<T>& parent(TensorNode<T>& self, std::size_t i) {
  return *self.parents[i];
}

}  // namespace detail

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::expect(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                 "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return BasicTensor<T>::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](TensorNode<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.data.data(), pa.grad_buffer().data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(pa.data.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
  });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::expect(a.rank() == 2, "transpose: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return BasicTensor<T>::make_result({n, m}, std::move(out), {&a}, [m, n](TensorNode<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  detail::expect(numel(shape) == a.numel(),
                 "reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  return BasicTensor<T>::make_result(std::move(shape), a.values(), {&a}, [](TensorNode<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

template <class T, class Fwd, class Bwd>
BasicTensor<T> binary_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* name, Fwd fwd,
                                 Bwd bwd) {
  expect(a.shape() == b.shape(),
         std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i], b[i]);
  return BasicTensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, [bwd](TensorNode<T>& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    const std::size_t n = self.grad.size();
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += bwd(self.grad[i], pa.data[i], pb.data[i], 0);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += bwd(self.grad[i], pa.data[i], pb.data[i], 1);
    }
  });
}

template <class T, class Fwd, class Deriv>
BasicTensor<T> unary(const BasicTensor<T>& a, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
  return BasicTensor<T>::make_result(a.shape(), std::move(out), {&a}, [deriv](TensorNode<T>& self) {
    auto& pa = parent(self, 0);
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(pa.data[i]);
  });
}

}  // namespace detail

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T, int) { return g; });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T, int which) { return which == 0 ? g : -g; });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T x, T y, int which) { return which == 0 ? g * y : g * x; });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T) { return s; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

/// tanh approximation of GELU.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x))); },
      [](T x) {
        const T th = std::tanh(k0 * (x + k1 * x * x * x));
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k0 * (T(1) + T(3) * k1 * x * x);
      });
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

namespace detail {

// Broadcasts v (numel n) across every row of x (last dim n).
template <class T>
std::size_t row_width(const BasicTensor<T>& x, const BasicTensor<T>& v, const char* name) {
  expect(x.rank() >= 1 && v.numel() == x.shape().back(),
         std::string(name) + ": row vector " + shape_str(v.shape()) + " does not match " + shape_str(x.shape()));
  return v.numel();
}

}  // namespace detail

template <class T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  const std::size_t n = detail::row_width(x, v, "add_row");
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + v[j];
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {&x, &v}, [rows, n](TensorNode<T>& self) {
    auto& px = detail::parent(self, 0);
    auto& pv = detail::parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv.requires_grad) {
      auto& g = pv.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
    }
  });
}

template <class T>
BasicTensor<T> mul_row(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  const std::size_t n = detail::row_width(x, v, "mul_row");
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] * v[j];
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {&x, &v}, [rows, n](TensorNode<T>& self) {
    auto& px = detail::parent(self, 0);
    auto& pv = detail::parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * n + j] * pv.data[j];
    }
    if (pv.requires_grad) {
      auto& g = pv.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j] * px.data[r * n + j];
    }
  });
}

/// x W + b for x[m,k], W[k,n], b[n].
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  return add_row(matmul(x, w), b);
}

/// Normalizes over the last dimension to zero mean and unit (population)
/// variance. No affine parameters.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, T eps = T(1e-6)) {
  detail::expect(x.rank() >= 1 && x.shape().back() >= 2,
                 "layer_norm: last dimension must be >= 2, got " + shape_str(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mean) * is;
  }
  auto y = out;
  return BasicTensor<T>::make_result(
      x.shape(), std::move(out), {&x}, [rows, n, y = std::move(y), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        auto& g = detail::parent(self, 0).grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * n;
          const T* yr = y.data() + r * n;
          T mean_dy = T(0), mean_dyy = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            mean_dy += dy[j];
            mean_dyy += dy[j] * yr[j];
          }
          mean_dy /= T(n);
          mean_dyy /= T(n);
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += inv_std[r] * (dy[j] - mean_dy - yr[j] * mean_dyy);
        }
      });
}

/// Softmax over the last dimension, stabilized by subtracting the row max.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(row[j] - mx);
      sum += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= sum;
  }
  auto y = out;
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {&x}, [rows, n, y = std::move(y)](TensorNode<T>& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = self.grad.data() + r * n;
      const T* yr = y.data() + r * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (dy[j] - dot);
    }
  });
}

template <class T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t len) {
  detail::expect(x.rank() == 2 && start + len <= x.dim(1) && len > 0,
                 "slice_cols: range out of bounds for " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x[i * n + start + j];
  return BasicTensor<T>::make_result({m, len}, std::move(out), {&x}, [m, n, start, len](TensorNode<T>& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) g[i * n + start + j] += self.grad[i * len + j];
  });
}

template <class T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  detail::expect(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::expect(p.rank() == 2 && p.dim(0) == m, "concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = parts[k][i * widths[k] + j];
    offset += widths[k];
  }
  return BasicTensor<T>::make_result({m, total}, std::move(out), parts, [m, total, widths](TensorNode<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto& p = detail::parent(self, k);
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Concatenates along the leading axis; trailing dimensions must agree.
template <class T>
BasicTensor<T> concat0(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::expect(a.rank() == b.rank() && std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1),
                 "concat0: trailing shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.numel();
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {&a, &b}, [na](TensorNode<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return BasicTensor<T>::make_result({1}, {acc}, {&x}, [](TensorNode<T>& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Squared error averaged over the elements where weight is nonzero:
/// sum(w * (pred - target)^2) / count(w != 0). `weights` has pred's element
/// count; entries are 0 or 1. An all-zero weight vector is a degenerate pair.
template <class T>
BasicTensor<T> masked_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target, const std::vector<T>& weights) {
  detail::expect(pred.shape() == target.shape(),
                 "masked_mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  detail::expect(weights.size() == pred.numel(), "masked_mse: weight count does not match prediction");
  std::size_t count = 0;
  for (T w : weights) count += (w != T(0));
  if (count == 0) throw DegeneratePairError("masked_mse: mask selects no elements");
  T acc = T(0);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T d = pred[i] - target[i];
    acc += weights[i] * d * d;
  }
  const T inv = T(1) / T(count);
  return BasicTensor<T>::make_result({1}, {acc * inv}, {&pred, &target}, [weights, inv](TensorNode<T>& self) {
    auto& pp = detail::parent(self, 0);
    auto& pt = detail::parent(self, 1);
    const T g0 = self.grad[0] * T(2) * inv;
    if (pp.requires_grad) {
      auto& g = pp.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * weights[i] * (pp.data[i] - pt.data[i]);
    }
    if (pt.requires_grad) {
      auto& g = pt.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * weights[i] * (pp.data[i] - pt.data[i]);
    }
  });
}

/// Non-overlapping 3D convolution: x[C,T,H,W] with kernels[Co,C,kt,kh,kw]
/// and stride equal to the kernel size. Output is [Co, T/kt, H/kh, W/kw].
template <class T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& kernels) {
  detail::expect(x.rank() == 4 && kernels.rank() == 5 && kernels.dim(1) == x.dim(0),
                 "conv3d: incompatible shapes " + shape_str(x.shape()) + " and kernels " + shape_str(kernels.shape()));
  const std::size_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = kernels.dim(0), kt = kernels.dim(2), kh = kernels.dim(3), kw = kernels.dim(4);
  detail::expect(t % kt == 0 && h % kh == 0 && w % kw == 0,
                 "conv3d: input " + shape_str(x.shape()) + " not divisible by kernel " + shape_str(kernels.shape()));
  const std::size_t ot = t / kt, oh = h / kh, ow = w / kw;
  const std::size_t p = ot * oh * ow;
  const std::size_t q = c * kt * kh * kw;

  // cols[p, q] gathers each disjoint patch; index map shared with backward.
  std::vector<std::size_t> index(p * q);
  for (std::size_t a = 0; a < ot; ++a)
    for (std::size_t b = 0; b < oh; ++b)
      for (std::size_t d = 0; d < ow; ++d) {
        const std::size_t pi = (a * oh + b) * ow + d;
        std::size_t qi = 0;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t dt = 0; dt < kt; ++dt)
            for (std::size_t dh = 0; dh < kh; ++dh)
              for (std::size_t dw = 0; dw < kw; ++dw, ++qi)
                index[pi * q + qi] = ((ci * t + a * kt + dt) * h + b * kh + dh) * w + d * kw + dw;
      }
  std::vector<T> cols(p * q);
  for (std::size_t i = 0; i < p * q; ++i) cols[i] = x[index[i]];

  // out[co, p] = K[co, q] . cols[p, q]^T
  std::vector<T> out(co * p, T(0));
  detail::gemm_nt(kernels.data().data(), cols.data(), out.data(), co, q, p);

  return BasicTensor<T>::make_result(
      {co, ot, oh, ow}, std::move(out), {&x, &kernels},
      [co, p, q, index = std::move(index), cols = std::move(cols)](TensorNode<T>& self) {
        auto& px = detail::parent(self, 0);
        auto& pk = detail::parent(self, 1);
        if (pk.requires_grad) detail::gemm_nn(self.grad.data(), cols.data(), pk.grad_buffer().data(), co, p, q);
        if (px.requires_grad) {
          std::vector<T> dcols(p * q, T(0));
          detail::gemm_tn(self.grad.data(), pk.data.data(), dcols.data(), co, p, q);
          auto& g = px.grad_buffer();
          for (std::size_t i = 0; i < p * q; ++i) g[index[i]] += dcols[i];
        }
      });
}

/// Differentiable gather: out[i] = x[index[i]]. Used for patch reordering.
template <class T>
BasicTensor<T> gather(const BasicTensor<T>& x, const std::vector<std::size_t>& index, Shape shape) {
  detail::expect(numel(shape) == index.size(), "gather: index count does not match output shape");
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::expect(index[i] < x.numel(), "gather: index out of range");
    out[i] = x[index[i]];
  }
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {&x}, [index](TensorNode<T>& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
  });
}

}  // namespace nightrain
