#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <string>
#include <vector>

#include "cotr/tensor.hpp"

namespace cotr {

enum class PosEncoding { kLinear, kLogLinear };

namespace detail {

template <class T>
using Lanes __attribute__((vector_size(64))) = T;

/// One MR×(NV·lanes) block of C accumulated in vector registers. `b` and
/// `c` point at the block's first column and row; with kTransA the left
/// operand is stored k×m.
template <class T, std::size_t MR, std::size_t NV, bool kTransA>
inline void gemm_block(const T* __restrict a, std::size_t i, std::size_t m, std::size_t k,
                       const T* __restrict b, std::size_t ldb, T* __restrict c, std::size_t ldc) {
  using V = Lanes<T>;
  constexpr std::size_t kLanes = sizeof(V) / sizeof(T);
  V acc[MR][NV] = {};
  for (std::size_t p = 0; p < k; ++p) {
    V bv[NV];
    for (std::size_t v = 0; v < NV; ++v) __builtin_memcpy(&bv[v], b + p * ldb + v * kLanes, sizeof(V));
    for (std::size_t r = 0; r < MR; ++r) {
      const T x = kTransA ? a[p * m + i + r] : a[(i + r) * k + p];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += x * bv[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t v = 0; v < NV; ++v) __builtin_memcpy(c + r * ldc + v * kLanes, &acc[r][v], sizeof(V));
}

template <class T, std::size_t MR, bool kTransA>
void gemm_rows(const T* a, std::size_t i, std::size_t m, std::size_t k, const T* b, std::size_t n,
               const T* bpad, T* c) {
  constexpr std::size_t kLanes = sizeof(Lanes<T>) / sizeof(T);
  const std::size_t n_wide = n - n % (2 * kLanes);
  const std::size_t n_vec = n - n % kLanes;
  T* crow = c + i * n;
  for (std::size_t j0 = 0; j0 < n_wide; j0 += 2 * kLanes)
    gemm_block<T, MR, 2, kTransA>(a, i, m, k, b + j0, n, crow + j0, n);
  if (n_vec > n_wide) gemm_block<T, MR, 1, kTransA>(a, i, m, k, b + n_wide, n, crow + n_wide, n);
  if (n_vec < n) {
    T cpad[MR * kLanes];
    gemm_block<T, MR, 1, kTransA>(a, i, m, k, bpad, kLanes, cpad, kLanes);
    for (std::size_t r = 0; r < MR; ++r)
      std::copy(cpad + r * kLanes, cpad + r * kLanes + (n - n_vec), crow + r * n + n_vec);
  }
}

/// C = A(m×k) · B(k×n), overwriting C; with kTransA, A is given as its
/// transpose (k×m). Every output element is the sum over k in increasing
/// order starting from zero, whichever block computes it, so a row of C is
/// bit-identical no matter how many other rows share the call.
template <class T, bool kTransA = false>
void gemm(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
          std::size_t n) {
  constexpr std::size_t kMR = 8;
  constexpr std::size_t kLanes = sizeof(Lanes<T>) / sizeof(T);
  const std::size_t n_vec = n - n % kLanes;
  // Leftover columns run through a zero-padded copy of B's last columns.
  std::vector<T> bpad;
  if (n_vec < n) {
    bpad.assign(k * kLanes, T(0));
    for (std::size_t p = 0; p < k; ++p) std::copy(b + p * n + n_vec, b + p * n + n, bpad.data() + p * kLanes);
  }
  std::size_t i = 0;
  for (; i + kMR <= m; i += kMR) gemm_rows<T, kMR, kTransA>(a, i, m, k, b, n, bpad.data(), c);
  for (; i < m; ++i) gemm_rows<T, 1, kTransA>(a, i, m, k, b, n, bpad.data(), c);
}

template <class T>
std::vector<T> transpose2d(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

/// Right operand broadcasts if its shape is a suffix of the left shape
/// or it holds a single element.
inline std::size_t broadcast_inner(const Shape& a, const Shape& b, OpKind op) {
  if (a == b) return numel_of(a);
  if (numel_of(b) == 1) return 1;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return numel_of(b);
  throw ShapeError(std::string(op_name(op)) + ": cannot broadcast " + shape_str(b) + " onto " +
                   shape_str(a));
}

/// Σ a[i]·b[i] with independent partial sums so the loop vectorizes.
template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  constexpr std::size_t kAcc = 2 * sizeof(Lanes<T>) / sizeof(T);
  T acc[kAcc] = {};
  std::size_t i = 0;
  for (; i + kAcc <= n; i += kAcc)
    for (std::size_t j = 0; j < kAcc; ++j) acc[j] += a[i + j] * b[i + j];
  T s = 0;
  for (; i < n; ++i) s += a[i] * b[i];
  for (std::size_t j = 0; j < kAcc; ++j) s += acc[j];
  return s;
}

template <class T>
inline T total(const T* a, std::size_t n) {
  constexpr std::size_t kAcc = 2 * sizeof(Lanes<T>) / sizeof(T);
  T acc[kAcc] = {};
  std::size_t i = 0;
  for (; i + kAcc <= n; i += kAcc)
    for (std::size_t j = 0; j < kAcc; ++j) acc[j] += a[i + j];
  T s = 0;
  for (; i < n; ++i) s += a[i];
  for (std::size_t j = 0; j < kAcc; ++j) s += acc[j];
  return s;
}

template <class T>
inline T maximum(const T* a, std::size_t n) {
  constexpr std::size_t kAcc = sizeof(Lanes<T>) / sizeof(T);
  T m = a[0];
  std::size_t i = 0;
  if (n >= kAcc) {
    T acc[kAcc];
    for (std::size_t j = 0; j < kAcc; ++j) acc[j] = a[j];
    for (i = kAcc; i + kAcc <= n; i += kAcc)
      for (std::size_t j = 0; j < kAcc; ++j) acc[j] = acc[j] > a[i + j] ? acc[j] : a[i + j];
    for (std::size_t j = 0; j < kAcc; ++j) m = std::max(m, acc[j]);
  }
  for (; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

/// exp for x ≤ 0 in single precision: range reduction to 2^n · e^r with a
/// degree-6 polynomial (relative error ~2e-7); vectorizes, unlike expf.
inline float exp_nonpositive(float x) {
  constexpr float kShift = 12582912.0f;  // 1.5·2^23: adding it rounds to an integer
  x = x < -87.0f ? -87.0f : x;
  const float t = x * 1.44269504088896341f;
  const float shifted = t + kShift;
  const float n = shifted - kShift;
  const float r = (t - n) * 0.693147180559945309f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t k = std::bit_cast<std::int32_t>(shifted) - std::bit_cast<std::int32_t>(kShift);
  return p * std::bit_cast<float>((k + 127) << 23);
}

inline double exp_nonpositive(double x) { return std::exp(x); }

template <class T>
void accumulate_broadcast(std::vector<T>& dst, std::span<const T> src, std::size_t inner, T sign = T(1)) {
  if (inner == 1) {
    dst[0] += sign * total(src.data(), src.size());
    return;
  }
  for (std::size_t o = 0; o < src.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) dst[i] += sign * src[o + i];
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape(), OpKind::kAdd);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<T> out(av.size());
  if (inner == 1) {
    const T s = bv[0];
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  } else {
    for (std::size_t o = 0; o < av.size(); o += inner)
      for (std::size_t i = 0; i < inner; ++i) out[o + i] = av[o + i] + bv[i];
  }
  return Tensor<T>::make_result(
      OpKind::kAdd, a.shape(), std::move(out), {a, b},
      [inner](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1]) detail::accumulate_broadcast(*pg[1], g, inner);
      });
}

template <class T>
Tensor<T> subtract(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape(), OpKind::kSubtract);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<T> out(av.size());
  if (inner == 1) {
    const T s = bv[0];
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - s;
  } else {
    for (std::size_t o = 0; o < av.size(); o += inner)
      for (std::size_t i = 0; i < inner; ++i) out[o + i] = av[o + i] - bv[i];
  }
  return Tensor<T>::make_result(
      OpKind::kSubtract, a.shape(), std::move(out), {a, b},
      [inner](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1]) detail::accumulate_broadcast(*pg[1], g, inner, T(-1));
      });
}

template <class T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape(), OpKind::kMultiply);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<T> out(av.size());
  if (inner == 1) {
    const T s = bv[0];
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  } else {
    for (std::size_t o = 0; o < av.size(); o += inner)
      for (std::size_t i = 0; i < inner; ++i) out[o + i] = av[o + i] * bv[i];
  }
  return Tensor<T>::make_result(
      OpKind::kMultiply, a.shape(), std::move(out), {a, b},
      [inner](const detail::Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (inner == 1) {
          if (pg[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bv[0];
          if (pg[1]) (*pg[1])[0] += detail::dot(g.data(), av.data(), g.size());
          return;
        }
        for (std::size_t o = 0; o < g.size(); o += inner) {
          if (pg[0])
            for (std::size_t i = 0; i < inner; ++i) (*pg[0])[o + i] += g[o + i] * bv[i];
          if (pg[1])
            for (std::size_t i = 0; i < inner; ++i) (*pg[1])[i] += g[o + i] * av[o + i];
        }
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return multiply(a, Tensor<T>::scalar(s));
}

/// 2-D (m×k · k×n) or batched 3-D (b×m×k · b×k×n) matrix product.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  std::size_t batch = 1, m, k, n;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2 && as[1] == bs[0]) {
    m = as[0], k = as[1], n = bs[1];
    out_shape = {m, n};
  } else if (as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[1]) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
    out_shape = {batch, m, n};
  } else {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm(a.data().data() + bi * m * k, b.data().data() + bi * k * n, out.data() + bi * m * n,
                 m, k, n);
  }
  return Tensor<T>::make_result(
      OpKind::kMatMul, std::move(out_shape), std::move(out), {a, b},
      [batch, m, k, n](const detail::Node<T>& self, std::span<const T> g,
                       std::span<std::vector<T>* const> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        std::vector<T> tmp;
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* gp = g.data() + bi * m * n;
          if (pg[0]) {
            // dA = dC · Bᵀ
            auto bt = detail::transpose2d(bv.data() + bi * k * n, k, n);
            tmp.resize(m * k);
            detail::gemm(gp, bt.data(), tmp.data(), m, n, k);
            T* dst = pg[0]->data() + bi * m * k;
            for (std::size_t i = 0; i < m * k; ++i) dst[i] += tmp[i];
          }
          if (pg[1]) {
            // dB = Aᵀ · dC
            tmp.resize(k * n);
            detail::gemm<T, true>(av.data() + bi * m * k, gp, tmp.data(), k, m, n);
            T* dst = pg[1]->data() + bi * k * n;
            for (std::size_t i = 0; i < k * n; ++i) dst[i] += tmp[i];
          }
        }
      });
}

/// Convolution of an H×W×Cin map with a kh×kw×Cin×Cout kernel, zero padding
/// (k−1)/2, stride 1 or 2. With odd k and even H, W, stride 2 halves the extent.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[2] != xs[2] || ws[0] != ws[1] || ws[0] % 2 == 0 ||
      (stride != 1 && stride != 2)) {
    throw ShapeError("conv2d: incompatible input " + shape_str(xs) + " and kernel " + shape_str(ws) +
                     " (stride " + std::to_string(stride) + ")");
  }
  const std::size_t h = xs[0], wd = xs[1], cin = xs[2];
  const std::size_t ks = ws[0], cout = ws[3];
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(ks / 2);
  const std::size_t ho = (h + 2 * pad - ks) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - ks) / stride + 1;
  const std::size_t patch = ks * ks * cin;

  auto cols = std::make_shared<std::vector<T>>(ho * wo * patch, T(0));
  const auto& xv = x.vec();
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* row = cols->data() + (oy * wo + ox) * patch;
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
          const T* src = xv.data() + (iy * wd + ix) * cin;
          std::copy(src, src + cin, row + (ky * ks + kx) * cin);
        }
      }
    }
  }
  std::vector<T> out(ho * wo * cout);
  detail::gemm(cols->data(), w.data().data(), out.data(), ho * wo, patch, cout);

  return Tensor<T>::make_result(
      OpKind::kConv2d, {ho, wo, cout}, std::move(out), {x, w},
      [=](const detail::Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& wv = self.parents[1]->value;
        if (pg[1]) {
          std::vector<T> dw(patch * cout);
          detail::gemm<T, true>(cols->data(), g.data(), dw.data(), patch, ho * wo, cout);
          for (std::size_t i = 0; i < dw.size(); ++i) (*pg[1])[i] += dw[i];
        }
        if (pg[0]) {
          auto wt = detail::transpose2d(wv.data(), patch, cout);
          std::vector<T> dcols(ho * wo * patch);
          detail::gemm(g.data(), wt.data(), dcols.data(), ho * wo, cout, patch);
          auto& dx = *pg[0];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const T* row = dcols.data() + (oy * wo + ox) * patch;
              for (std::size_t ky = 0; ky < ks; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < ks; ++kx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  T* dst = dx.data() + (iy * wd + ix) * cin;
                  const T* src = row + (ky * ks + kx) * cin;
                  for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return Tensor<T>::make_result(
      OpKind::kRelu, x.shape(), std::move(out), {x},
      [](const detail::Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& xv = self.parents[0]->value;
        auto& d = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += xv[i] > T(0) ? g[i] : T(0);
      });
}

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.vec();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = detail::maximum(in, cols);
    for (std::size_t c = 0; c < cols; ++c) o[c] = detail::exp_nonpositive(in[c] - mx);
    const T inv = T(1) / detail::total(o, cols);
    for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
  }
  return Tensor<T>::make_result(
      OpKind::kSoftmax, x.shape(), std::move(out), {x},
      [rows, cols](const detail::Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& y = self.value;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * cols;
          const T* gr = g.data() + r * cols;
          const T dot = detail::dot(gr, yr, cols);
          T* d = pg[0]->data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) d[c] += yr[c] * (gr[c] - dot);
        }
      });
}

/// Normalization to zero mean, unit variance over the last axis (no affine).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.vec();
  std::vector<T> out(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mean = detail::total(in, cols) / T(cols);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - mean;
    const T var = detail::dot(o, o, cols) / T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) o[c] *= is;
  }
  return Tensor<T>::make_result(
      OpKind::kLayerNorm, x.shape(), std::move(out), {x},
      [rows, cols, inv_std](const detail::Node<T>& self, std::span<const T> g,
                            std::span<std::vector<T>* const> pg) {
        const auto& y = self.value;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * cols;
          const T* gr = g.data() + r * cols;
          const T mg = detail::total(gr, cols) / T(cols);
          const T mgy = detail::dot(gr, yr, cols) / T(cols);
          T* d = pg[0]->data() + r * cols;
          const T is = (*inv_std)[r];
          for (std::size_t c = 0; c < cols; ++c) d[c] += is * (gr[c] - mg - yr[c] * mgy);
        }
      });
}

/// Concatenation along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool ok = as.size() == bs.size() && axis < as.size();
  for (std::size_t i = 0; ok && i < as.size(); ++i) ok = (i == axis) || as[i] == bs[i];
  if (!ok) {
    throw ShapeError("concat: incompatible shapes " + shape_str(as) + " and " + shape_str(bs) +
                     " along axis " + std::to_string(axis));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  const std::size_t ablk = as[axis] * inner, bblk = bs[axis] * inner;
  Shape os = as;
  os[axis] += bs[axis];
  std::vector<T> out(outer * (ablk + bblk));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * ablk, ablk, out.data() + o * (ablk + bblk));
    std::copy_n(b.data().data() + o * bblk, bblk, out.data() + o * (ablk + bblk) + ablk);
  }
  return Tensor<T>::make_result(
      OpKind::kConcat, std::move(os), std::move(out), {a, b},
      [outer, ablk, bblk](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * (ablk + bblk);
          if (pg[0])
            for (std::size_t i = 0; i < ablk; ++i) (*pg[0])[o * ablk + i] += src[i];
          if (pg[1])
            for (std::size_t i = 0; i < bblk; ++i) (*pg[1])[o * bblk + i] += src[ablk + i];
        }
      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& xs = x.shape();
  if (axis >= xs.size() || len == 0 || start + len > xs[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(xs));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t src_blk = xs[axis] * inner, dst_blk = len * inner, off = start * inner;
  Shape os = xs;
  os[axis] = len;
  std::vector<T> out(outer * dst_blk);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + o * src_blk + off, dst_blk, out.data() + o * dst_blk);
  return Tensor<T>::make_result(
      OpKind::kSlice, std::move(os), std::move(out), {x},
      [outer, src_blk, dst_blk, off](const detail::Node<T>&, std::span<const T> g,
                                     std::span<std::vector<T>* const> pg) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < dst_blk; ++i) (*pg[0])[o * src_blk + off + i] += g[o * dst_blk + i];
      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return Tensor<T>::make_result(
      OpKind::kReshape, std::move(shape), x.vec(), {x},
      [](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

/// Axis permutation: output axis i is input axis perm[i].
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const Shape& xs = x.shape();
  const std::size_t r = xs.size();
  std::vector<bool> used(r, false);
  bool ok = perm.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = perm[i] < r && !used[perm[i]];
    if (ok) used[perm[i]] = true;
  }
  if (!ok) throw ShapeError("transpose: invalid permutation for shape " + shape_str(xs));

  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = xs[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * xs[i + 1];
  // Source stride of each output axis; rank ≤ 3 is padded with unit axes.
  std::array<std::size_t, 3> ext{1, 1, 1}, st{0, 0, 0};
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[perm[i]];
  if (r <= 3)
    for (std::size_t i = 0; i < r; ++i) ext[3 - r + i] = os[i], st[3 - r + i] = src_stride[i];
  auto visit = [=](auto&& fn) {
    if (r <= 3) {
      std::size_t o = 0;
      for (std::size_t i0 = 0; i0 < ext[0]; ++i0)
        for (std::size_t i1 = 0; i1 < ext[1]; ++i1) {
          const std::size_t base = i0 * st[0] + i1 * st[1];
          for (std::size_t i2 = 0; i2 < ext[2]; ++i2) fn(o++, base + i2 * st[2]);
        }
      return;
    }
    std::vector<std::size_t> ctr(r, 0);
    for (std::size_t o = 0; o < numel_of(os); ++o) {
      std::size_t src = 0;
      for (std::size_t i = 0; i < r; ++i) src += ctr[i] * src_stride[i];
      fn(o, src);
      for (std::size_t i = r; i-- > 0;) {
        if (++ctr[i] < os[i]) break;
        ctr[i] = 0;
      }
    }
  };
  std::vector<T> out(x.numel());
  const auto& xv = x.vec();
  visit([&](std::size_t o, std::size_t src) { out[o] = xv[src]; });
  return Tensor<T>::make_result(
      OpKind::kTranspose, os, std::move(out), {x},
      [visit](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        auto& d = *pg[0];
        visit([&](std::size_t o, std::size_t src) { d[src] += g[o]; });
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.vec()) s += v;
  return Tensor<T>::make_result(
      OpKind::kSum, {1}, {s}, {x},
      [](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        for (auto& d : *pg[0]) d += g[0];
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.vec()) s += v;
  const T n = T(x.numel());
  return Tensor<T>::make_result(
      OpKind::kMean, {1}, {s / n}, {x},
      [n](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        for (auto& d : *pg[0]) d += g[0] / n;
      });
}

/// Sum of squares of all elements.
template <class T>
Tensor<T> squared_l2(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.vec()) s += v * v;
  return Tensor<T>::make_result(
      OpKind::kSquaredL2, {1}, {s}, {x},
      [](const detail::Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& xv = self.parents[0]->value;
        for (std::size_t i = 0; i < xv.size(); ++i) (*pg[0])[i] += T(2) * xv[i] * g[0];
      });
}

/// Max over every axis but the last: (..., C) -> (C). Ties route the
/// gradient to the first maximal element.
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.vec();
  auto arg = std::make_shared<std::vector<std::size_t>>(c, 0);
  std::vector<T> out(xv.begin(), xv.begin() + c);
  for (std::size_t r = 1; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j)
      if (xv[r * c + j] > out[j]) out[j] = xv[r * c + j], (*arg)[j] = r;
  return Tensor<T>::make_result(
      OpKind::kMaxPool, {c}, std::move(out), {x},
      [arg, c](const detail::Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        for (std::size_t j = 0; j < c; ++j) (*pg[0])[(*arg)[j] * c + j] += g[j];
      });
}

/// Angular frequency of block k (1-based) of the positional encoding.
inline double encoding_frequency(std::size_t k, std::size_t channels, PosEncoding mode) {
  if (mode == PosEncoding::kLinear) return double(k) * std::numbers::pi;
  const double blocks = double(channels / 4);
  return 2.0 * std::numbers::pi / std::pow(10000.0, double(k - 1) / blocks);
}

/// Sinusoidal encoding of 2-D points (Q×2) into Q×channels; block k holds
/// [sin(w_k u), sin(w_k v), cos(w_k u), cos(w_k v)].
template <class T>
Tensor<T> pos_encode(const Tensor<T>& points, std::size_t channels, PosEncoding mode = PosEncoding::kLinear) {
  if (points.rank() != 2 || points.dim(1) != 2 || channels % 4 != 0 || channels == 0) {
    throw ShapeError("pos_encode: expected Q×2 points and channels divisible by 4, got " +
                     shape_str(points.shape()) + " and " + std::to_string(channels));
  }
  const std::size_t q = points.dim(0);
  const std::size_t blocks = channels / 4;
  std::vector<T> freq(blocks);
  for (std::size_t k = 0; k < blocks; ++k) freq[k] = T(encoding_frequency(k + 1, channels, mode));
  const auto& pv = points.vec();
  std::vector<T> out(q * channels);
  for (std::size_t i = 0; i < q; ++i) {
    const T u = pv[2 * i], v = pv[2 * i + 1];
    T* o = out.data() + i * channels;
    for (std::size_t k = 0; k < blocks; ++k) {
      o[4 * k + 0] = std::sin(freq[k] * u);
      o[4 * k + 1] = std::sin(freq[k] * v);
      o[4 * k + 2] = std::cos(freq[k] * u);
      o[4 * k + 3] = std::cos(freq[k] * v);
    }
  }
  return Tensor<T>::make_result(
      OpKind::kPosEncode, {q, channels}, std::move(out), {points},
      [q, channels, blocks, freq](const detail::Node<T>& self, std::span<const T> g,
                                  std::span<std::vector<T>* const> pg) {
        const auto& y = self.value;
        for (std::size_t i = 0; i < q; ++i) {
          const T* yi = y.data() + i * channels;
          const T* gi = g.data() + i * channels;
          T du = 0, dv = 0;
          for (std::size_t k = 0; k < blocks; ++k) {
            // d sin(wu)/du = w cos(wu); d cos(wu)/du = -w sin(wu)
            du += freq[k] * (gi[4 * k + 0] * yi[4 * k + 2] - gi[4 * k + 2] * yi[4 * k + 0]);
            dv += freq[k] * (gi[4 * k + 1] * yi[4 * k + 3] - gi[4 * k + 3] * yi[4 * k + 1]);
          }
          (*pg[0])[2 * i] += du;
          (*pg[0])[2 * i + 1] += dv;
        }
      });
}

}  // namespace cotr
