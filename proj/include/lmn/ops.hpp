#pragma once

// Differentiable operations over BasicTensor<T>. Shapes must match exactly;
// the only broadcasts are the ones named in each signature (bias over the
// last axis, a shared right-hand matrix in matmul, periodic masks).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "lmn/counters.hpp"
#include "lmn/tensor.hpp"

#ifdef LMN_USE_BLAS
#include <cblas.h>
#endif

namespace lmn {

namespace kernel {

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
#ifdef LMN_USE_BLAS
  if (M * N * K >= 4096) {
    const auto m = static_cast<int>(M), n = static_cast<int>(N), k = static_cast<int>(K);
    if constexpr (std::is_same_v<T, float>) {
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, A, k, B, n, 1.0f, C, n);
      return;
    } else if constexpr (std::is_same_v<T, double>) {
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, A, k, B, n, 1.0, C, n);
      return;
    }
  }
#endif
  constexpr std::size_t kRowBlock = 4;
  std::size_t i = 0;
  for (; i + kRowBlock <= M; i += kRowBlock) {
    T* c0 = C + (i + 0) * N;
    T* c1 = C + (i + 1) * N;
    T* c2 = C + (i + 2) * N;
    T* c3 = C + (i + 3) * N;
    const T* a0 = A + (i + 0) * K;
    const T* a1 = A + (i + 1) * K;
    const T* a2 = A + (i + 2) * K;
    const T* a3 = A + (i + 3) * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      for (std::size_t j = 0; j < N; ++j) {
        const T bj = b[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T x = a[k];
      for (std::size_t j = 0; j < N; ++j) c[j] += x * b[j];
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
#ifdef LMN_USE_BLAS
  if (M * N * K >= 4096) {
    const auto m = static_cast<int>(M), n = static_cast<int>(N), k = static_cast<int>(K);
    if constexpr (std::is_same_v<T, float>) {
      cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0f, A, k, B, n, 1.0f, C, n);
      return;
    } else if constexpr (std::is_same_v<T, double>) {
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, A, k, B, n, 1.0, C, n);
      return;
    }
  }
#endif
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    const T* b = B + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T x = a[k];
      T* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += x * b[j];
    }
  }
}

template <class T>
Buffer<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  Buffer<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// C[M,K] += A[M,N] * B[K,N]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
#ifdef LMN_USE_BLAS
  if (M * N * K >= 4096) {
    const auto m = static_cast<int>(M), n = static_cast<int>(N), k = static_cast<int>(K);
    if constexpr (std::is_same_v<T, float>) {
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0f, A, n, B, n, 1.0f, C, k);
      return;
    } else if constexpr (std::is_same_v<T, double>) {
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, A, n, B, n, 1.0, C, k);
      return;
    }
  }
#endif
  const Buffer<T> bt = transposed(B, K, N);
  gemm_nn(M, K, N, A, bt.data(), C);
}

}  // namespace kernel

namespace detail {

template <class T>
using Inputs = std::vector<const BasicTensor<T>*>;

inline std::size_t product(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

inline void check_axis(const char* op, std::size_t axis, std::size_t rank) {
  if (axis >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    const std::size_t n = self.grad.size();
    const T* g = self.grad.data();
    if (T* ga = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub", a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    const std::size_t n = self.grad.size();
    const T* g = self.grad.data();
    if (T* ga = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    const std::size_t n = self.grad.size();
    const T* g = self.grad.data();
    const T* x = self.inputs[0]->data.data();
    const T* y = self.inputs[1]->data.data();
    if (T* ga = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
    if (T* gb = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * x[i];
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  const auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [factor](Node<T>& self) {
    T* ga = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  const auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    T* ga = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    const T* y = self.data.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (y[i] > T{0}) ga[i] += g[i];
  });
}

/// x[..., N] + bias[N]
template <class T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.dim(0)) throw ShapeError("add_bias", x.shape(), bias.shape());
  const std::size_t n = bias.dim(0);
  const auto xv = x.data();
  const auto bv = bias.data();
  Buffer<T> out(xv.size());
  for (std::size_t r = 0; r < xv.size(); r += n)
    for (std::size_t j = 0; j < n; ++j) out[r + j] = xv[r + j] + bv[j];
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &bias}, [n](Node<T>& self) {
    const T* g = self.grad.data();
    const std::size_t total = self.grad.size();
    if (T* gx = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < total; ++i) gx[i] += g[i];
    if (T* gb = detail::input_grad(self, 1))
      for (std::size_t r = 0; r < total; r += n)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r + j];
  });
}

/// Replaces entries whose pattern bit is 0 with `fill`. The tensor is viewed
/// as [outer, keep.size(), inner]; the pattern repeats over `outer`.
/// Gradients flow only through kept entries.
template <class T>
BasicTensor<T> masked_fill(const BasicTensor<T>& x, std::span<const std::uint8_t> keep, T fill,
                           std::size_t inner = 1) {
  const std::size_t period = keep.size() * inner;
  if (period == 0 || x.numel() % period != 0) {
    throw ShapeError("masked_fill: mask of " + std::to_string(keep.size()) + "x" + std::to_string(inner) +
                     " entries does not tile shape " + shape_str(x.shape()));
  }
  const auto xv = x.data();
  Buffer<T> out(xv.size());
  auto pattern = std::make_shared<std::vector<std::uint8_t>>(keep.begin(), keep.end());
  for (std::size_t base = 0; base < xv.size(); base += period)
    for (std::size_t r = 0; r < keep.size(); ++r) {
      const std::size_t off = base + r * inner;
      if (keep[r]) {
        std::memcpy(out.data() + off, xv.data() + off, inner * sizeof(T));
      } else {
        std::fill_n(out.data() + off, inner, fill);
      }
    }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [pattern, inner, period](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    const auto& keep = *pattern;
    for (std::size_t base = 0; base < self.grad.size(); base += period)
      for (std::size_t r = 0; r < keep.size(); ++r) {
        if (!keep[r]) continue;
        const std::size_t off = base + r * inner;
        for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i];
      }
  });
}

// ---------------------------------------------------------------------------
// Matrix products

/// a[..., M, K] @ b[K, N] -> [..., M, N]  (shared right-hand matrix), or
/// a[..., M, K] @ b[..., K, N] with identical leading dims (batched).
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul", a.shape(), b.shape());
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t M = sa[sa.size() - 2];
  const std::size_t K = sa.back();
  if (sb[sb.size() - 2] != K) throw ShapeError("matmul", sa, sb);
  const std::size_t N = sb.back();

  if (b.rank() == 2) {
    const std::size_t rows = a.numel() / K;
    Shape out_shape = sa;
    out_shape.back() = N;
    Buffer<T> out(rows * N);
    kernel::gemm_nn(rows, N, K, a.data().data(), b.data().data(), out.data());
    return detail::make_result<T>(std::move(out_shape), std::move(out), {&a, &b}, [rows, N, K](Node<T>& self) {
      const T* g = self.grad.data();
      if (T* ga = detail::input_grad(self, 0)) kernel::gemm_nt(rows, N, K, g, self.inputs[1]->data.data(), ga);
      if (T* gb = detail::input_grad(self, 1)) kernel::gemm_tn(rows, N, K, self.inputs[0]->data.data(), g, gb);
    });
  }

  if (a.rank() != b.rank() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw ShapeError("matmul", sa, sb);
  const std::size_t batch = detail::product(sa, 0, sa.size() - 2);
  Shape out_shape = sa;
  out_shape.back() = N;
  Buffer<T> out(batch * M * N);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) kernel::gemm_nn(M, N, K, pa + s * M * K, pb + s * K * N, out.data() + s * M * N);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&a, &b}, [batch, M, N, K](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = self.inputs[0]->data.data();
    const T* pb = self.inputs[1]->data.data();
    T* ga = detail::input_grad(self, 0);
    T* gb = detail::input_grad(self, 1);
    for (std::size_t s = 0; s < batch; ++s) {
      if (ga) kernel::gemm_nt(M, N, K, g + s * M * N, pb + s * K * N, ga + s * M * K);
      if (gb) kernel::gemm_tn(M, N, K, pa + s * M * K, g + s * M * N, gb + s * K * N);
    }
  });
}

/// x[..., K] @ weight[K, N] + bias[N]; bias may be undefined.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(0)) throw ShapeError("linear", x.shape(), weight.shape());
  const std::size_t K = weight.dim(0);
  const std::size_t N = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != N)) throw ShapeError("linear bias", weight.shape(), bias.shape());
  const std::size_t rows = x.numel() / K;
  Shape out_shape = x.shape();
  out_shape.back() = N;
  Buffer<T> out(rows * N);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::memcpy(out.data() + r * N, bv.data(), N * sizeof(T));
  }
  kernel::gemm_nn(rows, N, K, x.data().data(), weight.data().data(), out.data());
  detail::Inputs<T> inputs{&x, &weight};
  if (bias.defined()) inputs.push_back(&bias);
  return detail::make_result<T>(std::move(out_shape), std::move(out), inputs, [rows, N, K](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* gx = detail::input_grad(self, 0)) kernel::gemm_nt(rows, N, K, g, self.inputs[1]->data.data(), gx);
    if (T* gw = detail::input_grad(self, 1)) kernel::gemm_tn(rows, N, K, self.inputs[0]->data.data(), g, gw);
    if (self.inputs.size() > 2) {
      if (T* gb = detail::input_grad(self, 2))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < N; ++j) gb[j] += g[r * N + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  const auto xv = x.data();
  Buffer<T> out(xv.begin(), xv.end());
  return detail::make_result<T>(std::move(shape), std::move(out), {&x}, [](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
  });
}

namespace detail {

// Calls f(out_flat, in_flat) for every element of the permuted view.
template <class F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, F&& f) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  const std::size_t total = numel(in_shape);
  const std::size_t last = out_shape.back();
  const std::size_t last_step = step.back();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in_off = 0;
  for (std::size_t out = 0; out < total; out += last) {
    for (std::size_t j = 0; j < last; ++j) f(out + j, in_off + j * last_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      in_off += step[d];
      if (++idx[d] < out_shape[d]) break;
      in_off -= step[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

/// Swaps two axes (materialized copy).
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x, std::size_t axis0, std::size_t axis1) {
  detail::check_axis("transpose", axis0, x.rank());
  detail::check_axis("transpose", axis1, x.rank());
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[axis0], perm[axis1]);
  Shape out_shape = x.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  const auto xv = x.data();
  Buffer<T> out(xv.size());
  detail::for_each_permuted(x.shape(), perm, [&](std::size_t o, std::size_t i) { out[o] = xv[i]; });
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, [perm](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    detail::for_each_permuted(self.inputs[0]->shape, perm, [&](std::size_t o, std::size_t i) { gx[i] += g[o]; });
  });
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  detail::check_axis("concat", axis, s0.size());
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat", s0, s);
    total_axis += s[axis];
  }
  const std::size_t outer = detail::product(s0, 0, axis);
  const std::size_t inner = detail::product(s0, axis + 1, s0.size());
  Shape out_shape = s0;
  out_shape[axis] = total_axis;
  const std::size_t out_row = total_axis * inner;
  Buffer<T> out(outer * out_row);
  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const T* src = p.data().data();
    for (std::size_t o = 0; o < outer; ++o) std::memcpy(out.data() + o * out_row + offset, src + o * w, w * sizeof(T));
    widths.push_back(w);
    offset += w;
  }
  detail::Inputs<T> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return detail::make_result<T>(std::move(out_shape), std::move(out), inputs, [widths, outer, out_row](Node<T>& self) {
    const T* g = self.grad.data();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (T* gp = detail::input_grad(self, k))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) gp[o * w + i] += g[o * out_row + offset + i];
      offset += w;
    }
  });
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis("slice", axis, x.rank());
  const Shape& s = x.shape();
  if (start + length > s[axis] || length == 0) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of shape " + shape_str(s));
  }
  const std::size_t outer = detail::product(s, 0, axis);
  const std::size_t inner = detail::product(s, axis + 1, s.size());
  const std::size_t in_row = s[axis] * inner;
  const std::size_t w = length * inner;
  const std::size_t off = start * inner;
  Shape out_shape = s;
  out_shape[axis] = length;
  Buffer<T> out(outer * w);
  const T* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) std::memcpy(out.data() + o * w, src + o * in_row + off, w * sizeof(T));
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, [outer, in_row, w, off](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) gx[o * in_row + off + i] += g[o * w + i];
  });
}

template <class T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  std::vector<BasicTensor<T>> parts;
  std::size_t start = 0;
  for (std::size_t len : sizes) {
    parts.push_back(slice(x, axis, start, len));
    start += len;
  }
  if (start != x.dim(axis)) throw ShapeError("split: sizes do not cover axis of shape " + shape_str(x.shape()));
  return parts;
}

/// Selects entries along `axis`; index -1 produces a zero slice.
template <class T>
BasicTensor<T> index_select(const BasicTensor<T>& x, std::size_t axis, std::span<const std::int64_t> indices) {
  detail::check_axis("index_select", axis, x.rank());
  const Shape& s = x.shape();
  for (std::int64_t i : indices) {
    if (i < -1 || i >= static_cast<std::int64_t>(s[axis])) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for shape " + shape_str(s));
    }
  }
  const std::size_t outer = detail::product(s, 0, axis);
  const std::size_t inner = detail::product(s, axis + 1, s.size());
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = indices.size() * inner;
  Shape out_shape = s;
  out_shape[axis] = indices.size();
  Buffer<T> out(outer * out_row);
  const T* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < indices.size(); ++k)
      if (indices[k] >= 0)
        std::memcpy(out.data() + o * out_row + k * inner, src + o * in_row + indices[k] * inner, inner * sizeof(T));
  auto idx = std::make_shared<std::vector<std::int64_t>>(indices.begin(), indices.end());
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, [idx, outer, inner, in_row, out_row](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < idx->size(); ++k) {
        const std::int64_t src = (*idx)[k];
        if (src < 0) continue;
        T* dst = gx + o * in_row + src * inner;
        const T* gk = g + o * out_row + k * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += gk[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization, activation, losses

/// Softmax over the last axis. Entries equal to -inf receive exactly zero
/// weight; a row that is entirely -inf is a contract violation.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const std::size_t n = x.shape().back();
  const auto xv = x.data();
  Buffer<T> out(xv.size());
  for (std::size_t r = 0; r < xv.size(); r += n) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, xv[r + j]);
    if (m == -std::numeric_limits<T>::infinity()) throw ContractError("softmax: row with every entry masked");
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T e = xv[r + j] == -std::numeric_limits<T>::infinity() ? T{0} : std::exp(xv[r + j] - m);
      out[r + j] = e;
      sum += e;
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < n; ++j) out[r + j] *= inv;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [n](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    const T* y = self.data.data();
    for (std::size_t r = 0; r < self.grad.size(); r += n) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r + j] * y[r + j];
      for (std::size_t j = 0; j < n; ++j) gx[r + j] += y[r + j] * (g[r + j] - dot);
    }
  });
}

/// Layer normalization over the last axis (biased variance).
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != n) throw ShapeError("layer_norm gain", x.shape(), gain.shape());
  if (bias.rank() != 1 || bias.dim(0) != n) throw ShapeError("layer_norm bias", x.shape(), bias.shape());
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  const std::size_t rows = xv.size() / n;
  auto xhat = std::make_shared<Buffer<T>>(xv.size());
  auto rstd = std::make_shared<Buffer<T>>(rows);
  Buffer<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    double mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>(row[j] - mean) * rs;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &gain, &bias}, [xhat, rstd, n, rows](Node<T>& self) {
    const T* g = self.grad.data();
    const T* gv = self.inputs[1]->data.data();
    T* gx = detail::input_grad(self, 0);
    T* gg = detail::input_grad(self, 1);
    T* gb = detail::input_grad(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g + r * n;
      const T* h = xhat->data() + r * n;
      if (gg)
        for (std::size_t j = 0; j < n; ++j) gg[j] += gr[j] * h[j];
      if (gb)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
      if (gx) {
        T mean_d = 0, mean_dh = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T d = gr[j] * gv[j];
          mean_d += d;
          mean_dh += d * h[j];
        }
        mean_d /= static_cast<T>(n);
        mean_dh /= static_cast<T>(n);
        const T rs = (*rstd)[r];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += rs * (gr[j] * gv[j] - mean_d - h[j] * mean_dh);
      }
    }
  });
}

/// Row lookup: weight[V, E] indexed by ids -> prefix + [E].
template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& weight, std::span<const std::int32_t> ids, Shape prefix) {
  if (weight.rank() != 2) throw ShapeError("embedding: weight must be [vocab, dim], got " + shape_str(weight.shape()));
  if (numel(prefix) != ids.size()) throw ShapeError("embedding: ids do not fill " + shape_str(prefix));
  const std::size_t V = weight.dim(0);
  const std::size_t E = weight.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw ShapeError("embedding: token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    }
  }
  Shape out_shape = std::move(prefix);
  out_shape.push_back(E);
  Buffer<T> out(ids.size() * E);
  const T* w = weight.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) std::memcpy(out.data() + i * E, w + ids[i] * E, E * sizeof(T));
  auto idv = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&weight}, [idv, E](Node<T>& self) {
    T* gw = detail::input_grad(self, 0);
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < idv->size(); ++i)
      for (std::size_t j = 0; j < E; ++j) gw[(*idv)[i] * E + j] += g[i * E + j];
  });
}

/// Mean softmax cross-entropy of logits[..., V] against integer targets.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t V = logits.shape().back();
  const std::size_t rows = logits.numel() / V;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
  }
  const auto lv = logits.data();
  auto probs = std::make_shared<Buffer<T>>(lv.size());
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    const T* row = lv.data() + r * V;
    T m = row[0];
    for (std::size_t j = 1; j < V; ++j) m = std::max(m, row[j]);
    double sum = 0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j] - m));
    for (std::size_t j = 0; j < V; ++j) (*probs)[r * V + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - m)) / sum);
    total += std::log(sum) - static_cast<double>(row[t] - m);
  }
  Buffer<T> out{static_cast<T>(total / static_cast<double>(rows))};
  auto tv = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  return detail::make_result<T>({1}, std::move(out), {&logits}, [probs, tv, V, rows](Node<T>& self) {
    T* gl = detail::input_grad(self, 0);
    const T g = self.grad[0] / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += g * (*probs)[r * V + j];
      gl[r * V + (*tv)[r]] -= g;
    }
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  Buffer<T> out{static_cast<T>(acc)};
  return detail::make_result<T>({1}, std::move(out), {&x}, [](Node<T>& self) {
    T* gx = detail::input_grad(self, 0);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) gx[i] += g;
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Convolutions along a sequence axis. Layout is [outer, length, channels].

/// Kernel 2, stride 2, one filter per channel: x[..., 2m, C], kernel[C, 2] -> [..., m, C].
template <class T>
BasicTensor<T> depthwise_conv1d_k2s2(const BasicTensor<T>& x, const BasicTensor<T>& kernel) {
  if (x.rank() < 2 || kernel.rank() != 2 || kernel.dim(1) != 2 || kernel.dim(0) != x.shape().back() ||
      x.dim(x.rank() - 2) % 2 != 0) {
    throw ShapeError("depthwise_conv1d_k2s2", x.shape(), kernel.shape());
  }
  const std::size_t C = kernel.dim(0);
  const std::size_t pairs = x.numel() / (2 * C);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] /= 2;
  const T* xv = x.data().data();
  const T* kv = kernel.data().data();
  Buffer<T> out(pairs * C);
  for (std::size_t p = 0; p < pairs; ++p) {
    const T* left = xv + 2 * p * C;
    const T* right = left + C;
    for (std::size_t c = 0; c < C; ++c) out[p * C + c] = left[c] * kv[2 * c] + right[c] * kv[2 * c + 1];
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x, &kernel}, [pairs, C](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv = self.inputs[0]->data.data();
    const T* kv = self.inputs[1]->data.data();
    T* gx = detail::input_grad(self, 0);
    T* gk = detail::input_grad(self, 1);
    for (std::size_t p = 0; p < pairs; ++p)
      for (std::size_t c = 0; c < C; ++c) {
        const T gc = g[p * C + c];
        if (gx) {
          gx[2 * p * C + c] += gc * kv[2 * c];
          gx[(2 * p + 1) * C + c] += gc * kv[2 * c + 1];
        }
        if (gk) {
          gk[2 * c] += gc * xv[2 * p * C + c];
          gk[2 * c + 1] += gc * xv[(2 * p + 1) * C + c];
        }
      }
  });
}

/// Full kernel-2 stride-2 convolution: x[..., 2m, Cin], weight[2*Cin, Cout]
/// (tap-major rows: first Cin rows act on the left element) -> [..., m, Cout].
template <class T>
BasicTensor<T> conv1d_k2s2(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (x.rank() < 2 || x.dim(x.rank() - 2) % 2 != 0) throw ShapeError("conv1d_k2s2", x.shape(), weight.shape());
  Shape pairs = x.shape();
  pairs[pairs.size() - 2] /= 2;
  pairs.back() *= 2;
  return linear(reshape(x, pairs), weight, bias);
}

/// Stride-1 transposed convolution: x[..., w, Cin], weight[k, Cin, Cout],
/// bias[Cout] (optional) -> [..., w + k - 1, Cout];
/// y[j] = bias + sum_m x[j - m] @ weight[m].
template <class T>
BasicTensor<T> conv_transpose1d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (x.rank() < 2 || weight.rank() != 3 || weight.dim(1) != x.shape().back()) {
    throw ShapeError("conv_transpose1d", x.shape(), weight.shape());
  }
  const std::size_t k = weight.dim(0);
  const std::size_t cin = weight.dim(1);
  const std::size_t cout = weight.dim(2);
  const std::size_t w = x.dim(x.rank() - 2);
  const std::size_t wo = w + k - 1;
  const std::size_t outer = x.numel() / (w * cin);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) throw ShapeError("conv_transpose1d bias", weight.shape(), bias.shape());
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = wo;
  out_shape.back() = cout;
  Buffer<T> out(outer * wo * cout);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < outer * wo; ++r) std::memcpy(out.data() + r * cout, bv.data(), cout * sizeof(T));
  }
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < k; ++m)
      kernel::gemm_nn(w, cout, cin, xv + o * w * cin, wv + m * cin * cout, out.data() + (o * wo + m) * cout);
  detail::Inputs<T> inputs{&x, &weight};
  if (bias.defined()) inputs.push_back(&bias);
  return detail::make_result<T>(std::move(out_shape), std::move(out), inputs, [outer, k, cin, cout, w, wo](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv = self.inputs[0]->data.data();
    const T* wv = self.inputs[1]->data.data();
    T* gx = detail::input_grad(self, 0);
    T* gw = detail::input_grad(self, 1);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t m = 0; m < k; ++m) {
        const T* go = g + (o * wo + m) * cout;
        if (gx) kernel::gemm_nt(w, cout, cin, go, wv + m * cin * cout, gx + o * w * cin);
        if (gw) kernel::gemm_tn(w, cout, cin, xv + o * w * cin, go, gw + m * cin * cout);
      }
    if (self.inputs.size() > 2) {
      if (T* gb = detail::input_grad(self, 2))
        for (std::size_t r = 0; r < outer * wo; ++r)
          for (std::size_t c = 0; c < cout; ++c) gb[c] += g[r * cout + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention scores

/// scores[n, i, j] = scale * <q[n, i], k[n, j]> for q[N, M, d], k[N, T, d].
/// With a causal offset c, entries with j > i + c are -inf and never computed.
/// Each computed dot product adds d to op_counter().score_macs.
template <class T>
BasicTensor<T> dot_scores(const BasicTensor<T>& q, const BasicTensor<T>& k, T factor,
                          std::optional<std::int64_t> causal_offset = std::nullopt) {
  if (q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) throw ShapeError("dot_scores", q.shape(), k.shape());
  const std::size_t N = q.dim(0), M = q.dim(1), Tn = k.dim(1), d = q.dim(2);
  const auto limit = [causal_offset, Tn](std::size_t i) -> std::size_t {
    if (!causal_offset) return Tn;
    const std::int64_t last = static_cast<std::int64_t>(i) + *causal_offset;
    if (last < 0) return 0;
    return std::min<std::size_t>(Tn, static_cast<std::size_t>(last) + 1);
  };
  Buffer<T> out(N * M * Tn, -std::numeric_limits<T>::infinity());
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  std::uint64_t macs = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < M; ++i) {
      const T* qi = qv + (n * M + i) * d;
      T* row = out.data() + (n * M + i) * Tn;
      const std::size_t lim = limit(i);
      for (std::size_t j = 0; j < lim; ++j) {
        const T* kj = kv + (n * Tn + j) * d;
        T acc = 0;
        for (std::size_t e = 0; e < d; ++e) acc += qi[e] * kj[e];
        row[j] = acc * factor;
      }
      macs += lim * d;
    }
  op_counter().score_macs += macs;
  return detail::make_result<T>({N, M, Tn}, std::move(out), {&q, &k}, [N, M, Tn, d, factor, limit](Node<T>& self) {
    const T* g = self.grad.data();
    const T* qv = self.inputs[0]->data.data();
    const T* kv = self.inputs[1]->data.data();
    T* gq = detail::input_grad(self, 0);
    T* gk = detail::input_grad(self, 1);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < M; ++i) {
        const std::size_t lim = limit(i);
        for (std::size_t j = 0; j < lim; ++j) {
          const T gij = g[(n * M + i) * Tn + j] * factor;
          if (gq) {
            T* dq = gq + (n * M + i) * d;
            const T* kj = kv + (n * Tn + j) * d;
            for (std::size_t e = 0; e < d; ++e) dq[e] += gij * kj[e];
          }
          if (gk) {
            T* dk = gk + (n * Tn + j) * d;
            const T* qi = qv + (n * M + i) * d;
            for (std::size_t e = 0; e < d; ++e) dk[e] += gij * qi[e];
          }
        }
      }
  });
}

}  // namespace lmn
