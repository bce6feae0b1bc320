// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Diagonal affine recurrences h_t = a_t * h_{t-1} + b_t (elementwise), solved
// either left to right or with a work-efficient two-sweep associative scan.
// Works for real and complex scalars.

#pragma once

#include <algorithm>
#include <complex>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <thread>
#include <type_traits>
#include <vector>

namespace cmru {

template <class S>
struct is_complex : std::false_type {};
template <class T>
struct is_complex<std::complex<T>> : std::true_type {};

template <class S>
constexpr S conj_if_complex(const S& v) {
  if constexpr (is_complex<S>::value) {
    return std::conj(v);
  } else {
    return v;
  }
}

// One step of the recurrence: the map h -> a * h + b.
template <class S>
struct AffineElement {
  std::vector<S> a;
  std::vector<S> b;

  std::size_t dim() const { return a.size(); }

  static AffineElement identity(std::size_t d) { return {std::vector<S>(d, S(1)), std::vector<S>(d, S(0))}; }
};

// Applies `first`, then `second`.
template <class S>
AffineElement<S> combine(const AffineElement<S>& first, const AffineElement<S>& second) {
  if (first.a.size() != second.a.size() || first.b.size() != first.a.size() || second.b.size() != second.a.size())
    throw std::invalid_argument("combine: dimension mismatch");
  AffineElement<S> out;
  out.a.resize(first.a.size());
  out.b.resize(first.a.size());
  for (std::size_t i = 0; i < first.a.size(); ++i) {
    out.a[i] = second.a[i] * first.a[i];
    out.b[i] = second.a[i] * first.b[i] + second.b[i];
  }
  return out;
}

struct ScanOptions {
  int threads = 1;
  // Time-parallel execution inside one sequence only for T >= this.
  int time_parallel_threshold = 256;
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
}

template <class S>
void sequential_flat(const S* a, const S* b, int T, int d, const S* h0, S* h) {
  for (int j = 0; j < d; ++j) h[j] = a[j] * (h0 ? h0[j] : S(0)) + b[j];
  for (int t = 1; t < T; ++t) {
    const S* at = a + static_cast<std::size_t>(t) * d;
    const S* bt = b + static_cast<std::size_t>(t) * d;
    const S* prev = h + static_cast<std::size_t>(t - 1) * d;
    S* cur = h + static_cast<std::size_t>(t) * d;
    for (int j = 0; j < d; ++j) cur[j] = at[j] * prev[j] + bt[j];
  }
}

// Blelloch up-sweep / down-sweep over a power-of-two padded copy. The
// combination tree depends only on T, so any thread count gives bit-identical
// output.
template <class S>
void blelloch_flat(const S* a, const S* b, int T, int d, const S* h0, S* h, int threads) {
  std::size_t n = 1;
  while (n < static_cast<std::size_t>(T)) n <<= 1;
  const std::size_t dd = static_cast<std::size_t>(d);
  std::vector<S> A(n * dd, S(1)), B(n * dd, S(0));
  std::copy(a, a + static_cast<std::size_t>(T) * dd, A.begin());
  std::copy(b, b + static_cast<std::size_t>(T) * dd, B.begin());

  // Combine slot `lo` (earlier) into slot `hi` (later): e[hi] = e[lo] then e[hi].
  auto up = [&](std::size_t lo, std::size_t hi) {
    S* al = &A[lo * dd];
    S* bl = &B[lo * dd];
    S* ah = &A[hi * dd];
    S* bh = &B[hi * dd];
    for (std::size_t j = 0; j < dd; ++j) {
      bh[j] = ah[j] * bl[j] + bh[j];
      ah[j] = ah[j] * al[j];
    }
  };

  for (std::size_t stride = 1; stride < n; stride <<= 1) {
    const std::size_t count = n / (2 * stride);
    parallel_for(count, count >= 64 ? threads : 1, [&](std::size_t k) {
      const std::size_t hi = (k + 1) * 2 * stride - 1;
      up(hi - stride, hi);
    });
  }

  // Exclusive prefix: root gets the identity.
  std::fill(A.begin() + static_cast<std::ptrdiff_t>((n - 1) * dd), A.begin() + static_cast<std::ptrdiff_t>(n * dd), S(1));
  std::fill(B.begin() + static_cast<std::ptrdiff_t>((n - 1) * dd), B.begin() + static_cast<std::ptrdiff_t>(n * dd), S(0));

  for (std::size_t stride = n >> 1; stride >= 1; stride >>= 1) {
    const std::size_t count = n / (2 * stride);
    parallel_for(count, count >= 64 ? threads : 1, [&](std::size_t k) {
      const std::size_t hi = (k + 1) * 2 * stride - 1;
      const std::size_t lo = hi - stride;
      S* al = &A[lo * dd];
      S* bl = &B[lo * dd];
      S* ah = &A[hi * dd];
      S* bh = &B[hi * dd];
      for (std::size_t j = 0; j < dd; ++j) {
        // prefix(lo) = prefix(hi); prefix(hi) = prefix(hi) then aggregate(left subtree)
        const S left_a = al[j];
        const S left_b = bl[j];
        al[j] = ah[j];
        bl[j] = bh[j];
        bh[j] = left_a * bh[j] + left_b;
        ah[j] = left_a * ah[j];
      }
    });
    if (stride == 1) break;
  }

  // Inclusive prefix = exclusive prefix then own element; evaluate at h0.
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * dd;
    for (std::size_t j = 0; j < dd; ++j) {
      const S pa = a[o + j] * A[o + j];
      const S pb = a[o + j] * B[o + j] + b[o + j];
      h[o + j] = pa * (h0 ? h0[j] : S(0)) + pb;
    }
  }
}

}  // namespace detail

enum class ScanMode { sequential, parallel };

// Batched kernel over [batch, time, dim] arrays (sample-major, contiguous).
// h0 is [batch, dim] or null for a zero initial state.
template <class S>
void scan_batch(std::span<const S> a, std::span<const S> b, int batch, int time, int dim, const S* h0, std::span<S> h,
                ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) {
  const std::size_t n = static_cast<std::size_t>(batch) * time * dim;
  if (time < 1 || a.size() != n || b.size() != n || h.size() != n) throw std::invalid_argument("scan_batch: shape mismatch");
  const std::size_t stride = static_cast<std::size_t>(time) * dim;
  const bool time_parallel = mode == ScanMode::parallel && opt.threads > 1 && time >= opt.time_parallel_threshold &&
                             batch < opt.threads;
  const int batch_threads = time_parallel ? 1 : opt.threads;
  detail::parallel_for(static_cast<std::size_t>(batch), batch_threads, [&](std::size_t i) {
    const S* hi = h0 ? h0 + i * dim : nullptr;
    if (mode == ScanMode::sequential) {
      detail::sequential_flat(a.data() + i * stride, b.data() + i * stride, time, dim, hi, h.data() + i * stride);
    } else {
      detail::blelloch_flat(a.data() + i * stride, b.data() + i * stride, time, dim, hi, h.data() + i * stride,
                            time_parallel ? opt.threads : 1);
    }
  });
}

// Reverse-time adjoint of scan_batch. Given g_t = dL/dh_t (direct terms only),
// returns lambda_t = g_t + conj(a_{t+1}) * lambda_{t+1} and, if requested,
// dL/dh0 = conj(a_0) * lambda_0.
template <class S>
void scan_adjoint_batch(std::span<const S> a, std::span<const S> g, int batch, int time, int dim, std::span<S> lambda,
                        S* dh0 = nullptr, ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) {
  const std::size_t n = static_cast<std::size_t>(batch) * time * dim;
  if (a.size() != n || g.size() != n || lambda.size() != n) throw std::invalid_argument("scan_adjoint_batch: shape mismatch");
  const std::size_t stride = static_cast<std::size_t>(time) * dim;
  std::vector<S> ra(n), rg(n), rl(n);
  for (std::size_t i = 0; i < static_cast<std::size_t>(batch); ++i) {
    for (int k = 0; k < time; ++k) {
      const int t = time - 1 - k;
      for (int j = 0; j < dim; ++j) {
        const std::size_t dst = i * stride + static_cast<std::size_t>(k) * dim + j;
        rg[dst] = g[i * stride + static_cast<std::size_t>(t) * dim + j];
        ra[dst] = k == 0 ? S(0) : conj_if_complex(a[i * stride + static_cast<std::size_t>(t + 1) * dim + j]);
      }
    }
  }
  scan_batch<S>(ra, rg, batch, time, dim, nullptr, rl, mode, opt);
  for (std::size_t i = 0; i < static_cast<std::size_t>(batch); ++i) {
    for (int k = 0; k < time; ++k) {
      const int t = time - 1 - k;
      for (int j = 0; j < dim; ++j)
        lambda[i * stride + static_cast<std::size_t>(t) * dim + j] = rl[i * stride + static_cast<std::size_t>(k) * dim + j];
    }
    if (dh0) {
      for (int j = 0; j < dim; ++j) dh0[i * dim + j] = conj_if_complex(a[i * stride + j]) * lambda[i * stride + j];
    }
  }
}

// Element-list front ends. Output is h_1..h_T.
namespace detail {
template <class S>
void flatten(std::span<const AffineElement<S>> elements, std::span<const S> h0, std::vector<S>& a, std::vector<S>& b) {
  if (elements.empty()) throw std::invalid_argument("scan: need at least one element");
  const std::size_t d = h0.size();
  a.reserve(elements.size() * d);
  b.reserve(elements.size() * d);
  for (const auto& e : elements) {
    if (e.a.size() != d || e.b.size() != d) throw std::invalid_argument("scan: dimension mismatch");
    a.insert(a.end(), e.a.begin(), e.a.end());
    b.insert(b.end(), e.b.begin(), e.b.end());
  }
}

template <class S>
std::vector<std::vector<S>> unflatten(const std::vector<S>& h, std::size_t T, std::size_t d) {
  std::vector<std::vector<S>> out(T);
  for (std::size_t t = 0; t < T; ++t) out[t].assign(h.begin() + static_cast<std::ptrdiff_t>(t * d), h.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
  return out;
}
}  // namespace detail

template <class S>
std::vector<std::vector<S>> scan_sequential(std::span<const AffineElement<S>> elements, std::span<const S> h0) {
  std::vector<S> a, b;
  detail::flatten(elements, h0, a, b);
  std::vector<S> h(a.size());
  const int T = static_cast<int>(elements.size());
  const int d = static_cast<int>(h0.size());
  detail::sequential_flat(a.data(), b.data(), T, d, h0.data(), h.data());
  return detail::unflatten(h, elements.size(), h0.size());
}

template <class S>
std::vector<std::vector<S>> scan_parallel(std::span<const AffineElement<S>> elements, std::span<const S> h0,
                                          ScanOptions opt = {}) {
  std::vector<S> a, b;
  detail::flatten(elements, h0, a, b);
  std::vector<S> h(a.size());
  const int T = static_cast<int>(elements.size());
  const int d = static_cast<int>(h0.size());
  const int threads = T >= opt.time_parallel_threshold ? opt.threads : 1;
  detail::blelloch_flat(a.data(), b.data(), T, d, h0.data(), h.data(), threads);
  return detail::unflatten(h, elements.size(), h0.size());
}

}  // namespace cmru
