// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <span>
#include <type_traits>

#include "loffta/tracking.hpp"

namespace loffta {

/// Row-major dense matrix over tracked storage.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    tracked_vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

    T* row(std::size_t i) noexcept { return data.data() + i * cols; }
    const T* row(std::size_t i) const noexcept { return data.data() + i * cols; }
    T& operator()(std::size_t i, std::size_t j) noexcept { return data[i * cols + j]; }
    T operator()(std::size_t i, std::size_t j) const noexcept { return data[i * cols + j]; }
    std::size_t size() const noexcept { return data.size(); }
    void zero() noexcept { std::fill(data.begin(), data.end(), T(0)); }
    /// Zero-filled r x c; keeps the allocation when it is large enough.
    void reshape(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        data.assign(r * c, T(0));
    }
};

namespace kernels {

namespace detail {

// GCC/Clang vector extension; lowered to whatever SIMD width the target has.
template <class T>
struct simd;
template <>
struct simd<float> {
    typedef float type __attribute__((vector_size(64)));
};
template <>
struct simd<double> {
    typedef double type __attribute__((vector_size(64)));
};
template <class T>
using vec = typename simd<T>::type;

template <class T>
inline vec<T> load(const T* p) noexcept {
    vec<T> v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

template <class T>
inline void add_store(T* p, std::type_identity_t<vec<T>> v) noexcept {
    vec<T> cur;
    std::memcpy(&cur, p, sizeof(v));
    cur += v;
    std::memcpy(p, &cur, sizeof(v));
}

// GCC warns spuriously on the tail loops once sizes are constant-folded.
#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Waggressive-loop-optimizations"
#endif

// C[n x m] += op(A) * B[k x m] where op(A)(i, p) = a[i * ars + p * aps].
// 4 x (2 vectors) register tiles; ragged edges fall back to plain loops.
// Row tiles are the outer loop so each strip of A is reused across all
// column tiles while it is hot.
template <std::size_t R, class T>
inline void gemm_rows(const T* a, std::size_t ars, std::size_t aps, const T* b, T* c, std::size_t k,
                      std::size_t m) {
    constexpr std::size_t kLanes = sizeof(vec<T>) / sizeof(T);
    constexpr std::size_t kCols = 2 * kLanes;
    std::size_t j0 = 0;
    for (; j0 + kCols <= m; j0 += kCols) {
        vec<T> c0[R] = {}, c1[R] = {};
        for (std::size_t p = 0; p < k; ++p) {
            const T* bp = b + p * m + j0;
            const vec<T> b0 = load(bp), b1 = load(bp + kLanes);
            const T* ap = a + p * aps;
            for (std::size_t r = 0; r < R; ++r) {
                const T x = ap[r * ars];
                c0[r] += x * b0;
                c1[r] += x * b1;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            add_store(c + r * m + j0, c0[r]);
            add_store(c + r * m + j0 + kLanes, c1[r]);
        }
    }
    if (j0 == m) return;
    for (std::size_t r = 0; r < R; ++r) {
        T* cr = c + r * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[r * ars + p * aps];
            const T* bp = b + p * m;
            for (std::size_t j = j0; j < m; ++j) cr[j] += av * bp[j];
        }
    }
}

template <class T>
void gemm_acc(const T* a, std::size_t ars, std::size_t aps, const T* b, T* c, std::size_t n, std::size_t k,
              std::size_t m) {
    // Panels of B sized to stay in L2 across all row tiles.
    constexpr std::size_t kPanelBytes = 128 * 1024;
    const std::size_t kc = std::max<std::size_t>(16, kPanelBytes / (sizeof(T) * std::max<std::size_t>(m, 1)));
    for (std::size_t p0 = 0; p0 < k; p0 += kc) {
        const std::size_t kb = std::min(kc, k - p0);
        const T* ap = a + p0 * aps;
        const T* bp = b + p0 * m;
        std::size_t i0 = 0;
        for (; i0 + 4 <= n; i0 += 4) gemm_rows<4>(ap + i0 * ars, ars, aps, bp, c + i0 * m, kb, m);
        for (; i0 < n; ++i0) gemm_rows<1>(ap + i0 * ars, ars, aps, bp, c + i0 * m, kb, m);
    }
}

#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic pop
#endif

}  // namespace detail

// C[n x m] (+)= A[n x k] * B[k x m]
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + n * m, T(0));
    detail::gemm_acc(a, k, 1, b, c, n, k, m);
}

// C[k x m] += A[n x k]^T * B[n x m]
template <class T>
void matmul_tn_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    detail::gemm_acc(a, 1, k, b, c, k, n, m);
}

// C[n x k] (+)= A[n x m] * B[k x m]^T; B is transposed into scratch first.
template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k, bool accumulate = false,
               tracked_vector<T>* scratch = nullptr) {
    tracked_vector<T> local;
    tracked_vector<T>& bt = scratch ? *scratch : local;
    bt.resize(m * k);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < m; ++j) bt[j * k + i] = b[i * m + j];
    }
    matmul(a, bt.data(), c, n, m, k, accumulate);
}

// y[j] += sum_i x[i, j]
template <class T>
void column_sum_acc(const T* x, T* y, std::size_t n, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* xi = x + i * m;
        for (std::size_t j = 0; j < m; ++j) y[j] += xi[j];
    }
}

template <class T>
void add_row_bias(T* x, const T* bias, std::size_t n, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        T* xi = x + i * m;
        for (std::size_t j = 0; j < m; ++j) xi[j] += bias[j];
    }
}

}  // namespace kernels
}  // namespace loffta
