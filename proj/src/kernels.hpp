#pragma once

// Typed inner loops shared by the tape primitives. All kernels are plain
// sequential code; matmuls are laid out so the innermost loop runs over
// contiguous memory and auto-vectorizes.

#include <cmath>
#include <cstdint>
#include <vector>

namespace moiie::kernels {

inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// C = A·B (or C += with Accumulate), A:[m,k] B:[k,n] C:[m,n]. 4x64
// register-blocked micro-kernel: B row loads are shared across four output
// rows and the accumulator tile never leaves registers inside the k loop.
template <typename T, bool Accumulate>
void matmul_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, int64_t m, int64_t k,
               int64_t n) {
    constexpr int64_t IB = 4, JB = 64;
    int64_t i = 0;
    for (; i + IB <= m; i += IB) {
        int64_t j0 = 0;
        for (; j0 + JB <= n; j0 += JB) {
            T acc[IB][JB] = {};
            for (int64_t p = 0; p < k; ++p) {
                const T* brow = b + p * n + j0;
                for (int64_t r = 0; r < IB; ++r) {
                    const T av = a[(i + r) * k + p];
                    for (int64_t j = 0; j < JB; ++j) acc[r][j] += av * brow[j];
                }
            }
            for (int64_t r = 0; r < IB; ++r) {
                T* cb = c + (i + r) * n + j0;
                if constexpr (Accumulate) {
                    for (int64_t j = 0; j < JB; ++j) cb[j] += acc[r][j];
                } else {
                    for (int64_t j = 0; j < JB; ++j) cb[j] = acc[r][j];
                }
            }
        }
        if (j0 < n) {
            for (int64_t r = 0; r < IB; ++r) {
                T* crow = c + (i + r) * n;
                if constexpr (!Accumulate) {
                    for (int64_t j = j0; j < n; ++j) crow[j] = T(0);
                }
                const T* arow = a + (i + r) * k;
                for (int64_t p = 0; p < k; ++p) {
                    const T av = arow[p];
                    const T* brow = b + p * n;
                    for (int64_t j = j0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
    for (; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        if constexpr (!Accumulate) {
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        }
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C = A·B^T, A:[m,k] B:[n,k] C:[m,n]. Materializing B^T and running the
// nn loop beats per-row dot products by a wide margin (the transpose is
// O(kn) against O(mkn) multiplies).
template <typename T, bool Accumulate>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    std::vector<T> bt(static_cast<size_t>(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) bt[static_cast<size_t>(p * n + j)] = b[j * k + p];
    matmul_nn<T, Accumulate>(a, bt.data(), c, m, k, n);
}

// C = A^T·B, A:[m,k] B:[m,n] C:[k,n]. Four source rows per sweep over C
// quarters the traffic through the output block.
template <typename T, bool Accumulate>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    if constexpr (!Accumulate) {
        for (int64_t i = 0; i < k * n; ++i) c[i] = T(0);
    }
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const T *a0 = a + i * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
        const T *b0 = b + i * n, *b1 = b0 + n, *b2 = b1 + n, *b3 = b2 + n;
        for (int64_t p = 0; p < k; ++p) {
            const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
            T* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j)
                crow[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
T gelu_fwd(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2)));
}

template <typename T>
T gelu_bwd(T x) {
    const T phi = T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
    return T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2))) + x * phi;
}

// Numerically stable softmax of one contiguous row.
template <typename T>
void softmax_row(const T* x, T* y, int64_t n) {
    T mx = x[0];
    for (int64_t i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
    T s = 0;
    for (int64_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        s += y[i];
    }
    const T inv = T(1) / s;
    for (int64_t i = 0; i < n; ++i) y[i] *= inv;
}

}  // namespace moiie::kernels
