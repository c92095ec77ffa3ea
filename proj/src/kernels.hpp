#pragma once

// Internal dense kernels shared by the op implementations. All loops are
// element-parallel safe: every output element is written by exactly one
// iteration, so results do not depend on the thread count.

#include <cstdint>

#include "stnet/tensor.hpp"

namespace stnet::kern {

template <typename T> T* buf(TensorImpl& t);
template <> inline float* buf<float>(TensorImpl& t) { return t.f32.data(); }
template <> inline double* buf<double>(TensorImpl& t) { return t.f64.data(); }

template <typename T> const T* buf(const TensorImpl& t);
template <> inline const float* buf<float>(const TensorImpl& t) { return t.f32.data(); }
template <> inline const double* buf<double>(const TensorImpl& t) { return t.f64.data(); }

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous.
// 4 output rows in flight so each B row is loaded once per row block.
template <typename T>
void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
              int64_t m, int64_t k, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* c0 = c + i * n;
        T* c1 = c0 + n;
        T* c2 = c1 + n;
        T* c3 = c2 + n;
        const T* a0 = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
            const T* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                const T bv = bp[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_abt_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                  int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        int64_t j = 0;
        for (; j + 4 <= n; j += 4) {
            const T* b0 = b + j * k;
            const T* b1 = b0 + k;
            const T* b2 = b1 + k;
            const T* b3 = b2 + k;
            T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
            for (int64_t p = 0; p < k; ++p) {
                const T av = ai[p];
                s0 += av * b0[p];
                s1 += av * b1[p];
                s2 += av * b2[p];
                s3 += av * b3[p];
            }
            ci[j] += s0;
            ci[j + 1] += s1;
            ci[j + 2] += s2;
            ci[j + 3] += s3;
        }
        for (; j < n; ++j) {
            const T* bj = b + j * k;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
// 4 rows of A/B in flight so each C row is touched once per block.
template <typename T>
void gemm_atb_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                  int64_t m, int64_t k, int64_t n) {
    int64_t p = 0;
    for (; p + 4 <= m; p += 4) {
        const T* a0 = a + p * k;
        const T* b0 = b + p * n;
        for (int64_t i = 0; i < k; ++i) {
            const T v0 = a0[i], v1 = a0[k + i], v2 = a0[2 * k + i], v3 = a0[3 * k + i];
            T* ci = c + i * n;
            const T* b1 = b0 + n;
            const T* b2 = b1 + n;
            const T* b3 = b2 + n;
            for (int64_t j = 0; j < n; ++j)
                ci[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; p < m; ++p) {
        const T* ap = a + p * k;
        const T* bp = b + p * n;
        for (int64_t i = 0; i < k; ++i) {
            const T av = ap[i];
            if (av == T(0)) continue;
            T* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

struct ConvGeom {
    int64_t c_in, h_in, w_in;
    int64_t k, stride, pad, dil;
    int64_t h_out, w_out;
};

// col is [(c_in*k*k) x (h_out*w_out)], row-major
template <typename T>
void im2col(const T* __restrict x, T* __restrict col, const ConvGeom& g) {
    const int64_t ohw = g.h_out * g.w_out;
    for (int64_t c = 0; c < g.c_in; ++c) {
        for (int64_t ky = 0; ky < g.k; ++ky) {
            for (int64_t kx = 0; kx < g.k; ++kx) {
                T* row = col + ((c * g.k + ky) * g.k + kx) * ohw;
                const T* xc = x + c * g.h_in * g.w_in;
                for (int64_t oy = 0; oy < g.h_out; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
                    T* dst = row + oy * g.w_out;
                    if (iy < 0 || iy >= g.h_in) {
                        for (int64_t ox = 0; ox < g.w_out; ++ox) dst[ox] = T(0);
                        continue;
                    }
                    const T* src = xc + iy * g.w_in;
                    for (int64_t ox = 0; ox < g.w_out; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
                        dst[ox] = (ix >= 0 && ix < g.w_in) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// scatter-add of a col buffer back onto the image; single-writer per call
template <typename T>
void col2im_acc(const T* __restrict col, T* __restrict x, const ConvGeom& g) {
    const int64_t ohw = g.h_out * g.w_out;
    for (int64_t c = 0; c < g.c_in; ++c) {
        T* xc = x + c * g.h_in * g.w_in;
        for (int64_t ky = 0; ky < g.k; ++ky) {
            for (int64_t kx = 0; kx < g.k; ++kx) {
                const T* row = col + ((c * g.k + ky) * g.k + kx) * ohw;
                for (int64_t oy = 0; oy < g.h_out; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
                    if (iy < 0 || iy >= g.h_in) continue;
                    const T* src = row + oy * g.w_out;
                    T* dst = xc + iy * g.w_in;
                    for (int64_t ox = 0; ox < g.w_out; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
                        if (ix >= 0 && ix < g.w_in) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace stnet::kern
