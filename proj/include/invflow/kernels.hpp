#pragma once

#include <cstddef>

namespace invflow::kernels {

// All kernels operate on channel-minor data: index(c, i, j) = c + C*(j + W*i).
// Convolution weights are (C_out, C_in, k, k) row-major:
//   widx(a, b, ki, kj) = ((a*C_in + b)*k + ki)*k + kj.
//
// The scalar kernels are the reference semantics. The AVX2 variants perform,
// per output element, the same multiplies and adds in the same order as the
// scalar code (out-of-range taps contribute an exact +-0), so with FP
// contraction disabled the two backends produce bit-identical results. The
// equivalence suite asserts exactly that.

inline std::size_t weight_index(int a, int b, int ki, int kj, int c_in, int k) {
    return ((static_cast<std::size_t>(a) * c_in + b) * k + ki) * k + kj;
}

/// Work counters filled by the instrumented scalar paths.
struct SolveStats {
    long long stages = 0;      // sequential anti-diagonal stages executed
    long long multiplies = 0;  // real multiplies performed
};

enum class Backend { Auto, Scalar, Avx2 };

/// Resolve the active backend: explicit set_backend() wins, then the
/// INVFLOW_SIMD env var (scalar|avx2|auto), then CPU detection.
Backend active_backend();
void set_backend(Backend b);
bool avx2_supported();

// ---------------------------------------------------------------------------
// Plain 2D convolution, same-size output, zero taps outside the input:
//   y[a,i,j] = sum_{ki,kj,b} w[a,b,ki,kj] * x[b, i+ki-pad_top, j+kj-pad_left]
// ---------------------------------------------------------------------------

template <typename T>
void conv2d_scalar(const T* x, int c_in, int h, int w, const T* weights, int c_out,
                   int k, int pad_top, int pad_left, T* y,
                   SolveStats* stats = nullptr);

void conv2d_avx2(const double* x, int c_in, int h, int w, const double* weights,
                 int c_out, int k, int pad_top, int pad_left, double* y);

/// Dispatching entry point (double).
void conv2d(const double* x, int c_in, int h, int w, const double* weights, int c_out,
            int k, int pad_top, int pad_left, double* y);

/// Weight gradient of the plain convolution:
///   dw[a,b,ki,kj] = sum_{i,j} g[a,i,j] * x[b, i+ki-pad_top, j+kj-pad_left]
void conv2d_weight_grad(const double* x, int c_in, int h, int w, const double* g,
                        int c_out, int k, int pad_top, int pad_left, double* dw);

// ---------------------------------------------------------------------------
// Masked convolution with top/left padding of k-1. The (k-1, k-1) tap is the
// structural unit-lower-triangular channel mixing: weight 1 on the diagonal
// and 0 above it are never multiplied explicitly, so forward and solve perform
// identical multiply counts.
//   y[a,i,j] = x[a,i,j] + sum_{b<a} w[a,b,k-1,k-1]*x[b,i,j]
//            + sum_{(di,dj)!=(0,0)} sum_b w[a,b,k-1-di,k-1-dj]*x[b,i-di,j-dj]
// ---------------------------------------------------------------------------

template <typename T>
void masked_conv_forward_scalar(const T* x, int c, int h, int w, const T* weights,
                                int k, T* y, SolveStats* stats = nullptr);

void masked_conv_forward_avx2(const double* x, int c, int h, int w,
                              const double* weights, int k, double* y);

void masked_conv_forward(const double* x, int c, int h, int w, const double* weights,
                         int k, double* y);

// Back-substitution solving masked_conv_forward(x) = y for x. Anti-diagonals
// d = i+j are processed in increasing order; pixels within a diagonal are
// mutually independent.

template <typename T>
void masked_conv_solve_scalar(const T* y, int c, int h, int w, const T* weights,
                              int k, T* x, SolveStats* stats = nullptr);

void masked_conv_solve_avx2(const double* y, int c, int h, int w,
                            const double* weights, int k, double* x);

void masked_conv_solve(const double* y, int c, int h, int w, const double* weights,
                       int k, double* x);

/// Solves the transposed system conv^T(u) = g: anti-diagonals in decreasing
/// order with the spatially flipped, channel-transposed kernel.
template <typename T>
void masked_conv_solve_transpose_scalar(const T* g, int c, int h, int w,
                                        const T* weights, int k, T* u,
                                        SolveStats* stats = nullptr);

void masked_conv_solve_transpose(const double* g, int c, int h, int w,
                                 const double* weights, int k, double* u);

// Single-pixel solve steps shared by the sequential and thread-parallel
// drivers; exposed so both produce bit-identical results.
namespace detail {

template <typename T>
void solve_pixel(const T* y, T* x, const T* weights, int c, int h, int w, int k,
                 int i, int j, SolveStats* stats);

template <typename T>
void solve_pixel_transpose(const T* g, T* u, const T* weights, int c, int h, int w,
                           int k, int i, int j, SolveStats* stats);

}  // namespace detail

}  // namespace invflow::kernels
