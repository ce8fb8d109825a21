// AVX2 variants of the convolution kernels. Compiled with -mavx2 in its own
// translation unit; callers reach these only through the runtime dispatch in
// kernels_scalar.cpp after a CPU check.
//
// Bit-equivalence contract: every output element is produced by the same
// sequence of multiplies and adds as the scalar reference (4 output positions
// ride in one vector; out-of-range taps are zero-filled, and x + (+-0) == x
// for every x the accumulator can reach since +0 + -0 rounds to +0). FMA
// intrinsics are deliberately not used and FP contraction is disabled
// project-wide.

#include "invflow/kernels.hpp"

#if defined(__AVX2__)

#include <immintrin.h>

namespace invflow::kernels {

namespace {

// x[chan] columns s0..s0+3 of one row, element stride `stride` doubles,
// zero-filling columns outside [0, w).
inline __m256d load_cols(const double* chan, int stride, int s0, int w) {
    if (s0 >= 0 && s0 + 3 < w) {
        if (stride == 1) return _mm256_loadu_pd(chan + s0);
        return _mm256_set_pd(chan[static_cast<std::size_t>(s0 + 3) * stride],
                             chan[static_cast<std::size_t>(s0 + 2) * stride],
                             chan[static_cast<std::size_t>(s0 + 1) * stride],
                             chan[static_cast<std::size_t>(s0) * stride]);
    }
    double v[4];
    for (int t = 0; t < 4; ++t) {
        const int s = s0 + t;
        v[t] = (s >= 0 && s < w) ? chan[static_cast<std::size_t>(s) * stride] : 0.0;
    }
    return _mm256_loadu_pd(v);
}

// Strided gather with a validity window [tmin, tmax]; lanes outside read 0.
inline __m256d gather_lanes(const double* base, long long stride, int tmin, int tmax) {
    double v[4];
    for (int t = 0; t < 4; ++t)
        v[t] = (t >= tmin && t <= tmax) ? base[t * stride] : 0.0;
    return _mm256_loadu_pd(v);
}

// Same, addressed as arr[off + t*stride] so no pointer is ever formed from an
// out-of-range lane (off may be negative for masked-out lanes).
inline __m256d gather_lanes_at(const double* arr, long long off, long long stride,
                               int tmin, int tmax) {
    double v[4];
    for (int t = 0; t < 4; ++t)
        v[t] = (t >= tmin && t <= tmax) ? arr[off + t * stride] : 0.0;
    return _mm256_loadu_pd(v);
}

inline void store_lanes(double* base, long long stride, __m256d val) {
    alignas(32) double v[4];
    _mm256_store_pd(v, val);
    for (int t = 0; t < 4; ++t) base[t * stride] = v[t];
}

}  // namespace

void conv2d_avx2(const double* x, int c_in, int h, int w, const double* weights,
                 int c_out, int k, int pad_top, int pad_left, double* y) {
    // Column lanes only pay off when the input rows are contiguous (c_in == 1);
    // otherwise every tap becomes a 4-way strided gather and the scalar loop
    // is faster on channel-minor data.
    if (c_in > 1) {
        conv2d_scalar<double>(x, c_in, h, w, weights, c_out, k, pad_top, pad_left, y);
        return;
    }
    const std::size_t kk = static_cast<std::size_t>(k) * k;
    for (int a = 0; a < c_out; ++a) {
        for (int i = 0; i < h; ++i) {
            int j = 0;
            for (; j + 4 <= w; j += 4) {
                __m256d acc = _mm256_setzero_pd();
                for (int ki = 0; ki < k; ++ki) {
                    const int r = i + ki - pad_top;
                    if (r < 0 || r >= h) continue;
                    const double* xrow = x + static_cast<std::size_t>(r) * w * c_in;
                    for (int kj = 0; kj < k; ++kj) {
                        const int s0 = j + kj - pad_left;
                        const double* wp = weights + weight_index(a, 0, ki, kj, c_in, k);
                        for (int b = 0; b < c_in; ++b) {
                            const __m256d wv = _mm256_set1_pd(wp[b * kk]);
                            const __m256d xv = load_cols(xrow + b, c_in, s0, w);
                            acc = _mm256_add_pd(acc, _mm256_mul_pd(wv, xv));
                        }
                    }
                }
                double* yp = y + (static_cast<std::size_t>(i) * w + j) * c_out + a;
                if (c_out == 1)
                    _mm256_storeu_pd(yp, acc);
                else
                    store_lanes(yp, c_out, acc);
            }
            for (; j < w; ++j) {  // scalar tail, reference loop body
                double acc = 0.0;
                for (int ki = 0; ki < k; ++ki) {
                    const int r = i + ki - pad_top;
                    if (r < 0 || r >= h) continue;
                    const double* xrow = x + static_cast<std::size_t>(r) * w * c_in;
                    for (int kj = 0; kj < k; ++kj) {
                        const int s = j + kj - pad_left;
                        if (s < 0 || s >= w) continue;
                        const double* xp = xrow + static_cast<std::size_t>(s) * c_in;
                        const double* wp = weights + weight_index(a, 0, ki, kj, c_in, k);
                        for (int b = 0; b < c_in; ++b) acc += wp[b * kk] * xp[b];
                    }
                }
                y[(static_cast<std::size_t>(i) * w + j) * c_out + a] = acc;
            }
        }
    }
}

void masked_conv_forward_avx2(const double* x, int c, int h, int w,
                              const double* weights, int k, double* y) {
    // Same crossover as conv2d_avx2: strided gathers lose to scalar for c > 1.
    if (c > 1) {
        masked_conv_forward_scalar<double>(x, c, h, w, weights, k, y);
        return;
    }
    const int pad = k - 1;
    const std::size_t kk = static_cast<std::size_t>(k) * k;
    for (int a = 0; a < c; ++a) {
        for (int i = 0; i < h; ++i) {
            const double* xline = x + static_cast<std::size_t>(i) * w * c;
            int j = 0;
            for (; j + 4 <= w; j += 4) {
                __m256d acc = _mm256_setzero_pd();
                for (int b = 0; b < a; ++b) {
                    const __m256d wv =
                        _mm256_set1_pd(weights[weight_index(a, b, pad, pad, c, k)]);
                    acc = _mm256_add_pd(acc, _mm256_mul_pd(wv, load_cols(xline + b, c, j, w)));
                }
                for (int ki = 0; ki < k; ++ki) {
                    const int r = i + ki - pad;
                    if (r < 0) continue;
                    const double* xrow = x + static_cast<std::size_t>(r) * w * c;
                    for (int kj = 0; kj < k; ++kj) {
                        if (ki == pad && kj == pad) break;
                        const int s0 = j + kj - pad;
                        const double* wp = weights + weight_index(a, 0, ki, kj, c, k);
                        for (int b = 0; b < c; ++b) {
                            const __m256d wv = _mm256_set1_pd(wp[b * kk]);
                            const __m256d xv = load_cols(xrow + b, c, s0, w);
                            acc = _mm256_add_pd(acc, _mm256_mul_pd(wv, xv));
                        }
                    }
                }
                const __m256d self = load_cols(xline + a, c, j, w);
                const __m256d res = _mm256_add_pd(self, acc);
                double* yp = y + (static_cast<std::size_t>(i) * w + j) * c + a;
                if (c == 1)
                    _mm256_storeu_pd(yp, res);
                else
                    store_lanes(yp, c, res);
            }
            for (; j < w; ++j) {
                const std::size_t p = (static_cast<std::size_t>(i) * w + j) * c;
                double acc = 0.0;
                for (int b = 0; b < a; ++b)
                    acc += weights[weight_index(a, b, pad, pad, c, k)] * x[p + b];
                for (int ki = 0; ki < k; ++ki) {
                    const int r = i + ki - pad;
                    if (r < 0) continue;
                    const double* xrow = x + static_cast<std::size_t>(r) * w * c;
                    for (int kj = 0; kj < k; ++kj) {
                        if (ki == pad && kj == pad) break;
                        const int s = j + kj - pad;
                        if (s < 0) continue;
                        const double* xp = xrow + static_cast<std::size_t>(s) * c;
                        const double* wp = weights + weight_index(a, 0, ki, kj, c, k);
                        for (int b = 0; b < c; ++b) acc += wp[b * kk] * xp[b];
                    }
                }
                y[p + a] = x[p + a] + acc;
            }
        }
    }
}

void masked_conv_solve_avx2(const double* y, int c, int h, int w,
                            const double* weights, int k, double* x) {
    const int pad = k - 1;
    const std::size_t kk = static_cast<std::size_t>(k) * k;
    // Lane t rides pixel (i0+t, j0-t) of one anti-diagonal; consecutive lanes
    // are c*(w-1) doubles apart. Cross-pixel reads land on earlier diagonals,
    // already fully solved, so the four lanes are independent.
    const long long stride = static_cast<long long>(c) * (w - 1);
    for (int d = 0; d <= h + w - 2; ++d) {
        const int i_lo = d > w - 1 ? d - (w - 1) : 0;
        const int i_hi = d < h - 1 ? d : h - 1;
        int i = i_lo;
        for (; i + 3 <= i_hi && stride > 0; i += 4) {
            const int j0 = d - i;
            const double* ybase =
                y + (static_cast<std::size_t>(i) * w + j0) * c;
            double* xbase = x + (static_cast<std::size_t>(i) * w + j0) * c;
            for (int a = 0; a < c; ++a) {
                __m256d acc = _mm256_setzero_pd();
                for (int b = 0; b < a; ++b) {
                    const __m256d wv =
                        _mm256_set1_pd(weights[weight_index(a, b, pad, pad, c, k)]);
                    acc = _mm256_add_pd(acc,
                                        _mm256_mul_pd(wv, gather_lanes(xbase + b, stride, 0, 3)));
                }
                for (int ki = 0; ki < k; ++ki) {
                    const int di = pad - ki;  // rows above: r_t = i + t - di
                    const int tmin = di - i > 0 ? di - i : 0;
                    if (tmin > 3) continue;
                    for (int kj = 0; kj < k; ++kj) {
                        if (ki == pad && kj == pad) break;
                        const int dj = pad - kj;  // cols left: s_t = j0 - t - dj
                        const int tmax = j0 - dj < 3 ? j0 - dj : 3;
                        if (tmax < 0) continue;
                        const long long off =
                            (static_cast<long long>(i - di) * w + (j0 - dj)) * c;
                        const double* wp = weights + weight_index(a, 0, ki, kj, c, k);
                        for (int b = 0; b < c; ++b) {
                            const __m256d wv = _mm256_set1_pd(wp[b * kk]);
                            const __m256d xv = gather_lanes_at(x, off + b, stride, tmin, tmax);
                            acc = _mm256_add_pd(acc, _mm256_mul_pd(wv, xv));
                        }
                    }
                }
                const __m256d yv = gather_lanes(ybase + a, stride, 0, 3);
                store_lanes(xbase + a, stride, _mm256_sub_pd(yv, acc));
            }
        }
        for (; i <= i_hi; ++i)
            detail::solve_pixel<double>(y, x, weights, c, h, w, k, i, d - i, nullptr);
    }
}

}  // namespace invflow::kernels

#else  // !defined(__AVX2__)

namespace invflow::kernels {

void conv2d_avx2(const double* x, int c_in, int h, int w, const double* weights,
                 int c_out, int k, int pad_top, int pad_left, double* y) {
    conv2d_scalar<double>(x, c_in, h, w, weights, c_out, k, pad_top, pad_left, y);
}

void masked_conv_forward_avx2(const double* x, int c, int h, int w,
                              const double* weights, int k, double* y) {
    masked_conv_forward_scalar<double>(x, c, h, w, weights, k, y);
}

void masked_conv_solve_avx2(const double* y, int c, int h, int w,
                            const double* weights, int k, double* x) {
    masked_conv_solve_scalar<double>(y, c, h, w, weights, k, x);
}

}  // namespace invflow::kernels

#endif
