#pragma once

#include <utility>
#include <vector>

#include "invflow/kernels.hpp"
#include "invflow/masked_kernel.hpp"
#include "invflow/tensor.hpp"

namespace invflow {

class ThreadPool;

/// The anti-diagonal wavefront order: diagonal d holds the pixels {(i,j) :
/// i+j = d}, which are mutually independent during back-substitution. There
/// are exactly H+W-1 diagonals.
struct DiagonalSchedule {
    std::vector<std::vector<std::pair<int, int>>> diagonals;

    static DiagonalSchedule build(int h, int w);
    std::size_t stage_count() const { return diagonals.size(); }
};

/// Padded masked convolution y = M x (the sampling-direction transform).
Tensor3 conv_forward(const Tensor3& x, const MaskedKernel& kernel,
                     kernels::SolveStats* stats = nullptr);

/// Exact inverse x = M^{-1} y by back-substitution over increasing diagonals
/// (the training-direction transform).
Tensor3 conv_inverse(const Tensor3& y, const MaskedKernel& kernel,
                     kernels::SolveStats* stats = nullptr);

/// Same values as conv_inverse, bit-identically, with the pixels of each
/// diagonal spread across the pool and a barrier between stages.
Tensor3 conv_inverse_parallel(const Tensor3& y, const MaskedKernel& kernel,
                              ThreadPool& pool);

/// log|det M| of the padded masked convolution: identically 0 (unit
/// triangular), in both the sampling and training directions.
double logdet(const MaskedKernel& kernel, int h, int w);

/// Gradient of the training-direction map x = conv_inverse(y): given dL/dx,
/// returns dL/dy = M^{-T} dL/dx via a transposed triangular solve over
/// decreasing diagonals.
Tensor3 grad_input(const Tensor3& dL_dx, const MaskedKernel& kernel);

/// Gradient of x = conv_inverse(y, K) w.r.t. the kernel weights:
///   dL/dW[a,b,ki,kj] = -sum_p u[a,p] * x[b, p - (k-1-ki, k-1-kj)]
/// with u = grad_input(dL_dx) and x = conv_inverse(y). Masked entries are
/// reported as exact 0.
ConvKernel grad_weights(const Tensor3& dL_dx, const Tensor3& y, const MaskedKernel& kernel);

/// Same, reusing already-computed u = grad_input(dL_dx) and x =
/// conv_inverse(y) — the form the training loop calls after it has both.
ConvKernel grad_weights_from(const Tensor3& u, const Tensor3& x, const MaskedKernel& kernel);

/// Number of inherently sequential wavefront stages: H + W - 1.
long long count_sequential_stages(int h, int w);

}  // namespace invflow
