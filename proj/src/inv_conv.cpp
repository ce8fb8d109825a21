#include "invflow/inv_conv.hpp"

#include <algorithm>

#include "invflow/errors.hpp"
#include "invflow/threads.hpp"

namespace invflow {

namespace {

void check_match(const Tensor3& t, const MaskedKernel& kernel, const char* who) {
    if (t.channels() != kernel.channels())
        throw DimensionError(std::string(who) + ": tensor has " +
                             std::to_string(t.channels()) + " channels, kernel expects " +
                             std::to_string(kernel.channels()));
}

}  // namespace

DiagonalSchedule DiagonalSchedule::build(int h, int w) {
    if (h <= 0 || w <= 0) throw DimensionError("DiagonalSchedule: H, W must be positive");
    DiagonalSchedule sched;
    sched.diagonals.resize(static_cast<std::size_t>(h) + w - 1);
    for (int d = 0; d <= h + w - 2; ++d) {
        const int i_lo = std::max(0, d - (w - 1));
        const int i_hi = std::min(d, h - 1);
        auto& diag = sched.diagonals[d];
        diag.reserve(static_cast<std::size_t>(i_hi - i_lo + 1));
        for (int i = i_lo; i <= i_hi; ++i) diag.emplace_back(i, d - i);
    }
    return sched;
}

Tensor3 conv_forward(const Tensor3& x, const MaskedKernel& kernel,
                     kernels::SolveStats* stats) {
    check_match(x, kernel, "conv_forward");
    Tensor3 y(x.channels(), x.height(), x.width());
    if (stats)
        kernels::masked_conv_forward_scalar<double>(x.data(), x.channels(), x.height(),
                                                    x.width(), kernel.weights().data(),
                                                    kernel.ksize(), y.data(), stats);
    else
        kernels::masked_conv_forward(x.data(), x.channels(), x.height(), x.width(),
                                     kernel.weights().data(), kernel.ksize(), y.data());
    return y;
}

Tensor3 conv_inverse(const Tensor3& y, const MaskedKernel& kernel,
                     kernels::SolveStats* stats) {
    check_match(y, kernel, "conv_inverse");
    Tensor3 x(y.channels(), y.height(), y.width());
    if (stats)
        kernels::masked_conv_solve_scalar<double>(y.data(), y.channels(), y.height(),
                                                  y.width(), kernel.weights().data(),
                                                  kernel.ksize(), x.data(), stats);
    else
        kernels::masked_conv_solve(y.data(), y.channels(), y.height(), y.width(),
                                   kernel.weights().data(), kernel.ksize(), x.data());
    return x;
}

Tensor3 conv_inverse_parallel(const Tensor3& y, const MaskedKernel& kernel,
                              ThreadPool& pool) {
    check_match(y, kernel, "conv_inverse_parallel");
    const int c = y.channels(), h = y.height(), w = y.width(), k = kernel.ksize();
    Tensor3 x(c, h, w);
    const double* yp = y.data();
    double* xp = x.data();
    const double* wp = kernel.weights().data();
    const DiagonalSchedule sched = DiagonalSchedule::build(h, w);
    for (const auto& diag : sched.diagonals) {
        // parallel_for blocks until the whole diagonal is solved — the
        // between-stage barrier the dependence structure requires.
        pool.parallel_for(static_cast<long long>(diag.size()),
                          [&](long long lo, long long hi) {
                              for (long long t = lo; t < hi; ++t)
                                  kernels::detail::solve_pixel<double>(
                                      yp, xp, wp, c, h, w, k, diag[t].first,
                                      diag[t].second, nullptr);
                          });
    }
    return x;
}

double logdet(const MaskedKernel& kernel, int h, int w) {
    (void)kernel;
    (void)h;
    (void)w;
    // Unit lower triangular operator: determinant 1 exactly, in both the
    // sampling (M) and training (M^{-1}) directions.
    return 0.0;
}

Tensor3 grad_input(const Tensor3& dL_dx, const MaskedKernel& kernel) {
    check_match(dL_dx, kernel, "grad_input");
    Tensor3 u(dL_dx.channels(), dL_dx.height(), dL_dx.width());
    kernels::masked_conv_solve_transpose(dL_dx.data(), dL_dx.channels(), dL_dx.height(),
                                         dL_dx.width(), kernel.weights().data(),
                                         kernel.ksize(), u.data());
    return u;
}

ConvKernel grad_weights_from(const Tensor3& u, const Tensor3& x, const MaskedKernel& kernel) {
    check_match(u, kernel, "grad_weights");
    if (!u.same_shape(x)) throw DimensionError("grad_weights: u and x shapes differ");
    const int c = kernel.channels();
    const int k = kernel.ksize();
    ConvKernel dw(c, c, k);
    // x = M^{-1}y depends on W through M: dL/dW = -u x^T restricted to the
    // kernel's support, which is a correlation of u against x at the k-1
    // top-left padding offsets.
    kernels::conv2d_weight_grad(x.data(), c, x.height(), x.width(), u.data(), c, k,
                                k - 1, k - 1, dw.w.data());
    for (double& v : dw.w) v = -v;
    for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b)
            if (!kernel.free_entry(a, b, k - 1, k - 1)) dw.at(a, b, k - 1, k - 1) = 0.0;
    return dw;
}

ConvKernel grad_weights(const Tensor3& dL_dx, const Tensor3& y, const MaskedKernel& kernel) {
    const Tensor3 u = grad_input(dL_dx, kernel);
    const Tensor3 x = conv_inverse(y, kernel);
    return grad_weights_from(u, x, kernel);
}

long long count_sequential_stages(int h, int w) {
    if (h < 1 || w < 1) throw DimensionError("count_sequential_stages: H, W must be >= 1");
    return static_cast<long long>(h) + w - 1;
}

}  // namespace invflow
