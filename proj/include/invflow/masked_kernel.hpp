#pragma once

#include <cstddef>
#include <vector>

#include "invflow/kernels.hpp"
#include "invflow/rng.hpp"

namespace invflow {

/// Dense convolution weights, shape (c_out, c_in, k, k) row-major.
struct ConvKernel {
    int c_out = 0;
    int c_in = 0;
    int k = 0;
    std::vector<double> w;

    ConvKernel() = default;
    ConvKernel(int c_out_, int c_in_, int k_);

    double& at(int a, int b, int ki, int kj) {
        return w[kernels::weight_index(a, b, ki, kj, c_in, k)];
    }
    double at(int a, int b, int ki, int kj) const {
        return w[kernels::weight_index(a, b, ki, kj, c_in, k)];
    }
    std::size_t size() const { return w.size(); }
};

/// Square convolution kernel whose bottom-right tap's channel matrix is
/// constrained to unit lower triangular: w[a,a,k-1,k-1] = 1 and
/// w[a,b,k-1,k-1] = 0 for b > a. Under top-left padding of k-1 the induced
/// linear operator is unit lower triangular in the channel-minor pixel order,
/// hence always invertible with determinant 1.
///
/// weights() is freely mutable (the optimizer writes through it); project()
/// re-imposes the structural entries and must run after every update. Tests
/// may deliberately leave the kernel unprojected ("relaxed") to probe the
/// determinant theorem on the dense operator.
class MaskedKernel {
public:
    MaskedKernel(int channels, int k);

    /// Free entries drawn uniform in [-scale, scale], structural entries set.
    static MaskedKernel random(int channels, int k, Rng& rng, double scale = 0.5);

    int channels() const { return kernel_.c_out; }
    int ksize() const { return kernel_.k; }
    int pad() const { return kernel_.k - 1; }

    const ConvKernel& kernel() const { return kernel_; }
    std::vector<double>& weights() { return kernel_.w; }
    const std::vector<double>& weights() const { return kernel_.w; }

    double at(int a, int b, int ki, int kj) const { return kernel_.at(a, b, ki, kj); }
    void set(int a, int b, int ki, int kj, double v) { kernel_.at(a, b, ki, kj) = v; }

    /// Re-impose the structural entries (diagonal 1, forbidden triangle 0).
    void project();
    /// True when every structural entry holds its required value exactly.
    bool mask_ok() const;
    /// True for entries the optimizer may change.
    bool free_entry(int a, int b, int ki, int kj) const;

private:
    ConvKernel kernel_;
};

}  // namespace invflow
