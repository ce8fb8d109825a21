#pragma once

#include <Eigen/Dense>
#include <vector>

#include "invflow/masked_kernel.hpp"
#include "invflow/tensor.hpp"

namespace invflow {

/// Explicit n x n matrix (n = C*H*W) of the top-left-padded convolution under
/// the channel-minor pixel order. This is the test oracle the streaming
/// kernels are judged against: apply/solve/determinant all go through Eigen's
/// dense LU, a completely independent route from the wavefront code.
class DenseOperator {
public:
    /// Throws CapacityError when n exceeds the materialization guard (4096).
    DenseOperator(const MaskedKernel& kernel, int h, int w);

    int n() const { return n_; }
    const Eigen::MatrixXd& matrix() const { return m_; }
    double entry(int row, int col) const { return m_(row, col); }

    std::vector<double> apply(const std::vector<double>& v) const;
    std::vector<double> solve(const std::vector<double>& rhs) const;
    std::vector<double> solve_transpose(const std::vector<double>& rhs) const;

    double determinant() const;
    double log_abs_det() const;

    /// Max |entry| above the diagonal and max |diag - 1|; both must be 0 for
    /// a properly masked kernel.
    double above_diagonal_mass() const;
    double unit_diagonal_error() const;

private:
    int n_;
    Eigen::MatrixXd m_;
};

DenseOperator build_dense_operator(const MaskedKernel& kernel, int h, int w);

}  // namespace invflow
