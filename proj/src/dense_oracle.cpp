#include "invflow/dense_oracle.hpp"

#include <cmath>
#include <string>

#include "invflow/errors.hpp"

namespace invflow {

namespace {
constexpr int kCapacity = 4096;
}

DenseOperator::DenseOperator(const MaskedKernel& kernel, int h, int w) {
    if (h <= 0 || w <= 0) throw DimensionError("DenseOperator: H, W must be positive");
    const int c = kernel.channels();
    const int k = kernel.ksize();
    const long long n = static_cast<long long>(c) * h * w;
    if (n > kCapacity)
        throw CapacityError("DenseOperator: n = " + std::to_string(n) +
                            " exceeds the materialization guard of " +
                            std::to_string(kCapacity));
    n_ = static_cast<int>(n);
    m_ = Eigen::MatrixXd::Zero(n_, n_);

    // Row (a, i, j) collects W[a, b, k-1-di, k-1-dj] * x[b, i-di, j-dj] over
    // displacements 0 <= di, dj < k, which is the padded convolution written
    // against unpadded coordinates.
    for (int a = 0; a < c; ++a)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const int row = linear_index(a, i, j, c, w);
                for (int di = 0; di < k && di <= i; ++di)
                    for (int dj = 0; dj < k && dj <= j; ++dj)
                        for (int b = 0; b < c; ++b)
                            m_(row, linear_index(b, i - di, j - dj, c, w)) +=
                                kernel.at(a, b, k - 1 - di, k - 1 - dj);
            }
}

std::vector<double> DenseOperator::apply(const std::vector<double>& v) const {
    if (static_cast<int>(v.size()) != n_)
        throw DimensionError("DenseOperator::apply: length mismatch");
    Eigen::VectorXd r = m_ * Eigen::Map<const Eigen::VectorXd>(v.data(), n_);
    return std::vector<double>(r.data(), r.data() + n_);
}

std::vector<double> DenseOperator::solve(const std::vector<double>& rhs) const {
    if (static_cast<int>(rhs.size()) != n_)
        throw DimensionError("DenseOperator::solve: length mismatch");
    Eigen::VectorXd r =
        m_.partialPivLu().solve(Eigen::Map<const Eigen::VectorXd>(rhs.data(), n_));
    return std::vector<double>(r.data(), r.data() + n_);
}

std::vector<double> DenseOperator::solve_transpose(const std::vector<double>& rhs) const {
    if (static_cast<int>(rhs.size()) != n_)
        throw DimensionError("DenseOperator::solve_transpose: length mismatch");
    Eigen::VectorXd r = m_.transpose().partialPivLu().solve(
        Eigen::Map<const Eigen::VectorXd>(rhs.data(), n_));
    return std::vector<double>(r.data(), r.data() + n_);
}

double DenseOperator::determinant() const { return m_.partialPivLu().determinant(); }

double DenseOperator::log_abs_det() const {
    const auto lu = m_.partialPivLu();
    double sum = 0.0;
    for (int i = 0; i < n_; ++i) sum += std::log(std::abs(lu.matrixLU()(i, i)));
    return sum;
}

double DenseOperator::above_diagonal_mass() const {
    double mass = 0.0;
    for (int r = 0; r < n_; ++r)
        for (int col = r + 1; col < n_; ++col) mass = std::max(mass, std::abs(m_(r, col)));
    return mass;
}

double DenseOperator::unit_diagonal_error() const {
    double err = 0.0;
    for (int i = 0; i < n_; ++i) err = std::max(err, std::abs(m_(i, i) - 1.0));
    return err;
}

DenseOperator build_dense_operator(const MaskedKernel& kernel, int h, int w) {
    return DenseOperator(kernel, h, w);
}

}  // namespace invflow
