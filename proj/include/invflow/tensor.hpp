#pragma once

#include <cstddef>
#include <vector>

#include "invflow/errors.hpp"

namespace invflow {

/// A (channels, height, width) grid of doubles, stored channel-minor:
/// index(c, i, j) = c + C*j + C*W*i. This is also the pixel ordering used
/// when a tensor is flattened to a vector, so vectorize() is a plain copy.
class Tensor3 {
  public:
    Tensor3() = default;

    Tensor3(int channels, int height, int width)
        : c_(channels), h_(height), w_(width),
          data_(checked_len(channels, height, width), 0.0) {}

    Tensor3(int channels, int height, int width, std::vector<double> data)
        : c_(channels), h_(height), w_(width), data_(std::move(data)) {
        if (data_.size() != checked_len(channels, height, width))
            throw DimensionError("Tensor3: data length does not match C*H*W");
    }

    int channels() const { return c_; }
    int height() const { return h_; }
    int width() const { return w_; }
    std::size_t size() const { return data_.size(); }

    bool same_shape(const Tensor3& o) const {
        return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }

    double& at(int c, int i, int j) { return data_[index(c, i, j)]; }
    double at(int c, int i, int j) const { return data_[index(c, i, j)]; }

    std::size_t index(int c, int i, int j) const {
        return static_cast<std::size_t>(c) +
               static_cast<std::size_t>(c_) * (static_cast<std::size_t>(j) +
                                               static_cast<std::size_t>(w_) * i);
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool all_finite() const;
    double max_abs() const;

  private:
    static std::size_t checked_len(int channels, int height, int width) {
        if (channels <= 0 || height <= 0 || width <= 0)
            throw DimensionError("Tensor3: dimensions must be positive");
        return static_cast<std::size_t>(channels) * height * width;
    }

    int c_ = 0, h_ = 0, w_ = 0;
    std::vector<double> data_;
};

/// Linear pixel index: channel-minor, column next, row outermost. The induced
/// total order refines the componentwise partial order on (row, col).
inline std::size_t linear_index(int c, int i, int j, int channels, int width) {
    return static_cast<std::size_t>(c) +
           static_cast<std::size_t>(channels) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(width) * i);
}

/// Zero-pads `pad` rows on top and `pad` columns on the left; the original
/// values land at the bottom-right, bit-exactly.
Tensor3 pad_top_left(const Tensor3& x, int pad);

/// Flatten in linear_index order (for the channel-minor layout this is a copy).
std::vector<double> vectorize(const Tensor3& x);

/// Inverse of vectorize.
Tensor3 devectorize(const std::vector<double>& v, int channels, int height, int width);

}  // namespace invflow
