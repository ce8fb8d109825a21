#include "invflow/tensor.hpp"

#include <cmath>

namespace invflow {

bool Tensor3::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor3::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

Tensor3 pad_top_left(const Tensor3& x, int pad) {
    if (pad < 0) throw ArgumentError("pad_top_left: pad must be >= 0");
    if (pad == 0) return x;
    Tensor3 out(x.channels(), x.height() + pad, x.width() + pad);
    for (int i = 0; i < x.height(); ++i)
        for (int j = 0; j < x.width(); ++j)
            for (int c = 0; c < x.channels(); ++c)
                out.at(c, i + pad, j + pad) = x.at(c, i, j);
    return out;
}

std::vector<double> vectorize(const Tensor3& x) { return x.values(); }

Tensor3 devectorize(const std::vector<double>& v, int channels, int height, int width) {
    if (v.size() != static_cast<std::size_t>(channels) * height * width)
        throw DimensionError("devectorize: vector length does not match C*H*W");
    return Tensor3(channels, height, width, v);
}

}  // namespace invflow
