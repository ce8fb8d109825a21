#include "invflow/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "invflow/errors.hpp"

namespace invflow {

namespace {

int to_byte(double v) {
    return static_cast<int>(std::clamp(std::floor(v * 256.0), 0.0, 255.0));
}

}  // namespace

void write_image(const Tensor3& img, const std::string& path) {
    if (img.channels() != 1 && img.channels() != 3)
        throw DimensionError("write_image: only 1- or 3-channel images supported");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("write_image: cannot open for writing: " + path);
    f << (img.channels() == 1 ? "P2" : "P3") << "\n"
      << img.width() << " " << img.height() << "\n255\n";
    for (int i = 0; i < img.height(); ++i) {
        for (int j = 0; j < img.width(); ++j) {
            for (int c = 0; c < img.channels(); ++c) {
                if (j > 0 || c > 0) f << ' ';
                f << to_byte(img.at(c, i, j));
            }
        }
        f << '\n';
    }
    if (!f) throw FormatError("write_image: write failure: " + path);
}

Tensor3 montage(const std::vector<Tensor3>& images, int per_row) {
    if (images.empty()) throw ArgumentError("montage: no images");
    const Tensor3& first = images[0];
    for (const Tensor3& img : images)
        if (!img.same_shape(first)) throw DimensionError("montage: mixed shapes");
    const int n = static_cast<int>(images.size());
    int cols = per_row > 0 ? per_row
                           : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    cols = std::min(cols, n);
    const int rows = (n + cols - 1) / cols;
    const int h = first.height(), w = first.width();
    Tensor3 grid(first.channels(), rows * (h + 1) - 1, cols * (w + 1) - 1);
    grid.fill(0.5);  // separator / empty-cell gray
    for (int idx = 0; idx < n; ++idx) {
        const int r = idx / cols, col = idx % cols;
        for (int c = 0; c < first.channels(); ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    grid.at(c, r * (h + 1) + i, col * (w + 1) + j) =
                        images[idx].at(c, i, j);
    }
    return grid;
}

}  // namespace invflow
