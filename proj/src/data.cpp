#include "invflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>

#include "invflow/errors.hpp"

namespace invflow {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) throw FormatError("read failure on file: " + path);
    return bytes;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off,
                        const char* what) {
    if (off + 4 > b.size()) {
        std::ostringstream msg;
        msg << "idx: truncated while reading " << what << " at byte offset " << off
            << " (file has " << b.size() << " bytes)";
        throw FormatError(msg.str());
    }
    return (static_cast<std::uint32_t>(b[off]) << 24) |
           (static_cast<std::uint32_t>(b[off + 1]) << 16) |
           (static_cast<std::uint32_t>(b[off + 2]) << 8) |
           static_cast<std::uint32_t>(b[off + 3]);
}

double clamp_pixel(double v) {
    return std::clamp(std::round(v), 0.0, 255.0);
}

}  // namespace

Dataset load_idx(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    const std::uint32_t magic = read_be32(bytes, 0, "magic");
    if (magic != 0x00000803u) {
        std::ostringstream msg;
        msg << "idx: bad magic 0x" << std::hex << magic << std::dec
            << " at byte offset 0 (expected 0x803 image magic)";
        throw FormatError(msg.str());
    }
    const std::uint32_t count = read_be32(bytes, 4, "image count");
    const std::uint32_t rows = read_be32(bytes, 8, "row count");
    const std::uint32_t cols = read_be32(bytes, 12, "column count");
    const std::size_t expected =
        16 + static_cast<std::size_t>(count) * rows * cols;
    if (bytes.size() < expected) {
        std::ostringstream msg;
        msg << "idx: truncated pixel data at byte offset " << bytes.size()
            << " (expected " << expected << " bytes for " << count << " images of "
            << rows << "x" << cols << ")";
        throw FormatError(msg.str());
    }
    if (count > 0 && (rows == 0 || cols == 0))
        throw FormatError("idx: zero image dimensions in header");
    Dataset ds;
    ds.name = path;
    std::size_t off = 16;
    for (std::uint32_t n = 0; n < count; ++n) {
        Tensor3 img(1, static_cast<int>(rows), static_cast<int>(cols));
        for (std::uint32_t i = 0; i < rows; ++i)
            for (std::uint32_t j = 0; j < cols; ++j)
                img.at(0, static_cast<int>(i), static_cast<int>(j)) =
                    static_cast<double>(bytes[off++]);
        ds.images.push_back(std::move(img));
    }
    return ds;
}

Dataset load_cifar_bin(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    constexpr std::size_t kRecord = 3073;  // 1 label byte + 3*32*32 pixels
    if (bytes.size() % kRecord != 0) {
        std::ostringstream msg;
        msg << "cifar: file size " << bytes.size() << " is not a multiple of "
            << kRecord << " (truncated at byte offset "
            << (bytes.size() / kRecord) * kRecord << ")";
        throw FormatError(msg.str());
    }
    Dataset ds;
    ds.name = path;
    for (std::size_t rec = 0; rec < bytes.size() / kRecord; ++rec) {
        const std::size_t base = rec * kRecord + 1;  // skip label
        Tensor3 img(3, 32, 32);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 32; ++i)
                for (int j = 0; j < 32; ++j)
                    img.at(c, i, j) = static_cast<double>(
                        bytes[base + static_cast<std::size_t>(c) * 1024 + i * 32 + j]);
        ds.images.push_back(std::move(img));
    }
    return ds;
}

Dataset synth_dataset(const std::string& kind, int n, int channels, int height,
                      int width, std::uint64_t seed) {
    if (n < 1) throw ArgumentError("synth_dataset: n must be >= 1");
    if (channels < 1 || height < 1 || width < 1)
        throw DimensionError("synth_dataset: shape must be positive");
    const bool gauss = kind == "two-gaussians";
    if (!gauss && kind != "checkerboard")
        throw ArgumentError("synth_dataset: unknown kind '" + kind +
                            "' (expected two-gaussians or checkerboard)");
    Rng rng(seed);
    Dataset ds;
    ds.name = "synth:" + kind;
    for (int img_idx = 0; img_idx < n; ++img_idx) {
        Tensor3 img(channels, height, width);
        for (int c = 0; c < channels; ++c)
            for (int i = 0; i < height; ++i)
                for (int j = 0; j < width; ++j) {
                    double v;
                    if (gauss) {
                        const double mode = rng.uniform01() < 0.5 ? 64.0 : 192.0;
                        v = mode + 12.0 * rng.normal();
                    } else {
                        v = ((i + j) % 2) * 255.0 + 8.0 * rng.normal();
                    }
                    img.at(c, i, j) = clamp_pixel(v);
                }
        ds.images.push_back(std::move(img));
    }
    return ds;
}

Tensor3 dequantize(const Tensor3& x, Rng& rng) {
    Tensor3 y = x;
    for (double& v : y.values()) v = (v + rng.uniform01()) / 256.0;
    return y;
}

double bits_per_dim(double nll_nats, std::size_t d) {
    if (d == 0) throw ArgumentError("bits_per_dim: D must be positive");
    return nll_nats / (static_cast<double>(d) * std::numbers::ln2) + 8.0;
}

}  // namespace invflow
