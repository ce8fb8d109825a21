#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invflow/rng.hpp"
#include "invflow/tensor.hpp"

namespace invflow {

/// Integer images (values in [0, 255], stored as doubles) sharing one shape.
struct Dataset {
    std::vector<Tensor3> images;
    std::string name;
    std::string split = "train";

    std::size_t size() const { return images.size(); }
};

/// Parses an IDX image file (big-endian header: magic 0x00000803, count,
/// rows, cols; then one byte per pixel). Throws FormatError naming the byte
/// offset on bad magic or truncation.
Dataset load_idx(const std::string& path);

/// Parses CIFAR-10 binary records (1 label byte + 3x1024 channel-plane pixel
/// bytes per record). The label is discarded. Throws FormatError when the
/// file size is not a multiple of 3073.
Dataset load_cifar_bin(const std::string& path);

/// Deterministic synthetic data. kind = "two-gaussians": each pixel drawn
/// near one of two modes (64 and 192, sigma 12). kind = "checkerboard":
/// parity pattern scaled to {0, 255} plus sigma-8 noise. Values are rounded
/// and clamped to [0, 255].
Dataset synth_dataset(const std::string& kind, int n, int channels, int height,
                      int width, std::uint64_t seed);

/// y = (x + u)/256 with u ~ U[0,1) per element (drawn in linear index order).
Tensor3 dequantize(const Tensor3& x, Rng& rng);

/// bpd = nll_nats/(D * ln 2) + 8; the +8 accounts for the 1/256 scaling.
double bits_per_dim(double nll_nats, std::size_t d);

}  // namespace invflow
