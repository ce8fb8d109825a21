#pragma once

#include <string>
#include <vector>

#include "invflow/tensor.hpp"

namespace invflow {

/// Writes a model-space image (values nominally in [0, 1)) as plain 8-bit
/// PGM (1 channel, P2) or PPM (3 channels, P3). Values are scaled by 256,
/// floored, and clamped to [0, 255]. Other channel counts are rejected.
void write_image(const Tensor3& img, const std::string& path);

/// Packs images (all the same shape) into a grid, `per_row` across, with a
/// 1-pixel mid-gray separator. per_row <= 0 picks ceil(sqrt(n)).
Tensor3 montage(const std::vector<Tensor3>& images, int per_row = 0);

}  // namespace invflow
