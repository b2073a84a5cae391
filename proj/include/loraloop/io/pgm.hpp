#pragma once

#include <cstddef>
#include <filesystem>

#include "loraloop/numcore/tensor.hpp"

namespace loraloop::io {

/// Writes a square grayscale image (values in [0,1], clamped) as binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const num::Tensor& pixels, std::size_t side);

/// Reads a P5 PGM back into [side*side] values in [0,1].
num::Tensor read_pgm(const std::filesystem::path& path);

}  // namespace loraloop::io
