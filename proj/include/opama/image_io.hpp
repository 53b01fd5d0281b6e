#pragma once

#include <filesystem>

#include "opama/tensor.hpp"

namespace opama {

/// Reads an 8-bit PNG (.png) or binary PPM/PGM (.ppm, .pgm) into [H, W, C]
/// with values in [0, 1]. PNG gray and RGB are kept as 1 and 3 channels; an
/// alpha channel is dropped. Throws IoError on failure.
Tensor read_image(const std::filesystem::path& path);

/// Writes [H, W, 1] or [H, W, 3] (or a 2D mask [H, W]) as 8-bit, rounding
/// clamp(v, 0, 1) * 255. Format chosen by extension.
void write_image(const std::filesystem::path& path, const Tensor& image);

/// Rounds to the 8-bit grid, i.e. the values write/read would round-trip to.
Tensor quantize8(const Tensor& image);

}  // namespace opama
