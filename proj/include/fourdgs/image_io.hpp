#pragma once

#include <string>

#include "fourdgs/rasterizer.hpp"

namespace fourdgs {

// 8-bit RGB PNG. Quantization rounds half up: q = floor(255 x + 0.5), clamped.
// The encoder is deterministic (fixed zlib level), so identical images produce
// byte-identical files.
void write_png(const std::string& path, const Image& image);

// Accepts 8-bit RGB or RGBA (alpha dropped); values dequantized as q / 255.
Image read_png(const std::string& path);

// Raw float dump: "4DIM" magic, u32 height, u32 width, then H*W*3
// little-endian f32 in row-major RGB order.
void write_raw(const std::string& path, const Image& image);
Image read_raw(const std::string& path);

}  // namespace fourdgs
