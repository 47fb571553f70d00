#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "saan/tensor.hpp"

namespace saan {

/// 8-bit quantization used by every writer: floor(clamp(v, 0, 1) * 255 + 0.5).
std::uint8_t quantize_unit(double v);

/// Binary Netpbm encoding of a [C,H,W] tensor with values in [0,1]:
/// C == 3 gives P6, C == 1 gives P5. Header is `P<n>\n<W> <H>\n255\n`.
std::string encode_pnm(const Tensor<float>& image);

/// Decodes P5/P6 with maxval 255 into [C,H,W] values byte/255. Errors name
/// the byte offset where parsing failed.
Tensor<float> decode_pnm(const std::string& bytes, const std::string& what = "image");

void write_image(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_image(const std::filesystem::path& path);

/// Reads a whole file; FormatError on failure.
std::string read_file(const std::filesystem::path& path);
/// Writes a whole file, creating parent directories.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace saan
