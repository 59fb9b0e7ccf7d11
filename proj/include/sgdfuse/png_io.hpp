#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sgdfuse/image.hpp"

namespace sgdfuse {

// 8-bit PNG only: grayscale decodes to C=1, RGB(A) to C=3 (alpha dropped,
// palette expanded). Pixel mapping is v = byte / 255.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

// In-memory variants, used by the remote mask client and its tests.
Image decode_png(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_png(const Image& img);

// Reads only the IHDR header; cheap existence/size probe.
void png_size(const std::filesystem::path& path, int& height, int& width);

} // namespace sgdfuse
