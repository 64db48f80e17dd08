#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ldnet {

/// 8-bit image, interleaved HWC.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 gray, 3 RGB, 4 RGBA
  std::vector<std::uint8_t> pixels;
};

/// Reads any PNG, converting to the requested channel count.
Image8 read_png(const std::filesystem::path& path, std::size_t channels);
void write_png(const std::filesystem::path& path, const Image8& image);

}  // namespace ldnet
