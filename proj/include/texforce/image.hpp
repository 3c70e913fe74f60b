// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace texforce {

/// Interleaved RGB image, row-major, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Image&) const = default;
};

/// Clamps to [0, 1] and rounds to 8 bits per channel.
std::vector<std::uint8_t> quantize(const Image& image);
Image dequantize(const std::vector<std::uint8_t>& bytes, int height, int width);

void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// Tiles images row-major into a single mosaic with a 1-pixel gray border.
Image make_grid(const std::vector<Image>& images, int columns);

}  // namespace texforce
