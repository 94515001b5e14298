#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vsur {

/// 8-bit interleaved RGB image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

/// PNG bytes for `img`. Output is a pure function of the pixels (fixed
/// compression settings, no timestamp chunks).
std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_png(std::span<const std::uint8_t> bytes);

void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Places images side by side (all must share a height).
Image hconcat(const std::vector<Image>& images);
/// Stacks images vertically (all must share a width).
Image vconcat(const std::vector<Image>& images);

}  // namespace vsur
