#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rin/tensor.hpp"

namespace rin {

/// 8-bit interleaved RGB raster.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}
  std::uint8_t* at(std::size_t row, std::size_t col) { return &rgb[(row * width + col) * 3]; }
  const std::uint8_t* at(std::size_t row, std::size_t col) const { return &rgb[(row * width + col) * 3]; }
};

/// round(255 * clamp01(v)), halves rounded up.
std::uint8_t to_byte(double v);

/// [1,H,W] or [3,H,W] in [0,1]; one channel is replicated to grey.
Image8 tensor_to_image(const Tensor<float>& chw);
/// [3,H,W] in [0,1].
Tensor<float> image_to_tensor(const Image8& img);

/// Copies `src` into `dst` with its top-left corner at (row, col).
void blit(Image8& dst, const Image8& src, std::size_t row, std::size_t col);

void write_png(const std::filesystem::path& path, const Image8& img);
/// Grey, grey+alpha, RGB and RGBA inputs are accepted; alpha is dropped.
Image8 read_png(const std::filesystem::path& path);

}  // namespace rin
