#include "rin/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "rin/serialize.hpp"

namespace rin {

std::uint8_t to_byte(double v) {
  v = std::min(std::max(v, 0.0), 1.0);
  return std::uint8_t(std::floor(v * 255.0 + 0.5));
}

Image8 tensor_to_image(const Tensor<float>& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) {
    throw ShapeError("tensor_to_image: expected [1|3,H,W], got " + shape_str(chw.shape()));
  }
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2), plane = h * w;
  Image8 img(w, h);
  const auto v = chw.data();
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t k = 0; k < 3; ++k) img.rgb[p * 3 + k] = to_byte(v[(c == 1 ? 0 : k) * plane + p]);
  }
  return img;
}

Tensor<float> image_to_tensor(const Image8& img) {
  const std::size_t plane = img.width * img.height;
  Tensor<float> t(Shape{3, img.height, img.width});
  auto v = t.mutable_data();
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t k = 0; k < 3; ++k) v[k * plane + p] = float(img.rgb[p * 3 + k]) / 255.0f;
  }
  return t;
}

void blit(Image8& dst, const Image8& src, std::size_t row, std::size_t col) {
  if (row + src.height > dst.height || col + src.width > dst.width) {
    throw ShapeError("blit: source does not fit the destination");
  }
  for (std::size_t r = 0; r < src.height; ++r) {
    std::copy(src.at(r, 0), src.at(r, 0) + src.width * 3, dst.at(row + r, col));
  }
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw FormatError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng: failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < img.height; ++r) png_write_row(png, img.at(r, 0));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw FormatError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("libpng: out of memory");
  }
  Image8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng: failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img = Image8(png_get_image_width(png, info), png_get_image_height(png, info));
  for (std::size_t r = 0; r < img.height; ++r) png_read_row(png, img.at(r, 0), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace rin
