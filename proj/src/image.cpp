#include "textret/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

#include "textret/errors.hpp"

namespace textret {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image load_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  Image img;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_bit_depth(png, info) < 8) png_set_packing(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const auto rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG layout in " + path.string());
  }
  buffer.resize(rowbytes * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + rowbytes * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  img = Image(h, w);
  for (std::size_t i = 0; i < buffer.size(); ++i) img.pixels[static_cast<Eigen::Index>(i)] = buffer[i] / 255.0f;
  return img;
}

void save_png(const Image& image, const std::filesystem::path& path) {
  if (image.empty()) throw InvalidInput("save_png: empty image");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_byte> buffer(static_cast<std::size_t>(image.pixels.size()));
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const float v = std::clamp(image.pixels[static_cast<Eigen::Index>(i)], 0.0f, 1.0f);
    buffer[i] = static_cast<png_byte>(std::lround(v * 255.0f));
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y)
    rows[static_cast<std::size_t>(y)] = buffer.data() + static_cast<std::size_t>(y) * image.width * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace {

float sample_bilinear(const Image& img, double y, double x, int c) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double ly = y - y0, lx = x - x0;
  return static_cast<float>((1 - ly) * ((1 - lx) * img.at(y0, x0, c) + lx * img.at(y0, x1, c)) +
                            ly * ((1 - lx) * img.at(y1, x0, c) + lx * img.at(y1, x1, c)));
}

}  // namespace

Image resize_bilinear(const Image& image, int height, int width) {
  if (height < 1 || width < 1) throw InvalidInput("resize: target size must be positive");
  if (height == image.height && width == image.width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.height) / height, sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(image, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5, c);
  return out;
}

Image resize_long_side(const Image& image, int long_side, double* scale) {
  const double s = static_cast<double>(long_side) / std::max(image.height, image.width);
  if (scale) *scale = s;
  const int h = std::max(1, static_cast<int>(std::lround(image.height * s)));
  const int w = std::max(1, static_cast<int>(std::lround(image.width * s)));
  return resize_bilinear(image, h, w);
}

Image crop_resize(const Image& image, const Box& box, int height, int width) {
  const Box b = box.clipped(image.width, image.height);
  if (!b.valid()) throw InvalidInput("crop_resize: empty box");
  Image out(height, width);
  const double sy = b.height() / height, sx = b.width() / width;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = sample_bilinear(image, b.y0 + (y + 0.5) * sy - 0.5, b.x0 + (x + 0.5) * sx - 0.5, c);
  return out;
}

}  // namespace textret
