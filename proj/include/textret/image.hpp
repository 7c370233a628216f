#pragma once

#include <filesystem>

#include <Eigen/Core>

#include "textret/geometry.hpp"

namespace textret {

/// H x W x 3 image, interleaved RGB, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  Eigen::ArrayXf pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(Eigen::ArrayXf::Zero(static_cast<Eigen::Index>(h) * w * 3)) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<Eigen::Index>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<Eigen::Index>(y) * width + x) * 3 + c]; }
  bool empty() const { return height == 0 || width == 0; }
};

/// 8-bit RGB PNG. Loading converts grey/alpha/16-bit inputs to RGB in [0, 1].
Image load_png(const std::filesystem::path& path);
void save_png(const Image& image, const std::filesystem::path& path);

/// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& image, int height, int width);

/// Resizes so that the longer side equals `long_side`; returns the applied scale factor.
Image resize_long_side(const Image& image, int long_side, double* scale = nullptr);

/// Crops `box` (clipped to the image) and resamples it to height x width.
Image crop_resize(const Image& image, const Box& box, int height, int width);

}  // namespace textret
