#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "masa/tensor.hpp"

namespace masa {

// Planar RGB image, values in [0, 1], layout [3][height][width].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(3) * w * h, 0.0f) {}

  float& at(int c, int y, int x) { return rgb[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  [[nodiscard]] float at(int c, int y, int x) const {
    return rgb[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

// Binary (0/1) grid in row-major order.
struct Mask2D {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  Mask2D() = default;
  Mask2D(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::size_t count() const;
  friend bool operator==(const Mask2D&, const Mask2D&) = default;
};

// Image in [0,1] <-> model space [-1,1], batch 1.
Latent image_to_latent(const Image& img);
// De-normalizes and clamps to [0,1].
Image latent_to_image(const Latent& x, int batch_index = 0);

// Block-average downsampling; a cell is set when at least half its pixels are.
Mask2D downsample_mask(const Mask2D& mask, int side);
double mask_iou(const Mask2D& a, const Mask2D& b);
double psnr(const Image& a, const Image& b);
double mean_abs_error(const Image& a, const Image& b);

// Quantizes to 8 bits, the value a PNG round trip would produce.
Image quantize8(const Image& img);

void write_png_rgb(const std::filesystem::path& path, const Image& img);
void write_png_gray(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> values);
void write_png_mask(const std::filesystem::path& path, const Mask2D& mask);  // 1-bit
Image read_png_rgb(const std::filesystem::path& path);
Mask2D read_png_mask(const std::filesystem::path& path);

// Tiles equally sized images into a grid with a 1-pixel separator.
Image tile_images(const std::vector<Image>& images, int columns);

}  // namespace masa
