#include "masa/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

namespace masa {

std::size_t Mask2D::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

Latent image_to_latent(const Image& img) {
  Latent out(Shape4{1, 3, img.height, img.width});
  for (std::size_t i = 0; i < img.rgb.size(); ++i) out[i] = 2.0f * img.rgb[i] - 1.0f;
  return out;
}

Image latent_to_image(const Latent& x, int batch_index) {
  const auto& s = x.shape();
  MASA_EXPECTS(s.channels == 3, "latent_to_image: expected 3 channels");
  Image img(s.width, s.height);
  auto src = x.sample(batch_index);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    img.rgb[i] = std::clamp(0.5f * (src[i] + 1.0f), 0.0f, 1.0f);
  }
  return img;
}

Mask2D downsample_mask(const Mask2D& mask, int side) {
  MASA_EXPECTS(side > 0 && mask.width % side == 0 && mask.height % side == 0 && mask.width == mask.height,
               "downsample_mask: side must divide a square mask");
  const int f = mask.width / side;
  Mask2D out(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      int on = 0;
      for (int dy = 0; dy < f; ++dy) {
        for (int dx = 0; dx < f; ++dx) on += mask.at(y * f + dy, x * f + dx) != 0;
      }
      out.at(y, x) = 2 * on >= f * f ? 1 : 0;
    }
  }
  return out;
}

double mask_iou(const Mask2D& a, const Mask2D& b) {
  MASA_EXPECTS(a.width == b.width && a.height == b.height, "mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool pa = a.values[i] != 0, pb = b.values[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double psnr(const Image& a, const Image& b) {
  MASA_EXPECTS(a.width == b.width && a.height == b.height, "psnr: size mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.rgb.size());
  if (mse <= 1e-20) return 200.0;
  return 10.0 * std::log10(1.0 / mse);
}

double mean_abs_error(const Image& a, const Image& b) {
  MASA_EXPECTS(a.width == b.width && a.height == b.height, "mean_abs_error: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) acc += std::abs(static_cast<double>(a.rgb[i]) - b.rgb[i]);
  return acc / static_cast<double>(a.rgb.size());
}

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::filesystem::path& path, int width, int height, int color_type, int bit_depth,
               const std::vector<std::vector<png_byte>>& rows) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw FormatError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng write failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& r : rows) png_write_row(png, r.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any PNG as 8-bit RGB rows.
std::vector<std::vector<png_byte>> read_png_rows(const std::filesystem::path& path, int& width, int& height) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw FormatError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("malformed PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(height),
                                          std::vector<png_byte>(png_get_rowbytes(png, info)));
  for (auto& r : rows) png_read_row(png, r.data(), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return rows;
}

}  // namespace

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.rgb) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

void write_png_rgb(const std::filesystem::path& path, const Image& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height),
                                          std::vector<png_byte>(static_cast<std::size_t>(img.width) * 3));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x) * 3 + c] = to_byte(img.at(c, y, x));
    }
  }
  write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 8, rows);
}

void write_png_gray(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> values) {
  MASA_EXPECTS(values.size() == static_cast<std::size_t>(width) * height, "write_png_gray: size mismatch");
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    const auto* src = values.data() + static_cast<std::size_t>(y) * width;
    rows[static_cast<std::size_t>(y)].assign(src, src + width);
  }
  write_png(path, width, height, PNG_COLOR_TYPE_GRAY, 8, rows);
}

void write_png_mask(const std::filesystem::path& path, const Mask2D& mask) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(mask.height),
                                          std::vector<png_byte>(static_cast<std::size_t>((mask.width + 7) / 8), 0));
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x)) rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x / 8)] |= static_cast<png_byte>(0x80 >> (x % 8));
    }
  }
  write_png(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, rows);
}

Image read_png_rgb(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto rows = read_png_rows(path, w, h);
  Image img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x) * 3 + c]) / 255.0f;
      }
    }
  }
  return img;
}

Mask2D read_png_mask(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto rows = read_png_rows(path, w, h);
  Mask2D m(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) m.at(y, x) = rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x) * 3] >= 128 ? 1 : 0;
  }
  return m;
}

Image tile_images(const std::vector<Image>& images, int columns) {
  MASA_EXPECTS(!images.empty() && columns > 0, "tile_images: nothing to tile");
  const int w = images.front().width, h = images.front().height;
  const int n = static_cast<int>(images.size());
  const int rows = (n + columns - 1) / columns;
  const int cols = std::min(columns, n);
  Image out(cols * (w + 1) - 1, rows * (h + 1) - 1);
  std::fill(out.rgb.begin(), out.rgb.end(), 1.0f);
  for (int i = 0; i < n; ++i) {
    const auto& im = images[static_cast<std::size_t>(i)];
    MASA_EXPECTS(im.width == w && im.height == h, "tile_images: size mismatch");
    const int ox = (i % columns) * (w + 1), oy = (i / columns) * (h + 1);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out.at(c, oy + y, ox + x) = im.at(c, y, x);
      }
    }
  }
  return out;
}

}  // namespace masa
