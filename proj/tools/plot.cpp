#include "plot.hpp"

#include <algorithm>
#include <cmath>

namespace masa::cli {

namespace {

void put(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[static_cast<std::size_t>(ch)];
}

void line(Image& img, int x0, int y0, int x1, int y1, const Rgb& c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put(img, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace

Image plot_loss_curve(const std::vector<LossPoint>& losses, int width, int height) {
  Image img(width, height);
  std::fill(img.rgb.begin(), img.rgb.end(), 1.0f);
  const int left = 30, right = width - 10, top = 10, bottom = height - 20;
  const Rgb axis{0.1f, 0.1f, 0.1f}, grid{0.88f, 0.88f, 0.88f}, raw{0.70f, 0.75f, 0.85f}, smooth{0.05f, 0.20f, 0.60f};
  if (losses.empty()) {
    line(img, left, bottom, right, bottom, axis);
    line(img, left, top, left, bottom, axis);
    return img;
  }

  // log10 loss on the vertical axis, step on the horizontal axis
  double lo = 1e300, hi = -1e300;
  for (const auto& p : losses) {
    const double v = std::log10(std::max(1e-6, static_cast<double>(p.loss)));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  lo = std::floor(lo);
  hi = std::max(std::ceil(hi), lo + 1);
  const double s0 = static_cast<double>(losses.front().step);
  const double s1 = std::max(s0 + 1, static_cast<double>(losses.back().step));
  auto px = [&](double step) { return left + static_cast<int>(std::lround((step - s0) / (s1 - s0) * (right - left))); };
  auto py = [&](double loss) {
    const double v = std::log10(std::max(1e-6, loss));
    return bottom - static_cast<int>(std::lround((v - lo) / (hi - lo) * (bottom - top)));
  };

  for (double d = lo; d <= hi + 1e-9; d += 1.0) {
    const int y = bottom - static_cast<int>(std::lround((d - lo) / (hi - lo) * (bottom - top)));
    line(img, left, y, right, y, grid);
    line(img, left - 4, y, left, y, axis);
  }
  for (const auto& p : losses) put(img, px(static_cast<double>(p.step)), py(p.loss), raw);

  const std::size_t window = std::max<std::size_t>(1, losses.size() / 50);
  double acc = 0.0;
  int prev_x = -1, prev_y = -1;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    acc += losses[i].loss;
    if (i >= window) acc -= losses[i - window].loss;
    const double mean = acc / static_cast<double>(std::min(i + 1, window));
    const int x = px(static_cast<double>(losses[i].step)), y = py(mean);
    if (prev_x >= 0) line(img, prev_x, prev_y, x, y, smooth);
    prev_x = x;
    prev_y = y;
  }
  line(img, left, bottom, right, bottom, axis);
  line(img, left, top, left, bottom, axis);
  return img;
}

}  // namespace masa::cli
