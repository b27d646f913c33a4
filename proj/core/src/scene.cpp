#include "masa/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "masa/errors.hpp"

namespace masa {

std::string to_string(Shape v) {
  static const char* names[] = {"circle", "square", "triangle"};
  return names[static_cast<int>(v)];
}
std::string to_string(FgColor v) {
  static const char* names[] = {"red", "green", "blue", "yellow"};
  return names[static_cast<int>(v)];
}
std::string to_string(Position v) {
  static const char* names[] = {"left", "center", "right"};
  return names[static_cast<int>(v)];
}
std::string to_string(BgColor v) {
  static const char* names[] = {"white", "gray", "navy"};
  return names[static_cast<int>(v)];
}

Rgb palette(FgColor c) {
  switch (c) {
    case FgColor::red:
      return {0.90f, 0.12f, 0.10f};
    case FgColor::green:
      return {0.10f, 0.75f, 0.20f};
    case FgColor::blue:
      return {0.15f, 0.35f, 0.95f};
    case FgColor::yellow:
      return {0.95f, 0.85f, 0.10f};
  }
  return {};
}

Rgb palette(BgColor c) {
  switch (c) {
    case BgColor::white:
      return {0.94f, 0.94f, 0.94f};
    case BgColor::gray:
      return {0.50f, 0.50f, 0.50f};
    case BgColor::navy:
      return {0.06f, 0.06f, 0.32f};
  }
  return {};
}

int combination_index(const SceneSpec& s) {
  return ((static_cast<int>(s.fg_color) * kNumShapes + static_cast<int>(s.shape)) * kNumPositions +
          static_cast<int>(s.position)) *
             kNumBgColors +
         static_cast<int>(s.bg_color);
}

SceneSpec combination(int index, std::uint64_t jitter_seed) {
  MASA_EXPECTS(index >= 0 && index < kNumCombinations, "combination index out of range");
  SceneSpec s;
  s.bg_color = static_cast<BgColor>(index % kNumBgColors);
  index /= kNumBgColors;
  s.position = static_cast<Position>(index % kNumPositions);
  index /= kNumPositions;
  s.shape = static_cast<Shape>(index % kNumShapes);
  index /= kNumShapes;
  s.fg_color = static_cast<FgColor>(index);
  s.jitter_seed = jitter_seed;
  return s;
}

// ------------------------------------------------------------------ grammar

TokenGrammar::TokenGrammar(int max_tokens) : max_tokens_(max_tokens) {
  if (max_tokens < kNumSlots) throw ConfigError("token grammar needs at least 4 token positions");
}

const std::vector<std::string>& TokenGrammar::vocabulary() {
  static const std::vector<std::string> vocab = {"<pad>", "red",  "green",  "blue",  "yellow", "circle", "square",
                                                 "triangle", "left", "center", "right", "white", "gray", "navy"};
  return vocab;
}

int TokenGrammar::vocab_size() { return static_cast<int>(vocabulary().size()); }

int TokenGrammar::token_id(FgColor v) { return 1 + static_cast<int>(v); }
int TokenGrammar::token_id(Shape v) { return 1 + kNumFgColors + static_cast<int>(v); }
int TokenGrammar::token_id(Position v) { return 1 + kNumFgColors + kNumShapes + static_cast<int>(v); }
int TokenGrammar::token_id(BgColor v) { return 1 + kNumFgColors + kNumShapes + kNumPositions + static_cast<int>(v); }

PromptTokens TokenGrammar::null_prompt() const { return PromptTokens{std::vector<int>(static_cast<std::size_t>(max_tokens_), kPad)}; }

PromptTokens TokenGrammar::encode(const SceneSpec& spec) const {
  PromptTokens t = null_prompt();
  t.ids[kFgColorSlot] = token_id(spec.fg_color);
  t.ids[kShapeSlot] = token_id(spec.shape);
  t.ids[kPositionSlot] = token_id(spec.position);
  t.ids[kBgColorSlot] = token_id(spec.bg_color);
  return t;
}

std::optional<SceneSpec> TokenGrammar::decode(const PromptTokens& t) const {
  if (static_cast<int>(t.ids.size()) != max_tokens_) return std::nullopt;
  const int fg = t.ids[kFgColorSlot] - token_id(FgColor::red);
  const int sh = t.ids[kShapeSlot] - token_id(Shape::circle);
  const int po = t.ids[kPositionSlot] - token_id(Position::left);
  const int bg = t.ids[kBgColorSlot] - token_id(BgColor::white);
  if (fg < 0 || fg >= kNumFgColors || sh < 0 || sh >= kNumShapes || po < 0 || po >= kNumPositions || bg < 0 ||
      bg >= kNumBgColors) {
    return std::nullopt;
  }
  SceneSpec s;
  s.fg_color = static_cast<FgColor>(fg);
  s.shape = static_cast<Shape>(sh);
  s.position = static_cast<Position>(po);
  s.bg_color = static_cast<BgColor>(bg);
  return s;
}

PromptTokens TokenGrammar::parse(const std::string& phrase) const {
  PromptTokens t = null_prompt();
  std::istringstream in(phrase);
  std::string word;
  const auto& vocab = vocabulary();
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
    if (word == "on" || word == "a" || word == "an" || word == "the") continue;
    const auto it = std::find(vocab.begin() + 1, vocab.end(), word);
    if (it == vocab.end()) throw ContractError("prompt word '" + word + "' is not in the grammar");
    const int id = static_cast<int>(it - vocab.begin());
    int slot = kBgColorSlot;
    if (id < token_id(Shape::circle)) {
      slot = kFgColorSlot;
    } else if (id < token_id(Position::left)) {
      slot = kShapeSlot;
    } else if (id < token_id(BgColor::white)) {
      slot = kPositionSlot;
    }
    if (t.ids[static_cast<std::size_t>(slot)] != kPad) {
      throw ContractError("prompt '" + phrase + "' repeats an attribute");
    }
    t.ids[static_cast<std::size_t>(slot)] = id;
  }
  return t;
}

std::string TokenGrammar::describe(const PromptTokens& t) const {
  std::string out;
  const auto& vocab = vocabulary();
  for (int slot = 0; slot < kNumSlots && slot < static_cast<int>(t.ids.size()); ++slot) {
    const int id = t.ids[static_cast<std::size_t>(slot)];
    if (id == kPad) continue;
    if (slot == kBgColorSlot) out += out.empty() ? "on " : " on ";
    else if (!out.empty()) out += " ";
    out += vocab.at(static_cast<std::size_t>(id));
  }
  return out;
}

// ------------------------------------------------------------------ rendering

Jitter jitter_from_seed(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Jitter j;
  j.dx = static_cast<float>(u(rng));
  j.dy = static_cast<float>(u(rng));
  j.scale = static_cast<float>(1.0 + 0.15 * u(rng));
  j.fg_shade = static_cast<float>(0.08 * u(rng));
  j.bg_shade = static_cast<float>(0.05 * u(rng));
  return j;
}

namespace {

bool inside(Shape shape, double px, double py, double cx, double cy, double r) {
  const double x = px - cx, y = py - cy;
  switch (shape) {
    case Shape::circle:
      return x * x + y * y <= r * r;
    case Shape::square:
      return std::abs(x) <= 0.85 * r && std::abs(y) <= 0.85 * r;
    case Shape::triangle: {
      // apex (0, -1.05 r), base at y = 0.85 r with half-width 1.2 r
      const double top = -1.05 * r, base = 0.85 * r, half = 1.2 * r;
      if (y > base || y < top) return false;
      const double frac = (y - top) / (base - top);
      return std::abs(x) <= half * frac;
    }
  }
  return false;
}

float shade(float v, float delta) { return std::clamp(v + delta, 0.0f, 1.0f); }

}  // namespace

RenderedScene render_scene(const SceneSpec& spec, int size, const Jitter& j) {
  MASA_EXPECTS(size >= 8, "render_scene: size too small");
  const double k = size / 32.0;
  static constexpr double kCenters[] = {0.25, 0.5, 0.75};
  const double cx = size * kCenters[static_cast<int>(spec.position)] + j.dx * k;
  const double cy = size * 0.5 + j.dy * k;
  const double r = 5.4 * k * j.scale;
  const Rgb fg = palette(spec.fg_color);
  const Rgb bg = palette(spec.bg_color);
  RenderedScene out{Image(size, size), Mask2D(size, size)};
  constexpr int ss = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          hits += inside(spec.shape, x + (sx + 0.5) / ss, y + (sy + 0.5) / ss, cx, cy, r);
        }
      }
      const float cov = static_cast<float>(hits) / (ss * ss);
      for (int c = 0; c < 3; ++c) {
        const float f = shade(fg[static_cast<std::size_t>(c)], j.fg_shade);
        const float b = shade(bg[static_cast<std::size_t>(c)], j.bg_shade);
        out.image.at(c, y, x) = cov * f + (1.0f - cov) * b;
      }
      out.fg_raster.at(y, x) = 2 * hits >= ss * ss ? 1 : 0;
    }
  }
  return out;
}

RenderedScene render_scene(const SceneSpec& spec, int size) {
  return render_scene(spec, size, jitter_from_seed(spec.jitter_seed));
}

std::vector<DatasetSample> make_dataset(int n, std::uint64_t seed, const TokenGrammar& grammar, int size) {
  MASA_EXPECTS(n >= 1, "make_dataset: n must be positive");
  std::mt19937_64 rng(seed);
  std::vector<DatasetSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const SceneSpec spec = combination(i % kNumCombinations, rng());
    auto rendered = render_scene(spec, size);
    out.push_back({spec, grammar.encode(spec), std::move(rendered.image), std::move(rendered.fg_raster)});
  }
  return out;
}

// ------------------------------------------------------------------ classifier

namespace {

double color_dist(const Rgb& a, const Rgb& b) {
  double s = 0;
  for (int c = 0; c < 3; ++c) {
    const double d = static_cast<double>(a[static_cast<std::size_t>(c)]) - b[static_cast<std::size_t>(c)];
    s += d * d;
  }
  return std::sqrt(s);
}

Rgb pixel(const Image& img, int y, int x) { return {img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)}; }

struct ShapeFeatures {
  double extent = 0;  // area / bounding-box area
  double hu1 = 0;     // eta20 + eta02
};

ShapeFeatures shape_features(const Mask2D& m) {
  double area = 0, sx = 0, sy = 0;
  int x0 = m.width, x1 = -1, y0 = m.height, y1 = -1;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      area += 1;
      sx += x;
      sy += y;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  ShapeFeatures f;
  if (area == 0) return f;
  const double mx = sx / area, my = sy / area;
  double mu20 = 0, mu02 = 0;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      mu20 += (x - mx) * (x - mx);
      mu02 += (y - my) * (y - my);
    }
  }
  f.extent = area / (static_cast<double>(x1 - x0 + 1) * (y1 - y0 + 1));
  f.hu1 = (mu20 + mu02) / (area * area);
  return f;
}

const std::array<ShapeFeatures, kNumShapes>& shape_templates(int size) {
  static thread_local int cached_size = -1;
  static thread_local std::array<ShapeFeatures, kNumShapes> cache{};
  if (cached_size != size) {
    for (int s = 0; s < kNumShapes; ++s) {
      SceneSpec spec;
      spec.shape = static_cast<Shape>(s);
      spec.position = Position::center;
      cache[static_cast<std::size_t>(s)] = shape_features(render_scene(spec, size, Jitter{}).fg_raster);
    }
    cached_size = size;
  }
  return cache;
}

}  // namespace

SceneEstimate scene_classify(const Image& img) {
  SceneEstimate est;
  const int w = img.width, h = img.height;
  est.foreground = Mask2D(w, h);
  // background estimate: per-channel median of the border ring
  Rgb bg{};
  for (int c = 0; c < 3; ++c) {
    std::vector<float> ring;
    for (int x = 0; x < w; ++x) {
      ring.push_back(img.at(c, 0, x));
      ring.push_back(img.at(c, h - 1, x));
    }
    for (int y = 1; y + 1 < h; ++y) {
      ring.push_back(img.at(c, y, 0));
      ring.push_back(img.at(c, y, w - 1));
    }
    std::nth_element(ring.begin(), ring.begin() + static_cast<long>(ring.size() / 2), ring.end());
    bg[static_cast<std::size_t>(c)] = ring[ring.size() / 2];
  }
  est.bg_mean = bg;
  int best_bg = 0;
  for (int b = 1; b < kNumBgColors; ++b) {
    if (color_dist(bg, palette(static_cast<BgColor>(b))) < color_dist(bg, palette(static_cast<BgColor>(best_bg)))) best_bg = b;
  }
  est.spec.bg_color = static_cast<BgColor>(best_bg);

  std::vector<double> dist(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) dist[static_cast<std::size_t>(y) * w + x] = color_dist(pixel(img, y, x), bg);
  }
  std::vector<double> sorted = dist;
  std::sort(sorted.begin(), sorted.end());
  const double contrast = sorted[static_cast<std::size_t>(0.98 * static_cast<double>(sorted.size() - 1))];
  if (contrast < 0.15) return est;  // blank
  const double threshold = 0.5 * contrast;

  // 4-connected components above threshold
  std::vector<int> label(dist.size(), -1);
  std::vector<int> sizes;
  std::size_t total_fg = 0;
  for (std::size_t start = 0; start < dist.size(); ++start) {
    if (dist[start] < threshold || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    std::vector<std::size_t> stack{start};
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++sizes.back();
      const int py = static_cast<int>(p) / w, px = static_cast<int>(p) % w;
      const int nbr[4][2] = {{py - 1, px}, {py + 1, px}, {py, px - 1}, {py, px + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const std::size_t q = static_cast<std::size_t>(n[0]) * w + n[1];
        if (dist[q] >= threshold && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
    total_fg += static_cast<std::size_t>(sizes.back());
  }
  if (sizes.empty()) return est;
  const int main = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  const int area = sizes[static_cast<std::size_t>(main)];
  if (area < 6) return est;

  double sx = 0, sy = 0;
  Rgb mean{};
  int core_n = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      if (label[p] != main) continue;
      est.foreground.at(y, x) = 1;
      sx += x;
      sy += y;
      if (dist[p] >= 0.75 * contrast) {
        const Rgb px = pixel(img, y, x);
        for (int c = 0; c < 3; ++c) mean[static_cast<std::size_t>(c)] += px[static_cast<std::size_t>(c)];
        ++core_n;
      }
    }
  }
  est.centroid_x = sx / area + 0.5;
  est.centroid_y = sy / area + 0.5;
  if (core_n == 0) return est;
  for (auto& v : mean) v /= static_cast<float>(core_n);
  est.fg_mean = mean;

  auto nearest_fg = [](const Rgb& c) {
    int best = 0;
    for (int f = 1; f < kNumFgColors; ++f) {
      if (color_dist(c, palette(static_cast<FgColor>(f))) < color_dist(c, palette(static_cast<FgColor>(best)))) best = f;
    }
    return best;
  };
  const int fg = nearest_fg(mean);
  est.spec.fg_color = static_cast<FgColor>(fg);

  int pure = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      if (label[p] == main && dist[p] >= 0.75 * contrast) pure += nearest_fg(pixel(img, y, x)) == fg;
    }
  }

  const double third = w / 3.0;
  est.spec.position = est.centroid_x < third ? Position::left
                      : est.centroid_x > 2 * third ? Position::right
                                                   : Position::center;

  const ShapeFeatures f = shape_features(est.foreground);
  const auto& templates = shape_templates(w);
  double best_d = 1e300;
  for (int s = 0; s < kNumShapes; ++s) {
    const auto& t = templates[static_cast<std::size_t>(s)];
    const double de = (f.extent - t.extent) / 0.1;
    const double dh = (f.hu1 - t.hu1) / 0.01;
    const double d = de * de + dh * dh;
    if (d < best_d) {
      best_d = d;
      est.spec.shape = static_cast<Shape>(s);
    }
  }

  const double dominance = static_cast<double>(area) / static_cast<double>(total_fg);
  const double purity = static_cast<double>(pure) / core_n;
  est.confidence = std::min(dominance, purity);
  est.low_confidence = est.confidence < 0.5;
  return est;
}

std::vector<double> color_histogram(const Image& img, const Mask2D& mask, int bins) {
  MASA_EXPECTS(mask.width == img.width && mask.height == img.height, "color_histogram: mask size mismatch");
  std::vector<double> hist(static_cast<std::size_t>(3 * bins), 0.0);
  double n = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!mask.at(y, x)) continue;
      n += 1;
      for (int c = 0; c < 3; ++c) {
        const int b = std::clamp(static_cast<int>(img.at(c, y, x) * bins), 0, bins - 1);
        hist[static_cast<std::size_t>(c * bins + b)] += 1;
      }
    }
  }
  if (n > 0) {
    for (auto& v : hist) v /= n;
  }
  return hist;
}

double chi2_distance(const std::vector<double>& p, const std::vector<double>& q, int channels) {
  MASA_EXPECTS(p.size() == q.size() && channels > 0 && p.size() % static_cast<std::size_t>(channels) == 0,
               "chi2_distance: histogram size mismatch");
  const std::size_t bins = p.size() / static_cast<std::size_t>(channels);
  double total = 0;
  for (int c = 0; c < channels; ++c) {
    double mass_p = 0, mass_q = 0, d = 0;
    for (std::size_t b = 0; b < bins; ++b) {
      const double a = p[c * bins + b], e = q[c * bins + b];
      mass_p += a;
      mass_q += e;
      if (a + e > 0) d += (a - e) * (a - e) / (a + e);
    }
    if (mass_p == 0 && mass_q == 0) continue;
    if (mass_p == 0 || mass_q == 0) {
      total += 1.0;
      continue;
    }
    total += 0.5 * d;
  }
  return total / channels;
}

double content_preservation(const Image& edited, const Image& source) {
  const SceneEstimate e = scene_classify(edited);
  const SceneEstimate s = scene_classify(source);
  auto complement = [](const Mask2D& m) {
    Mask2D c = m;
    for (auto& v : c.values) v = v ? 0 : 1;
    return c;
  };
  const double fg = chi2_distance(color_histogram(edited, e.foreground), color_histogram(source, s.foreground));
  const double bg = chi2_distance(color_histogram(edited, complement(e.foreground)),
                                  color_histogram(source, complement(s.foreground)));
  return 1.0 - 0.5 * (fg + bg);
}

EditScores score_edit(const Image& edited, const Image& source, const PromptTokens& source_prompt,
                      const PromptTokens& target_prompt) {
  MASA_EXPECTS(source_prompt.ids.size() == target_prompt.ids.size(), "score_edit: prompt lengths differ");
  const SceneEstimate est = scene_classify(edited);
  const PromptTokens realized = TokenGrammar(static_cast<int>(target_prompt.ids.size())).encode(est.spec);
  int changed = 0, changed_ok = 0, specified = 0, specified_ok = 0;
  for (int slot = 0; slot < TokenGrammar::kNumSlots; ++slot) {
    const auto i = static_cast<std::size_t>(slot);
    const int want = target_prompt.ids[i];
    if (want == TokenGrammar::kPad) continue;
    const bool ok = !est.low_confidence && realized.ids[i] == want;
    ++specified;
    specified_ok += ok;
    if (source_prompt.ids[i] != want) {
      ++changed;
      changed_ok += ok;
    }
  }
  EditScores s;
  s.content = content_preservation(edited, source);
  if (changed > 0) {
    s.layout = static_cast<double>(changed_ok) / changed;
  } else {
    s.layout = specified > 0 ? static_cast<double>(specified_ok) / specified : 1.0;
  }
  s.combined = s.content * s.layout;
  return s;
}

}  // namespace masa
