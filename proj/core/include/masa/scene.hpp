#pragma once

// Procedural shape scenes with known semantics, the prompt grammar that
// describes them, and the classifier used as an oracle on generated images.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "masa/denoiser.hpp"
#include "masa/image.hpp"

namespace masa {

enum class Shape { circle, square, triangle };
enum class FgColor { red, green, blue, yellow };
enum class Position { left, center, right };
enum class BgColor { white, gray, navy };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumFgColors = 4;
inline constexpr int kNumPositions = 3;
inline constexpr int kNumBgColors = 3;
inline constexpr int kNumCombinations = kNumShapes * kNumFgColors * kNumPositions * kNumBgColors;

std::string to_string(Shape v);
std::string to_string(FgColor v);
std::string to_string(Position v);
std::string to_string(BgColor v);

using Rgb = std::array<float, 3>;
Rgb palette(FgColor c);
Rgb palette(BgColor c);

struct SceneSpec {
  Shape shape = Shape::circle;
  FgColor fg_color = FgColor::red;
  Position position = Position::center;
  BgColor bg_color = BgColor::white;
  std::uint64_t jitter_seed = 0;

  // Attribute equality, ignoring jitter.
  [[nodiscard]] bool same_attributes(const SceneSpec& o) const {
    return shape == o.shape && fg_color == o.fg_color && position == o.position && bg_color == o.bg_color;
  }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

// Combination index in [0, kNumCombinations), jitter ignored.
int combination_index(const SceneSpec& spec);
SceneSpec combination(int index, std::uint64_t jitter_seed = 0);

// Token slots: [fg_color][shape][position][bg_color][pad...]. Id 0 is padding.
class TokenGrammar {
 public:
  static constexpr int kPad = 0;
  static constexpr int kFgColorSlot = 0;
  static constexpr int kShapeSlot = 1;
  static constexpr int kPositionSlot = 2;
  static constexpr int kBgColorSlot = 3;
  static constexpr int kNumSlots = 4;

  explicit TokenGrammar(int max_tokens = 8);

  [[nodiscard]] int max_tokens() const { return max_tokens_; }
  [[nodiscard]] static int vocab_size();
  [[nodiscard]] static const std::vector<std::string>& vocabulary();

  [[nodiscard]] PromptTokens encode(const SceneSpec& spec) const;
  // All-padding prompt, used as the unconditional prompt.
  [[nodiscard]] PromptTokens null_prompt() const;
  // Inverse of encode for fully specified prompts; nullopt when a slot is padding.
  [[nodiscard]] std::optional<SceneSpec> decode(const PromptTokens& tokens) const;

  // Parses a phrase such as "red circle left on white". Words fill their
  // attribute slot; "on" and "a" are ignored; missing attributes stay padding.
  // Throws ContractError for unknown or repeated words.
  [[nodiscard]] PromptTokens parse(const std::string& phrase) const;
  [[nodiscard]] std::string describe(const PromptTokens& tokens) const;

  static int token_id(FgColor v);
  static int token_id(Shape v);
  static int token_id(Position v);
  static int token_id(BgColor v);

 private:
  int max_tokens_;
};

struct Jitter {
  float dx = 0, dy = 0;     // pixel offset at 32x32, scaled with size
  float scale = 1;          // shape size factor
  float fg_shade = 0;       // brightness offset of the foreground color
  float bg_shade = 0;       // brightness offset of the background color
};
Jitter jitter_from_seed(std::uint64_t seed);

struct RenderedScene {
  Image image;
  Mask2D fg_raster;  // full-resolution foreground coverage >= 0.5
};

RenderedScene render_scene(const SceneSpec& spec, int size);
// Rendering with explicit jitter (used for classifier templates).
RenderedScene render_scene(const SceneSpec& spec, int size, const Jitter& jitter);

struct DatasetSample {
  SceneSpec spec;
  PromptTokens tokens;
  Image image;
  Mask2D fg_raster;
};

// Round-robin over attribute combinations with seeded jitter.
std::vector<DatasetSample> make_dataset(int n, std::uint64_t seed, const TokenGrammar& grammar, int size);

// ------------------------------------------------------------------ oracle

struct SceneEstimate {
  SceneSpec spec;
  double confidence = 0.0;
  bool low_confidence = true;
  Mask2D foreground;        // dominant component
  double centroid_x = 0.0;  // pixels
  double centroid_y = 0.0;
  Rgb fg_mean{};
  Rgb bg_mean{};
};

SceneEstimate scene_classify(const Image& image);

// Per-channel 16-bin color histograms of the pixels selected by mask,
// concatenated and normalized per channel.
std::vector<double> color_histogram(const Image& image, const Mask2D& mask, int bins = 16);
// Symmetric chi-square distance 0.5 * sum (p - q)^2 / (p + q), averaged over channels; in [0, 1].
double chi2_distance(const std::vector<double>& p, const std::vector<double>& q, int channels = 3);

// Content preservation between an edited image and its source: 1 minus the mean
// of the foreground and background histogram chi-square distances.
double content_preservation(const Image& edited, const Image& source);

struct EditScores {
  double content = 0.0;   // content_preservation(edited, source)
  double layout = 0.0;    // fraction of attributes changed by the target prompt that the edit realizes
  double combined = 0.0;  // content * layout
};

// When the prompts share every specified attribute, layout scores the target
// prompt's specified attributes instead.
EditScores score_edit(const Image& edited, const Image& source, const PromptTokens& source_prompt,
                      const PromptTokens& target_prompt);

}  // namespace masa
