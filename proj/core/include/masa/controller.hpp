#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "masa/attention.hpp"

namespace masa {

enum class LayerKind { self_attention, cross_attention };
enum class Section { encoder, middle, decoder };

std::string to_string(LayerKind kind);
std::string to_string(Section section);

struct LayerInfo {
  int index = 0;       // global, forward order
  LayerKind kind = LayerKind::self_attention;
  int resolution = 0;  // side of the square attention grid
  Section section = Section::encoder;

  friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

// One attention evaluation inside a denoiser forward pass.
struct AttentionSite {
  const LayerInfo* layer = nullptr;
  int batch_index = 0;
};

// Hook through which every attention layer of the denoiser routes its inputs.
// Controllers are stateful and bound to a single job; the pipeline calls
// begin_pass before each forward pass.
template <typename T>
class AttentionController {
 public:
  virtual ~AttentionController() = default;

  // Number of attention layers the controller was built for.
  [[nodiscard]] virtual std::size_t num_layers() const = 0;

  // step_index counts completed denoising iterations; unconditional[b] marks
  // batch items evaluated with the unconditional (all-padding) prompt.
  virtual void begin_pass(int step_index, std::vector<bool> unconditional) = 0;

  // Returns the self-attention output [h][n_q, d].
  virtual Heads<T> self_attention(const AttentionSite& site, const Heads<T>& q, const Heads<T>& k,
                                  const Heads<T>& v) = 0;

  // Observes a cross-attention map [h][n_q, N] after it has been computed.
  virtual void observe_cross_attention(const AttentionSite& site, const Heads<T>& q,
                                       const Heads<T>& weights) = 0;
};

}  // namespace masa
