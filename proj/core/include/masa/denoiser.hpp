#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "masa/controller.hpp"
#include "masa/nn.hpp"
#include "masa/tensor.hpp"

namespace masa {

struct DenoiserConfig {
  int image_size = 32;
  int in_channels = 3;
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 2};  // resolutions 32, 16, 8
  std::vector<int> attention_resolutions{16, 8};
  int heads = 4;
  int head_dim = 16;
  int vocab_size = 14;
  int token_embed_dim = 64;
  int max_tokens = 8;
  int groups = 8;
  int time_embed_dim = 128;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;

  [[nodiscard]] int num_levels() const { return static_cast<int>(channel_multipliers.size()); }
  [[nodiscard]] int level_channels(int level) const {
    return base_channels * channel_multipliers[static_cast<std::size_t>(level)];
  }
  [[nodiscard]] int level_resolution(int level) const { return image_size >> level; }
  [[nodiscard]] bool has_attention_at(int resolution) const;
  // Attention-bearing basic blocks implied by the configuration.
  [[nodiscard]] int num_attention_blocks() const;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

// Fixed-length padded token ids.
struct PromptTokens {
  std::vector<int> ids;
  friend bool operator==(const PromptTokens&, const PromptTokens&) = default;
};

template <typename T>
struct PromptEmbedding {
  Mat<T> values;  // [max_tokens, token_embed_dim]
};

// Precomputed feature maps added to encoder outputs, keyed by resolution.
// Each map is [level_channels, resolution * resolution].
template <typename T>
struct SpatialCondition {
  std::map<int, nn::Feat<T>> maps;
};

template <typename T>
class Denoiser {
 public:
  using Feat = nn::Feat<T>;
  using BlockCache = typename nn::BasicBlock<T>::Cache;

  // Per-sample activations kept for backpropagation.
  struct Tape {
    PromptTokens tokens;
    Feat context;  // [E, N]
    int timestep = 0;
    Feat time_features, time_hidden, time_hidden_act, temb, temb_act;
    typename nn::Conv2d<T>::Cache conv_in;
    std::vector<BlockCache> encoder;
    std::vector<typename nn::Conv2d<T>::Cache> down;
    BlockCache middle;
    std::vector<BlockCache> decoder;
    typename nn::GroupNorm<T>::Cache out_norm;
    Feat out_norm_out;
    typename nn::Conv2d<T>::Cache conv_out;
  };

  Denoiser() = default;

  // Deterministic parameter initialization from seed; the output convolution
  // starts at zero so an untrained model predicts eps = 0.
  static Denoiser build(const DenoiserConfig& config, std::uint64_t seed);

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<LayerInfo>& layer_registry() const { return registry_; }
  // Smallest layer index in the decoder section.
  [[nodiscard]] int decoder_start() const;

  [[nodiscard]] PromptEmbedding<T> embed_prompt(const PromptTokens& tokens) const;

  // Predicted noise for a batch. timesteps and prompts hold one entry per
  // batch item, or a single entry broadcast across the batch.
  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x, std::span<const int> timesteps,
                                  std::span<const PromptEmbedding<T>> prompts,
                                  AttentionController<T>* controller = nullptr,
                                  const SpatialCondition<T>* condition = nullptr) const;

  // Single-sample pass [in_channels, H*W] with optional activation tape.
  [[nodiscard]] Feat forward_sample(const Feat& x, int timestep, const PromptTokens& tokens, Tape* tape) const;
  // Accumulates parameter gradients of <d_out, eps_pred> into Param::grad.
  void backward_sample(const Tape& tape, const Feat& d_out);

  void init_parameters(std::uint64_t seed, bool zero_output);
  void zero_grad();
  void visit_parameters(const nn::ParamVisitor<T>& f);
  void visit_parameters(const nn::ConstParamVisitor<T>& f) const;
  [[nodiscard]] std::vector<nn::Param<T>*> parameters();
  [[nodiscard]] std::size_t num_parameters() const;

  template <typename U>
  [[nodiscard]] Denoiser<U> cast() const {
    Denoiser<U> out = Denoiser<U>::build(config_, 0);
    std::vector<const nn::Param<T>*> src;
    visit_parameters([&](const nn::Param<T>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.visit_parameters([&](nn::Param<U>& p) { p.value = src[i++]->value.template cast<U>(); });
    return out;
  }

 private:
  struct DecoderSlot {
    int side = 0;
    int carry_channels = 0;  // channels of h before the skip concat
    bool upsample_after = false;
  };

  [[nodiscard]] nn::BasicBlock<T> make_block(const std::string& name, int in, int out, int side, bool attention,
                                             Section section);
  [[nodiscard]] Feat block_forward(const nn::BasicBlock<T>& b, const Feat& x, int side, const Feat& temb_act,
                                   const Feat& context, AttentionController<T>* controller, int batch_index,
                                   BlockCache* cache) const;
  Feat block_backward(nn::BasicBlock<T>& b, const BlockCache& cache, int side, const Feat& temb_act,
                      const Feat& context, const Feat& dy, Feat& d_temb_act, Feat& d_context);
  [[nodiscard]] Feat context_features(const PromptEmbedding<T>& e) const;
  [[nodiscard]] Feat forward_impl(const Feat& x, int timestep, const Feat& context,
                                  AttentionController<T>* controller, int batch_index,
                                  const SpatialCondition<T>* condition, Tape* tape) const;

  DenoiserConfig config_;
  std::vector<LayerInfo> registry_;

  nn::Param<T> token_table_;  // [E, vocab]
  nn::Param<T> token_pos_;    // [E, N]
  nn::Linear<T> time_lin1_, time_lin2_;
  nn::Conv2d<T> conv_in_;
  std::vector<nn::BasicBlock<T>> encoder_;
  std::vector<nn::Conv2d<T>> down_;
  nn::BasicBlock<T> middle_;
  std::vector<nn::BasicBlock<T>> decoder_;
  std::vector<DecoderSlot> decoder_slots_;
  nn::GroupNorm<T> out_norm_;
  nn::Conv2d<T> conv_out_;
};

// Converts a batch-1 tensor sample to/from a feature matrix.
template <typename T>
nn::Feat<T> to_features(const Tensor<T>& t, int batch_index);

}  // namespace masa
