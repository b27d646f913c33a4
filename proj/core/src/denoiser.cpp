#include "masa/denoiser.hpp"

#include <algorithm>

#include "masa/errors.hpp"

namespace masa {

std::string to_string(LayerKind kind) {
  return kind == LayerKind::self_attention ? "self_attention" : "cross_attention";
}

std::string to_string(Section section) {
  switch (section) {
    case Section::encoder:
      return "encoder";
    case Section::middle:
      return "middle";
    case Section::decoder:
      return "decoder";
  }
  return "?";
}

bool DenoiserConfig::has_attention_at(int resolution) const {
  return std::find(attention_resolutions.begin(), attention_resolutions.end(), resolution) !=
         attention_resolutions.end();
}

int DenoiserConfig::num_attention_blocks() const {
  int blocks = 1;  // middle
  for (int level = 0; level < num_levels(); ++level) {
    if (!has_attention_at(level_resolution(level))) continue;
    blocks += 1;                     // encoder
    blocks += level == 0 ? 1 : 2;    // decoder
  }
  return blocks;
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("denoiser config: " + m); };
  if (image_size <= 0 || in_channels <= 0 || base_channels <= 0) fail("sizes must be positive");
  if (channel_multipliers.empty()) fail("need at least one resolution level");
  if (image_size % (1 << (num_levels() - 1)) != 0) fail("image_size not divisible by the downsampling factor");
  for (int m : channel_multipliers) {
    if (m <= 0) fail("channel multipliers must be positive");
  }
  if (groups <= 0) fail("groups must be positive");
  for (int level = 0; level < num_levels(); ++level) {
    if (level_channels(level) % groups != 0) fail("channel width not divisible by groups");
  }
  for (int r : attention_resolutions) {
    if (r <= 0 || image_size % r != 0) fail("attention resolution must divide image_size");
    bool found = false;
    for (int level = 0; level < num_levels(); ++level) found = found || level_resolution(level) == r;
    if (!found) fail("attention resolution " + std::to_string(r) + " is not a level resolution");
  }
  auto check_heads = [&](int width) {
    if (heads * head_dim != width) {
      fail("heads * head_dim = " + std::to_string(heads * head_dim) + " must equal channel width " +
           std::to_string(width) + " at attention levels");
    }
  };
  for (int level = 0; level < num_levels(); ++level) {
    if (has_attention_at(level_resolution(level))) check_heads(level_channels(level));
  }
  check_heads(level_channels(num_levels() - 1));  // middle block
  if (vocab_size <= 0 || token_embed_dim <= 0 || max_tokens <= 0) fail("token settings must be positive");
  if (time_embed_dim <= 0 || base_channels % 2 != 0) fail("time embedding needs an even base width");
}

template <typename T>
nn::Feat<T> to_features(const Tensor<T>& t, int batch_index) {
  const auto& s = t.shape();
  auto src = t.sample(batch_index);
  return Eigen::Map<const nn::Feat<T>>(src.data(), s.channels, static_cast<Eigen::Index>(s.height) * s.width);
}

template <typename T>
nn::BasicBlock<T> Denoiser<T>::make_block(const std::string& name, int in, int out, int side, bool attention,
                                          Section section) {
  nn::BasicBlock<T> b;
  b.res = nn::ResBlock<T>(name + ".res", in, out, config_.time_embed_dim, config_.groups);
  b.has_attention = attention;
  if (attention) {
    LayerInfo self{static_cast<int>(registry_.size()), LayerKind::self_attention, side, section};
    registry_.push_back(self);
    b.self_attn = nn::AttentionLayer<T>(name + ".self_attn", self, out, out, config_.heads, config_.groups);
    LayerInfo cross{static_cast<int>(registry_.size()), LayerKind::cross_attention, side, section};
    registry_.push_back(cross);
    b.cross_attn = nn::AttentionLayer<T>(name + ".cross_attn", cross, out, config_.token_embed_dim, config_.heads,
                                         config_.groups);
  }
  return b;
}

template <typename T>
Denoiser<T> Denoiser<T>::build(const DenoiserConfig& config, std::uint64_t seed) {
  config.validate();
  Denoiser<T> d;
  d.config_ = config;
  const int levels = config.num_levels();
  const int c0 = config.level_channels(0);

  d.token_table_.resize("token.table", config.token_embed_dim, config.vocab_size);
  d.token_pos_.resize("token.pos", config.token_embed_dim, config.max_tokens);
  d.time_lin1_ = nn::Linear<T>("time.lin1", c0, config.time_embed_dim, true);
  d.time_lin2_ = nn::Linear<T>("time.lin2", config.time_embed_dim, config.time_embed_dim, true);
  d.conv_in_ = nn::Conv2d<T>("conv_in", config.in_channels, c0, 3, 1);

  std::vector<int> skip_channels;
  int ch = c0;
  for (int level = 0; level < levels; ++level) {
    const int side = config.level_resolution(level);
    const int out = config.level_channels(level);
    d.encoder_.push_back(d.make_block("enc." + std::to_string(level), ch, out, side,
                                      config.has_attention_at(side), Section::encoder));
    ch = out;
    skip_channels.push_back(ch);
    if (level + 1 < levels) {
      d.down_.push_back(nn::Conv2d<T>("down." + std::to_string(level), ch, ch, 3, 2));
      skip_channels.push_back(ch);
    }
  }
  const int bottom_side = config.level_resolution(levels - 1);
  d.middle_ = d.make_block("mid", ch, ch, bottom_side, true, Section::middle);

  int block_id = 0;
  for (int level = levels - 1; level >= 0; --level) {
    const int side = config.level_resolution(level);
    const int out = config.level_channels(level);
    const int blocks = level == 0 ? 1 : 2;
    for (int j = 0; j < blocks; ++j) {
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      d.decoder_.push_back(d.make_block("dec." + std::to_string(block_id++), ch + skip, out, side,
                                        config.has_attention_at(side), Section::decoder));
      d.decoder_slots_.push_back({side, ch, level > 0 && j + 1 == blocks});
      ch = out;
    }
  }
  d.out_norm_ = nn::GroupNorm<T>("out.norm", ch, config.groups);
  d.conv_out_ = nn::Conv2d<T>("conv_out", ch, config.in_channels, 3, 1);
  d.init_parameters(seed, true);
  return d;
}

template <typename T>
void Denoiser<T>::init_parameters(std::uint64_t seed, bool zero_output) {
  std::mt19937_64 rng(seed);
  nn::init_normal(token_table_, rng, 1.0);
  nn::init_normal(token_pos_, rng, 0.2);
  time_lin1_.init(rng, nn::Init::normal);
  time_lin2_.init(rng, nn::Init::normal);
  conv_in_.init(rng, nn::Init::normal);
  auto init_block = [&](nn::BasicBlock<T>& b) {
    b.res.init(rng, zero_output);
    if (b.has_attention) {
      b.self_attn.init(rng, zero_output);
      b.cross_attn.init(rng, zero_output);
    }
  };
  for (auto& b : encoder_) init_block(b);
  for (auto& c : down_) c.init(rng, nn::Init::normal);
  init_block(middle_);
  for (auto& b : decoder_) init_block(b);
  out_norm_.init();
  conv_out_.init(rng, zero_output ? nn::Init::zero : nn::Init::normal);
}

template <typename T>
int Denoiser<T>::decoder_start() const {
  for (const auto& l : registry_) {
    if (l.section == Section::decoder) return l.index;
  }
  return static_cast<int>(registry_.size());
}

template <typename T>
PromptEmbedding<T> Denoiser<T>::embed_prompt(const PromptTokens& tokens) const {
  if (static_cast<int>(tokens.ids.size()) != config_.max_tokens) {
    throw ContractError("embed_prompt: expected " + std::to_string(config_.max_tokens) + " tokens, got " +
                        std::to_string(tokens.ids.size()));
  }
  PromptEmbedding<T> e;
  e.values.resize(config_.max_tokens, config_.token_embed_dim);
  for (int i = 0; i < config_.max_tokens; ++i) {
    const int id = tokens.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= config_.vocab_size) {
      throw ContractError("embed_prompt: token id " + std::to_string(id) + " outside vocabulary");
    }
    e.values.row(i) = (token_table_.value.col(id) + token_pos_.value.col(i)).transpose();
  }
  return e;
}

template <typename T>
nn::Feat<T> Denoiser<T>::context_features(const PromptEmbedding<T>& e) const {
  MASA_EXPECTS(e.values.rows() == config_.max_tokens && e.values.cols() == config_.token_embed_dim,
               "prompt embedding shape mismatch");
  return e.values.transpose();
}

template <typename T>
nn::Feat<T> Denoiser<T>::block_forward(const nn::BasicBlock<T>& b, const Feat& x, int side, const Feat& temb_act,
                                       const Feat& context, AttentionController<T>* controller, int batch_index,
                                       BlockCache* cache) const {
  Feat h = b.res.forward(x, side, temb_act, cache ? &cache->res : nullptr);
  if (!b.has_attention) return h;
  Feat h2 = b.self_attn.forward(h, nullptr, controller, batch_index, cache ? &cache->self_attn : nullptr);
  Feat h3 = b.cross_attn.forward(h2, &context, controller, batch_index, cache ? &cache->cross_attn : nullptr);
  if (cache) {
    cache->after_res = std::move(h);
    cache->after_self = std::move(h2);
  }
  return h3;
}

template <typename T>
nn::Feat<T> Denoiser<T>::block_backward(nn::BasicBlock<T>& b, const BlockCache& cache, int side,
                                        const Feat& temb_act, const Feat& context, const Feat& dy,
                                        Feat& d_temb_act, Feat& d_context) {
  Feat d = dy;
  if (b.has_attention) {
    d = b.cross_attn.backward(cache.cross_attn, cache.after_self, &context, d, &d_context);
    d = b.self_attn.backward(cache.self_attn, cache.after_res, nullptr, d, nullptr);
  }
  return b.res.backward(cache.res, side, temb_act, d, d_temb_act);
}

template <typename T>
nn::Feat<T> Denoiser<T>::forward_impl(const Feat& x, int timestep, const Feat& context,
                                      AttentionController<T>* controller, int batch_index,
                                      const SpatialCondition<T>* condition, Tape* tape) const {
  const int levels = config_.num_levels();
  const int size = config_.image_size;
  MASA_EXPECTS(x.rows() == config_.in_channels && x.cols() == static_cast<Eigen::Index>(size) * size,
               "denoiser: input shape does not match config");

  Feat tf = nn::timestep_features<T>(timestep, config_.level_channels(0));
  Feat th = time_lin1_.forward(tf);
  Feat tha = nn::silu(th);
  Feat temb = time_lin2_.forward(tha);
  Feat temb_act = nn::silu(temb);

  if (tape) {
    tape->encoder.resize(encoder_.size());
    tape->down.resize(down_.size());
    tape->decoder.resize(decoder_.size());
  }

  std::vector<Feat> skips;
  int side = size;
  Feat h = conv_in_.forward(x, side, side, tape ? &tape->conv_in : nullptr);
  for (int level = 0; level < levels; ++level) {
    const auto li = static_cast<std::size_t>(level);
    h = block_forward(encoder_[li], h, side, temb_act, context, controller, batch_index,
                      tape ? &tape->encoder[li] : nullptr);
    if (condition) {
      auto it = condition->maps.find(side);
      if (it != condition->maps.end()) h += it->second;
    }
    skips.push_back(h);
    if (level + 1 < levels) {
      h = down_[li].forward(h, side, side, tape ? &tape->down[li] : nullptr);
      side /= 2;
      skips.push_back(h);
    }
  }
  h = block_forward(middle_, h, side, temb_act, context, controller, batch_index, tape ? &tape->middle : nullptr);
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    const Feat& skip = skips.back();
    Feat cat(h.rows() + skip.rows(), h.cols());
    cat.topRows(h.rows()) = h;
    cat.bottomRows(skip.rows()) = skip;
    skips.pop_back();
    h = block_forward(decoder_[j], cat, side, temb_act, context, controller, batch_index,
                      tape ? &tape->decoder[j] : nullptr);
    if (decoder_slots_[j].upsample_after) {
      h = nn::upsample2x(h, side);
      side *= 2;
    }
  }
  Feat a = out_norm_.forward(h, tape ? &tape->out_norm : nullptr);
  Feat out = conv_out_.forward(nn::silu(a), side, side, tape ? &tape->conv_out : nullptr);
  if (tape) {
    tape->context = context;
    tape->timestep = timestep;
    tape->time_features = std::move(tf);
    tape->time_hidden = std::move(th);
    tape->time_hidden_act = std::move(tha);
    tape->temb = std::move(temb);
    tape->temb_act = std::move(temb_act);
    tape->out_norm_out = std::move(a);
  }
  return out;
}

template <typename T>
nn::Feat<T> Denoiser<T>::forward_sample(const Feat& x, int timestep, const PromptTokens& tokens, Tape* tape) const {
  const Feat context = context_features(embed_prompt(tokens));
  if (tape) tape->tokens = tokens;
  return forward_impl(x, timestep, context, nullptr, 0, nullptr, tape);
}

template <typename T>
void Denoiser<T>::backward_sample(const Tape& tape, const Feat& d_out) {
  const int levels = config_.num_levels();
  Feat d_temb_act = Feat::Zero(tape.temb_act.rows(), 1);
  Feat d_context = Feat::Zero(tape.context.rows(), tape.context.cols());

  Feat d = conv_out_.backward(tape.conv_out, d_out);
  d = nn::silu_backward(tape.out_norm_out, d);
  d = out_norm_.backward(tape.out_norm, d);

  std::vector<Feat> d_skips(decoder_.size());
  for (std::size_t jj = decoder_.size(); jj-- > 0;) {
    const auto& slot = decoder_slots_[jj];
    if (slot.upsample_after) d = nn::upsample2x_backward(d, slot.side);
    Feat dcat = block_backward(decoder_[jj], tape.decoder[jj], slot.side, tape.temb_act, tape.context, d,
                               d_temb_act, d_context);
    // decoder block jj consumed skip (num_skips - 1 - jj)
    d_skips[decoder_.size() - 1 - jj] = dcat.bottomRows(dcat.rows() - slot.carry_channels);
    d = dcat.topRows(slot.carry_channels);
  }
  const int bottom_side = config_.level_resolution(levels - 1);
  d = block_backward(middle_, tape.middle, bottom_side, tape.temb_act, tape.context, d, d_temb_act, d_context);

  std::size_t skip_index = d_skips.size();
  for (int level = levels - 1; level >= 0; --level) {
    const auto li = static_cast<std::size_t>(level);
    if (level + 1 < levels) {
      d += d_skips[--skip_index];
      d = down_[li].backward(tape.down[li], d);
    }
    d += d_skips[--skip_index];
    d = block_backward(encoder_[li], tape.encoder[li], config_.level_resolution(level), tape.temb_act,
                       tape.context, d, d_temb_act, d_context);
  }
  (void)conv_in_.backward(tape.conv_in, d);

  Feat d_temb = nn::silu_backward(tape.temb, d_temb_act);
  Feat d_tha = time_lin2_.backward(tape.time_hidden_act, d_temb);
  Feat d_th = nn::silu_backward(tape.time_hidden, d_tha);
  (void)time_lin1_.backward(tape.time_features, d_th);

  for (int i = 0; i < config_.max_tokens; ++i) {
    token_table_.grad.col(tape.tokens.ids[static_cast<std::size_t>(i)]) += d_context.col(i);
  }
  token_pos_.grad += d_context;
}

template <typename T>
Tensor<T> Denoiser<T>::forward(const Tensor<T>& x, std::span<const int> timesteps,
                               std::span<const PromptEmbedding<T>> prompts, AttentionController<T>* controller,
                               const SpatialCondition<T>* condition) const {
  const auto& s = x.shape();
  const auto batch = static_cast<std::size_t>(s.batch);
  MASA_EXPECTS(s.channels == config_.in_channels && s.height == config_.image_size && s.width == config_.image_size,
               "denoiser: input shape " + to_string(s) + " does not match config");
  MASA_EXPECTS(timesteps.size() == 1 || timesteps.size() == batch, "denoiser: timestep count mismatch");
  MASA_EXPECTS(prompts.size() == 1 || prompts.size() == batch, "denoiser: prompt count mismatch");
  if (controller && controller->num_layers() != registry_.size()) {
    throw ContractError("denoiser: controller built for " + std::to_string(controller->num_layers()) +
                        " attention layers, model has " + std::to_string(registry_.size()));
  }
  if (condition) {
    for (const auto& [res, map] : condition->maps) {
      int level = -1;
      for (int l = 0; l < config_.num_levels(); ++l) {
        if (config_.level_resolution(l) == res) level = l;
      }
      if (level < 0 || map.rows() != config_.level_channels(level) ||
          map.cols() != static_cast<Eigen::Index>(res) * res) {
        throw ConfigError("spatial condition at resolution " + std::to_string(res) +
                          " does not match an encoder level");
      }
    }
  }
  Tensor<T> out(s);
  for (std::size_t b = 0; b < batch; ++b) {
    const int t = timesteps.size() == 1 ? timesteps[0] : timesteps[b];
    const auto& prompt = prompts.size() == 1 ? prompts[0] : prompts[b];
    const Feat context = context_features(prompt);
    const Feat xb = to_features(x, static_cast<int>(b));
    const Feat eps = forward_impl(xb, t, context, controller, static_cast<int>(b), condition, nullptr);
    auto dst = out.sample(static_cast<int>(b));
    Eigen::Map<Feat>(dst.data(), eps.rows(), eps.cols()) = eps;
  }
  return out;
}

template <typename T>
void Denoiser<T>::visit_parameters(const nn::ParamVisitor<T>& f) {
  f(token_table_);
  f(token_pos_);
  time_lin1_.visit(f);
  time_lin2_.visit(f);
  conv_in_.visit(f);
  auto visit_block = [&](nn::BasicBlock<T>& b) {
    b.res.visit(f);
    if (b.has_attention) {
      b.self_attn.visit(f);
      b.cross_attn.visit(f);
    }
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    visit_block(encoder_[i]);
    if (i < down_.size()) down_[i].visit(f);
  }
  visit_block(middle_);
  for (auto& b : decoder_) visit_block(b);
  out_norm_.visit(f);
  conv_out_.visit(f);
}

template <typename T>
void Denoiser<T>::visit_parameters(const nn::ConstParamVisitor<T>& f) const {
  f(token_table_);
  f(token_pos_);
  time_lin1_.visit(f);
  time_lin2_.visit(f);
  conv_in_.visit(f);
  auto visit_block = [&](const nn::BasicBlock<T>& b) {
    b.res.visit(f);
    if (b.has_attention) {
      b.self_attn.visit(f);
      b.cross_attn.visit(f);
    }
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    visit_block(encoder_[i]);
    if (i < down_.size()) down_[i].visit(f);
  }
  visit_block(middle_);
  for (const auto& b : decoder_) visit_block(b);
  out_norm_.visit(f);
  conv_out_.visit(f);
}

template <typename T>
std::vector<nn::Param<T>*> Denoiser<T>::parameters() {
  std::vector<nn::Param<T>*> out;
  visit_parameters([&](nn::Param<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
void Denoiser<T>::zero_grad() {
  visit_parameters([](nn::Param<T>& p) { p.zero_grad(); });
}

template <typename T>
std::size_t Denoiser<T>::num_parameters() const {
  std::size_t n = 0;
  visit_parameters([&](const nn::Param<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
  return n;
}

template class Denoiser<float>;
template class Denoiser<double>;
template nn::Feat<float> to_features(const Tensor<float>&, int);
template nn::Feat<double> to_features(const Tensor<double>&, int);

}  // namespace masa
