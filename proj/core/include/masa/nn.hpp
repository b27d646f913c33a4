#pragma once

// Layer building blocks of the toy denoiser with explicit forward/backward.
// Feature maps are row-major [channels, height * width] matrices whose
// columns follow row-major pixel order (y * width + x).

#include <Eigen/Dense>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "masa/attention.hpp"
#include "masa/controller.hpp"

namespace masa::nn {

template <typename T>
using Feat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  void resize(std::string param_name, Eigen::Index rows, Eigen::Index cols) {
    name = std::move(param_name);
    value = Mat<T>::Zero(rows, cols);
    grad = Mat<T>::Zero(rows, cols);
  }
  void zero_grad() { grad.setZero(); }
};

template <typename T>
using ParamVisitor = std::function<void(Param<T>&)>;
template <typename T>
using ConstParamVisitor = std::function<void(const Param<T>&)>;

enum class Init { normal, zero };

template <typename T>
void init_normal(Param<T>& p, std::mt19937_64& rng, double stddev);

template <typename T>
Feat<T> silu(const Feat<T>& x);
template <typename T>
Feat<T> silu_backward(const Feat<T>& x, const Feat<T>& dy);

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, bool bias);

  [[nodiscard]] int in_features() const { return static_cast<int>(w_.value.cols()); }
  [[nodiscard]] int out_features() const { return static_cast<int>(w_.value.rows()); }

  // x: [in, n] -> [out, n]
  [[nodiscard]] Feat<T> forward(const Feat<T>& x) const;
  // Accumulates parameter gradients and returns d/dx.
  Feat<T> backward(const Feat<T>& x, const Feat<T>& dy);

  void init(std::mt19937_64& rng, Init mode);
  void visit(const ParamVisitor<T>& f);
  void visit(const ConstParamVisitor<T>& f) const;

 private:
  Param<T> w_;
  Param<T> b_;
  bool has_bias_ = false;
};

template <typename T>
class Conv2d {
 public:
  struct Cache {
    Feat<T> columns;  // im2col of the input
    int height = 0;
    int width = 0;
  };

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride);

  [[nodiscard]] int out_side(int side) const { return (side + 2 * pad_ - kernel_) / stride_ + 1; }
  [[nodiscard]] int out_channels() const { return out_; }

  [[nodiscard]] Feat<T> forward(const Feat<T>& x, int height, int width, Cache* cache) const;
  Feat<T> backward(const Cache& cache, const Feat<T>& dy);

  void init(std::mt19937_64& rng, Init mode);
  void visit(const ParamVisitor<T>& f);
  void visit(const ConstParamVisitor<T>& f) const;

 private:
  [[nodiscard]] Feat<T> im2col(const Feat<T>& x, int height, int width) const;
  [[nodiscard]] Feat<T> col2im(const Feat<T>& cols, int height, int width) const;

  Param<T> w_;  // [out, in * k * k]
  Param<T> b_;  // [out, 1]
  int in_ = 0;
  int out_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
  int pad_ = 0;
};

template <typename T>
class GroupNorm {
 public:
  struct Cache {
    Feat<T> normalized;
    Vec<T> inv_std;  // per group
  };

  GroupNorm() = default;
  GroupNorm(const std::string& name, int channels, int groups);

  [[nodiscard]] Feat<T> forward(const Feat<T>& x, Cache* cache) const;
  Feat<T> backward(const Cache& cache, const Feat<T>& dy);

  void init();
  void visit(const ParamVisitor<T>& f);
  void visit(const ConstParamVisitor<T>& f) const;

 private:
  Param<T> gamma_;
  Param<T> beta_;
  int channels_ = 0;
  int groups_ = 1;
};

// GN -> SiLU -> conv3x3 -> GN -> FiLM(time) -> SiLU -> conv3x3, plus skip.
template <typename T>
class ResBlock {
 public:
  struct Cache {
    typename GroupNorm<T>::Cache gn1, gn2;
    Feat<T> gn1_out;
    typename Conv2d<T>::Cache conv1, conv2, skip;
    Feat<T> gn2_out;
    Feat<T> scale, shift;  // [c, 1]
    Feat<T> film_out;
  };

  ResBlock() = default;
  ResBlock(const std::string& name, int in, int out, int time_dim, int groups);

  [[nodiscard]] int out_channels() const { return out_; }

  [[nodiscard]] Feat<T> forward(const Feat<T>& x, int side, const Feat<T>& temb_act, Cache* cache) const;
  // Returns d/dx and accumulates into d_temb_act.
  Feat<T> backward(const Cache& cache, int side, const Feat<T>& temb_act, const Feat<T>& dy,
                   Feat<T>& d_temb_act);

  void init(std::mt19937_64& rng, bool zero_output);
  void visit(const ParamVisitor<T>& f);
  void visit(const ConstParamVisitor<T>& f) const;

 private:
  GroupNorm<T> gn1_, gn2_;
  Conv2d<T> conv1_, conv2_, skip_;
  Linear<T> film_;
  int in_ = 0;
  int out_ = 0;
  bool has_skip_ = false;
};

// Multi-head attention sublayer with residual: x + W_o * Attention(Q, K, V).
// Self-attention projects K, V from the normalized features; cross-attention
// projects them from the prompt embedding.
template <typename T>
class AttentionLayer {
 public:
  struct Cache {
    typename GroupNorm<T>::Cache gn;
    Feat<T> normalized;
    Heads<T> q, k, v, weights;
    Feat<T> merged;  // [c, n]
  };

  AttentionLayer() = default;
  AttentionLayer(const std::string& name, LayerInfo info, int channels, int context_dim, int heads,
                 int groups);

  [[nodiscard]] const LayerInfo& info() const { return info_; }

  // context: nullptr for self-attention, else [context_dim, N].
  [[nodiscard]] Feat<T> forward(const Feat<T>& x, const Feat<T>* context, AttentionController<T>* controller,
                                int batch_index, Cache* cache) const;
  // Returns d/dx; for cross-attention accumulates into d_context.
  Feat<T> backward(const Cache& cache, const Feat<T>& x, const Feat<T>* context, const Feat<T>& dy,
                   Feat<T>* d_context);

  void init(std::mt19937_64& rng, bool zero_output);
  void visit(const ParamVisitor<T>& f);
  void visit(const ConstParamVisitor<T>& f) const;

 private:
  [[nodiscard]] Heads<T> split(const Feat<T>& f) const;
  [[nodiscard]] Feat<T> merge(const Heads<T>& h) const;

  LayerInfo info_;
  GroupNorm<T> norm_;
  Linear<T> to_q_, to_k_, to_v_, to_out_;
  int channels_ = 0;
  int heads_ = 1;
};

// Residual block optionally followed by self- and cross-attention.
template <typename T>
struct BasicBlock {
  ResBlock<T> res;
  bool has_attention = false;
  AttentionLayer<T> self_attn;
  AttentionLayer<T> cross_attn;

  struct Cache {
    typename ResBlock<T>::Cache res;
    Feat<T> after_res, after_self;
    typename AttentionLayer<T>::Cache self_attn, cross_attn;
  };
};

// Sinusoidal timestep features of even dimension.
template <typename T>
Feat<T> timestep_features(int t, int dim);

// Nearest-neighbour 2x upsampling of a square feature map.
template <typename T>
Feat<T> upsample2x(const Feat<T>& x, int side);
template <typename T>
Feat<T> upsample2x_backward(const Feat<T>& dy, int side);

}  // namespace masa::nn
