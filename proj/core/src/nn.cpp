#include "masa/nn.hpp"

#include <cmath>

#include "masa/errors.hpp"

namespace masa::nn {

template <typename T>
void init_normal(Param<T>& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = static_cast<T>(normal(rng));
  }
}

template <typename T>
Feat<T> silu(const Feat<T>& x) {
  return (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
Feat<T> silu_backward(const Feat<T>& x, const Feat<T>& dy) {
  const auto sig = (T(1) / (T(1) + (-x.array()).exp()));
  return (dy.array() * sig * (T(1) + x.array() * (T(1) - sig))).matrix();
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(const std::string& name, int in, int out, bool bias) : has_bias_(bias) {
  w_.resize(name + ".w", out, in);
  if (bias) b_.resize(name + ".b", out, 1);
}

template <typename T>
Feat<T> Linear<T>::forward(const Feat<T>& x) const {
  MASA_EXPECTS(x.rows() == w_.value.cols(), "linear: input width mismatch in " + w_.name);
  Feat<T> y = w_.value * x;
  if (has_bias_) y.colwise() += b_.value.col(0);
  return y;
}

template <typename T>
Feat<T> Linear<T>::backward(const Feat<T>& x, const Feat<T>& dy) {
  w_.grad.noalias() += dy * x.transpose();
  if (has_bias_) b_.grad.col(0) += dy.rowwise().sum();
  Feat<T> dx = w_.value.transpose() * dy;
  return dx;
}

template <typename T>
void Linear<T>::init(std::mt19937_64& rng, Init mode) {
  if (mode == Init::zero) {
    w_.value.setZero();
  } else {
    init_normal(w_, rng, 1.0 / std::sqrt(static_cast<double>(w_.value.cols())));
  }
  if (has_bias_) b_.value.setZero();
}

template <typename T>
void Linear<T>::visit(const ParamVisitor<T>& f) {
  f(w_);
  if (has_bias_) f(b_);
}

template <typename T>
void Linear<T>::visit(const ConstParamVisitor<T>& f) const {
  f(w_);
  if (has_bias_) f(b_);
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in, int out, int kernel, int stride)
    : in_(in), out_(out), kernel_(kernel), stride_(stride), pad_(kernel / 2) {
  w_.resize(name + ".w", out, in * kernel * kernel);
  b_.resize(name + ".b", out, 1);
}

template <typename T>
Feat<T> Conv2d<T>::im2col(const Feat<T>& x, int height, int width) const {
  const int ho = out_side(height);
  const int wo = out_side(width);
  Feat<T> cols(static_cast<Eigen::Index>(in_) * kernel_ * kernel_, static_cast<Eigen::Index>(ho) * wo);
  for (int ci = 0; ci < in_; ++ci) {
    const T* src = x.row(ci).data();
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        T* dst = cols.row((ci * kernel_ + ky) * kernel_ + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ + ky - pad_;
          T* drow = dst + oy * wo;
          if (iy < 0 || iy >= height) {
            std::fill(drow, drow + wo, T(0));
            continue;
          }
          const T* srow = src + iy * width;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ + kx - pad_;
            drow[ox] = (ix >= 0 && ix < width) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Feat<T> Conv2d<T>::col2im(const Feat<T>& cols, int height, int width) const {
  const int ho = out_side(height);
  const int wo = out_side(width);
  Feat<T> x = Feat<T>::Zero(in_, static_cast<Eigen::Index>(height) * width);
  for (int ci = 0; ci < in_; ++ci) {
    T* dst = x.row(ci).data();
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const T* src = cols.row((ci * kernel_ + ky) * kernel_ + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ + ky - pad_;
          if (iy < 0 || iy >= height) continue;
          const T* srow = src + oy * wo;
          T* drow = dst + iy * width;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ + kx - pad_;
            if (ix >= 0 && ix < width) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
  return x;
}

template <typename T>
Feat<T> Conv2d<T>::forward(const Feat<T>& x, int height, int width, Cache* cache) const {
  MASA_EXPECTS(x.rows() == in_ && x.cols() == static_cast<Eigen::Index>(height) * width,
               "conv2d: input shape mismatch in " + w_.name);
  Feat<T> y;
  if (kernel_ == 1 && stride_ == 1) {
    y = w_.value * x;
    if (cache) cache->columns = x;
  } else {
    Feat<T> cols = im2col(x, height, width);
    y = w_.value * cols;
    if (cache) cache->columns = std::move(cols);
  }
  y.colwise() += b_.value.col(0);
  if (cache) {
    cache->height = height;
    cache->width = width;
  }
  return y;
}

template <typename T>
Feat<T> Conv2d<T>::backward(const Cache& cache, const Feat<T>& dy) {
  w_.grad.noalias() += dy * cache.columns.transpose();
  b_.grad.col(0) += dy.rowwise().sum();
  Feat<T> dcols = w_.value.transpose() * dy;
  if (kernel_ == 1 && stride_ == 1) return dcols;
  return col2im(dcols, cache.height, cache.width);
}

template <typename T>
void Conv2d<T>::init(std::mt19937_64& rng, Init mode) {
  if (mode == Init::zero) {
    w_.value.setZero();
  } else {
    init_normal(w_, rng, 1.0 / std::sqrt(static_cast<double>(w_.value.cols())));
  }
  b_.value.setZero();
}

template <typename T>
void Conv2d<T>::visit(const ParamVisitor<T>& f) {
  f(w_);
  f(b_);
}

template <typename T>
void Conv2d<T>::visit(const ConstParamVisitor<T>& f) const {
  f(w_);
  f(b_);
}

// ---------------------------------------------------------------- GroupNorm

template <typename T>
GroupNorm<T>::GroupNorm(const std::string& name, int channels, int groups) : channels_(channels), groups_(groups) {
  MASA_EXPECTS(groups > 0 && channels % groups == 0, "group norm: channels not divisible by groups");
  gamma_.resize(name + ".gamma", channels, 1);
  beta_.resize(name + ".beta", channels, 1);
  init();
}

template <typename T>
void GroupNorm<T>::init() {
  gamma_.value.setOnes();
  beta_.value.setZero();
}

template <typename T>
Feat<T> GroupNorm<T>::forward(const Feat<T>& x, Cache* cache) const {
  MASA_EXPECTS(x.rows() == channels_, "group norm: channel mismatch in " + gamma_.name);
  constexpr double eps = 1e-5;
  const int cg = channels_ / groups_;
  const Eigen::Index n = x.cols();
  Feat<T> xhat(x.rows(), n);
  Vec<T> inv_std(groups_);
  for (int g = 0; g < groups_; ++g) {
    auto block = x.middleRows(g * cg, cg);
    const T mean = block.mean();
    const T var = (block.array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std(g) = inv;
    xhat.middleRows(g * cg, cg) = ((block.array() - mean) * inv).matrix();
  }
  Feat<T> y = (xhat.array().colwise() * gamma_.value.col(0).array()).matrix();
  y.colwise() += beta_.value.col(0);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Feat<T> GroupNorm<T>::backward(const Cache& cache, const Feat<T>& dy) {
  const auto& xhat = cache.normalized;
  gamma_.grad.col(0) += (dy.array() * xhat.array()).rowwise().sum().matrix();
  beta_.grad.col(0) += dy.rowwise().sum();
  Feat<T> dxhat = (dy.array().colwise() * gamma_.value.col(0).array()).matrix();
  const int cg = channels_ / groups_;
  Feat<T> dx(dy.rows(), dy.cols());
  for (int g = 0; g < groups_; ++g) {
    auto dxh = dxhat.middleRows(g * cg, cg).array();
    auto xh = xhat.middleRows(g * cg, cg).array();
    const T m1 = dxh.mean();
    const T m2 = (dxh * xh).mean();
    dx.middleRows(g * cg, cg) = ((dxh - m1 - xh * m2) * cache.inv_std(g)).matrix();
  }
  return dx;
}

template <typename T>
void GroupNorm<T>::visit(const ParamVisitor<T>& f) {
  f(gamma_);
  f(beta_);
}

template <typename T>
void GroupNorm<T>::visit(const ConstParamVisitor<T>& f) const {
  f(gamma_);
  f(beta_);
}

// ---------------------------------------------------------------- ResBlock

template <typename T>
ResBlock<T>::ResBlock(const std::string& name, int in, int out, int time_dim, int groups)
    : gn1_(name + ".gn1", in, groups),
      gn2_(name + ".gn2", out, groups),
      conv1_(name + ".conv1", in, out, 3, 1),
      conv2_(name + ".conv2", out, out, 3, 1),
      film_(name + ".film", time_dim, 2 * out, true),
      in_(in),
      out_(out),
      has_skip_(in != out) {
  if (has_skip_) skip_ = Conv2d<T>(name + ".skip", in, out, 1, 1);
}

template <typename T>
Feat<T> ResBlock<T>::forward(const Feat<T>& x, int side, const Feat<T>& temb_act, Cache* cache) const {
  Feat<T> a = gn1_.forward(x, cache ? &cache->gn1 : nullptr);
  Feat<T> h1 = conv1_.forward(silu(a), side, side, cache ? &cache->conv1 : nullptr);
  Feat<T> b = gn2_.forward(h1, cache ? &cache->gn2 : nullptr);
  const Feat<T> ss = film_.forward(temb_act);
  Feat<T> scale = ss.topRows(out_);
  Feat<T> shift = ss.bottomRows(out_);
  Feat<T> m = (b.array().colwise() * (scale.col(0).array() + T(1))).matrix();
  m.colwise() += shift.col(0);
  Feat<T> h2 = conv2_.forward(silu(m), side, side, cache ? &cache->conv2 : nullptr);
  if (has_skip_) {
    h2 += skip_.forward(x, side, side, cache ? &cache->skip : nullptr);
  } else {
    h2 += x;
  }
  if (cache) {
    cache->gn1_out = std::move(a);
    cache->gn2_out = std::move(b);
    cache->scale = std::move(scale);
    cache->shift = std::move(shift);
    cache->film_out = std::move(m);
  }
  return h2;
}

template <typename T>
Feat<T> ResBlock<T>::backward(const Cache& cache, int side, const Feat<T>& temb_act, const Feat<T>& dy,
                              Feat<T>& d_temb_act) {
  (void)side;
  Feat<T> dm_act = conv2_.backward(cache.conv2, dy);
  Feat<T> dm = silu_backward(cache.film_out, dm_act);
  Feat<T> dss(2 * out_, 1);
  dss.topRows(out_) = (dm.array() * cache.gn2_out.array()).rowwise().sum().matrix();
  dss.bottomRows(out_) = dm.rowwise().sum();
  d_temb_act += film_.backward(temb_act, dss);
  Feat<T> db = (dm.array().colwise() * (cache.scale.col(0).array() + T(1))).matrix();
  Feat<T> dh1 = gn2_.backward(cache.gn2, db);
  Feat<T> da_act = conv1_.backward(cache.conv1, dh1);
  Feat<T> da = silu_backward(cache.gn1_out, da_act);
  Feat<T> dx = gn1_.backward(cache.gn1, da);
  if (has_skip_) {
    dx += skip_.backward(cache.skip, dy);
  } else {
    dx += dy;
  }
  return dx;
}

template <typename T>
void ResBlock<T>::init(std::mt19937_64& rng, bool zero_output) {
  gn1_.init();
  gn2_.init();
  conv1_.init(rng, Init::normal);
  conv2_.init(rng, zero_output ? Init::zero : Init::normal);
  film_.init(rng, Init::normal);
  if (has_skip_) skip_.init(rng, Init::normal);
}

template <typename T>
void ResBlock<T>::visit(const ParamVisitor<T>& f) {
  gn1_.visit(f);
  conv1_.visit(f);
  film_.visit(f);
  gn2_.visit(f);
  conv2_.visit(f);
  if (has_skip_) skip_.visit(f);
}

template <typename T>
void ResBlock<T>::visit(const ConstParamVisitor<T>& f) const {
  gn1_.visit(f);
  conv1_.visit(f);
  film_.visit(f);
  gn2_.visit(f);
  conv2_.visit(f);
  if (has_skip_) skip_.visit(f);
}

// ---------------------------------------------------------------- AttentionLayer

template <typename T>
AttentionLayer<T>::AttentionLayer(const std::string& name, LayerInfo info, int channels, int context_dim,
                                  int heads, int groups)
    : info_(info),
      norm_(name + ".norm", channels, groups),
      to_q_(name + ".to_q", channels, channels, false),
      to_k_(name + ".to_k", context_dim, channels, false),
      to_v_(name + ".to_v", context_dim, channels, false),
      to_out_(name + ".to_out", channels, channels, true),
      channels_(channels),
      heads_(heads) {
  MASA_EXPECTS(heads > 0 && channels % heads == 0, "attention: channels not divisible by heads");
}

template <typename T>
Heads<T> AttentionLayer<T>::split(const Feat<T>& f) const {
  const int d = channels_ / heads_;
  Heads<T> out(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) out[static_cast<std::size_t>(h)] = f.middleRows(h * d, d).transpose();
  return out;
}

template <typename T>
Feat<T> AttentionLayer<T>::merge(const Heads<T>& hs) const {
  const int d = channels_ / heads_;
  Feat<T> f(channels_, hs.front().rows());
  for (int h = 0; h < heads_; ++h) f.middleRows(h * d, d) = hs[static_cast<std::size_t>(h)].transpose();
  return f;
}

template <typename T>
Feat<T> AttentionLayer<T>::forward(const Feat<T>& x, const Feat<T>* context, AttentionController<T>* controller,
                                   int batch_index, Cache* cache) const {
  MASA_EXPECTS((context != nullptr) == (info_.kind == LayerKind::cross_attention),
               "attention layer: context presence does not match layer kind");
  MASA_EXPECTS(cache == nullptr || controller == nullptr, "attention layer: controllers are inference-only");
  Feat<T> xn = norm_.forward(x, cache ? &cache->gn : nullptr);
  const Feat<T>& ctx = context ? *context : xn;
  Heads<T> q = split(to_q_.forward(xn));
  Heads<T> k = split(to_k_.forward(ctx));
  Heads<T> v = split(to_v_.forward(ctx));
  const AttentionSite site{&info_, batch_index};
  Heads<T> out;
  Heads<T> weights;
  if (info_.kind == LayerKind::self_attention && controller != nullptr) {
    out = controller->self_attention(site, q, k, v);
  } else {
    auto res = attention(q, k, v);
    out = std::move(res.out);
    weights = std::move(res.weights);
    if (controller != nullptr) controller->observe_cross_attention(site, q, weights);
  }
  Feat<T> merged = merge(out);
  Feat<T> y = x + to_out_.forward(merged);
  if (cache) {
    cache->normalized = std::move(xn);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(weights);
    cache->merged = std::move(merged);
  }
  return y;
}

template <typename T>
Feat<T> AttentionLayer<T>::backward(const Cache& cache, const Feat<T>& x, const Feat<T>* context,
                                    const Feat<T>& dy, Feat<T>* d_context) {
  (void)x;
  Feat<T> dmerged = to_out_.backward(cache.merged, dy);
  Heads<T> dout = split(dmerged);
  const T scale = T(1) / std::sqrt(static_cast<T>(channels_ / heads_));
  Heads<T> dq(dout.size()), dk(dout.size()), dv(dout.size());
  for (std::size_t h = 0; h < dout.size(); ++h) {
    const Mat<T>& a = cache.weights[h];
    dv[h] = a.transpose() * dout[h];
    Mat<T> da = dout[h] * cache.v[h].transpose();
    const Vec<T> rowdot = (da.array() * a.array()).rowwise().sum();
    Mat<T> ds = (a.array() * (da.array().colwise() - rowdot.array())).matrix();
    dq[h] = (ds * cache.k[h]) * scale;
    dk[h] = (ds.transpose() * cache.q[h]) * scale;
  }
  const Feat<T> dqf = merge(dq);
  const Feat<T> dkf = merge(dk);
  const Feat<T> dvf = merge(dv);
  Feat<T> dxn = to_q_.backward(cache.normalized, dqf);
  if (info_.kind == LayerKind::self_attention) {
    dxn += to_k_.backward(cache.normalized, dkf);
    dxn += to_v_.backward(cache.normalized, dvf);
  } else {
    MASA_EXPECTS(context != nullptr && d_context != nullptr, "cross attention backward needs context");
    *d_context += to_k_.backward(*context, dkf);
    *d_context += to_v_.backward(*context, dvf);
  }
  Feat<T> dx = norm_.backward(cache.gn, dxn);
  dx += dy;
  return dx;
}

template <typename T>
void AttentionLayer<T>::init(std::mt19937_64& rng, bool zero_output) {
  norm_.init();
  to_q_.init(rng, Init::normal);
  to_k_.init(rng, Init::normal);
  to_v_.init(rng, Init::normal);
  to_out_.init(rng, zero_output ? Init::zero : Init::normal);
}

template <typename T>
void AttentionLayer<T>::visit(const ParamVisitor<T>& f) {
  norm_.visit(f);
  to_q_.visit(f);
  to_k_.visit(f);
  to_v_.visit(f);
  to_out_.visit(f);
}

template <typename T>
void AttentionLayer<T>::visit(const ConstParamVisitor<T>& f) const {
  norm_.visit(f);
  to_q_.visit(f);
  to_k_.visit(f);
  to_v_.visit(f);
  to_out_.visit(f);
}

// ---------------------------------------------------------------- helpers

template <typename T>
Feat<T> timestep_features(int t, int dim) {
  MASA_EXPECTS(dim % 2 == 0 && dim > 0, "timestep feature dim must be even");
  const int half = dim / 2;
  Feat<T> f(dim, 1);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    f(i, 0) = static_cast<T>(std::sin(t * freq));
    f(half + i, 0) = static_cast<T>(std::cos(t * freq));
  }
  return f;
}

template <typename T>
Feat<T> upsample2x(const Feat<T>& x, int side) {
  const int s2 = 2 * side;
  Feat<T> y(x.rows(), static_cast<Eigen::Index>(s2) * s2);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const T* src = x.row(c).data();
    T* dst = y.row(c).data();
    for (int yy = 0; yy < s2; ++yy) {
      const T* srow = src + (yy / 2) * side;
      T* drow = dst + yy * s2;
      for (int xx = 0; xx < s2; ++xx) drow[xx] = srow[xx / 2];
    }
  }
  return y;
}

template <typename T>
Feat<T> upsample2x_backward(const Feat<T>& dy, int side) {
  const int s2 = 2 * side;
  Feat<T> dx = Feat<T>::Zero(dy.rows(), static_cast<Eigen::Index>(side) * side);
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    const T* src = dy.row(c).data();
    T* dst = dx.row(c).data();
    for (int yy = 0; yy < s2; ++yy) {
      const T* srow = src + yy * s2;
      T* drow = dst + (yy / 2) * side;
      for (int xx = 0; xx < s2; ++xx) drow[xx / 2] += srow[xx];
    }
  }
  return dx;
}

#define MASA_INSTANTIATE_NN(T)                                                  \
  template void init_normal(Param<T>&, std::mt19937_64&, double);               \
  template Feat<T> silu(const Feat<T>&);                                         \
  template Feat<T> silu_backward(const Feat<T>&, const Feat<T>&);                \
  template class Linear<T>;                                                      \
  template class Conv2d<T>;                                                      \
  template class GroupNorm<T>;                                                   \
  template class ResBlock<T>;                                                    \
  template class AttentionLayer<T>;                                              \
  template Feat<T> timestep_features(int, int);                                  \
  template Feat<T> upsample2x(const Feat<T>&, int);                              \
  template Feat<T> upsample2x_backward(const Feat<T>&, int);

MASA_INSTANTIATE_NN(float)
MASA_INSTANTIATE_NN(double)

#undef MASA_INSTANTIATE_NN

}  // namespace masa::nn
