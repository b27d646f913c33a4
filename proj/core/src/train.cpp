#include "masa/train.hpp"

#include <cmath>
#include <random>

#include "json.hpp"
#include "masa/errors.hpp"
#include "masa/image.hpp"
#include "masa/rng.hpp"

namespace masa {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kBatchStream = 0x7472616eull;  // per-step batch sampling
constexpr std::string_view kAdamM = "adam.m/";
constexpr std::string_view kAdamV = "adam.v/";

json train_json(const TrainConfig& c) {
  return json{{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"grad_clip", c.grad_clip},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"ema_decay", c.ema_decay},
              {"cond_dropout", c.cond_dropout},
              {"token_dropout", c.token_dropout},
              {"seed", c.seed},
              {"dataset_size", c.dataset_size},
              {"data_seed", c.data_seed}};
}

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (c.steps < 0) fail("steps must be non-negative");
  if (c.batch_size < 1) fail("batch_size must be positive");
  if (!(c.learning_rate > 0)) fail("learning_rate must be positive");
  if (!(c.grad_clip > 0)) fail("grad_clip must be positive");
  if (!(c.ema_decay >= 0 && c.ema_decay < 1)) fail("ema_decay must be in [0, 1)");
  if (!(c.cond_dropout >= 0 && c.cond_dropout <= 1)) fail("cond_dropout must be in [0, 1]");
  if (!(c.token_dropout >= 0 && c.token_dropout <= 1)) fail("token_dropout must be in [0, 1]");
  if (c.dataset_size < 1) fail("dataset_size must be positive");
}

Mat<float> row_major_to_mat(const NamedTensor& t, Eigen::Index rows, Eigen::Index cols) {
  if (t.dims.size() != 2 || t.dims[0] != rows || t.dims[1] != cols) {
    throw FormatError("optimizer tensor '" + t.name + "' has the wrong shape");
  }
  Mat<float> m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = t.values[k++];
  }
  return m;
}

NamedTensor mat_to_row_major(std::string name, const Mat<float>& m) {
  NamedTensor t{std::move(name), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.values.push_back(m(i, j));
  }
  return t;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) { return train_json(c).dump(); }

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c;
  const json defaults = train_json(c);
  for (const auto& [k, v] : j.items()) {
    if (!defaults.contains(k)) throw ConfigError("train config: unknown field '" + k + "'");
  }
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
    c.token_dropout = j.value("token_dropout", c.token_dropout);
    c.seed = j.value("seed", c.seed);
    c.dataset_size = j.value("dataset_size", c.dataset_size);
    c.data_seed = j.value("data_seed", c.data_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

PromptTokens drop_tokens(const PromptTokens& tokens, double cond_dropout, double token_dropout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PromptTokens out = tokens;
  if (u(rng) < cond_dropout) {
    std::fill(out.ids.begin(), out.ids.end(), TokenGrammar::kPad);
    return out;
  }
  for (int slot = 0; slot < TokenGrammar::kNumSlots && slot < static_cast<int>(out.ids.size()); ++slot) {
    if (u(rng) < token_dropout) out.ids[static_cast<std::size_t>(slot)] = TokenGrammar::kPad;
  }
  return out;
}

Trainer::Trainer(const DenoiserConfig& model, const ScheduleParams& schedule, const TrainConfig& config)
    : config_(config), schedule_(NoiseSchedule::make(schedule)) {
  validate(config_);
  model_ = Denoiser<float>::build(model, config_.seed);
  ema_ = model_;
  for (auto* p : model_.parameters()) {
    adam_m_.push_back(Mat<float>::Zero(p->value.rows(), p->value.cols()));
    adam_v_.push_back(Mat<float>::Zero(p->value.rows(), p->value.cols()));
  }
}

Trainer Trainer::resume(const Checkpoint& ck) {
  json meta;
  try {
    meta = json::parse(ck.meta_json);
  } catch (const json::exception&) {
    throw FormatError("checkpoint metadata is not valid JSON");
  }
  if (!meta.contains("trainer") || !meta.contains("completed_steps")) {
    throw FormatError("checkpoint holds no training state");
  }
  Trainer t(ck.denoiser, ck.schedule, train_config_from_json(meta.at("trainer").dump()));
  load_parameters(ck, t.model_);
  load_parameters(ck, t.ema_, kEmaPrefix);
  const auto params = t.model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    const auto* m = ck.find(std::string(kAdamM) + p.name);
    const auto* v = ck.find(std::string(kAdamV) + p.name);
    if (!m || !v) throw FormatError("checkpoint is missing optimizer state for '" + p.name + "'");
    t.adam_m_[i] = row_major_to_mat(*m, p.value.rows(), p.value.cols());
    t.adam_v_[i] = row_major_to_mat(*v, p.value.rows(), p.value.cols());
  }
  t.losses_ = ck.losses;
  t.step_ = meta.at("completed_steps").get<int>();
  return t;
}

double Trainer::step(const std::vector<DatasetSample>& data) {
  MASA_EXPECTS(!data.empty(), "trainer: empty dataset");
  const auto& cfg = model_.config();
  std::mt19937_64 rng(derive_seed(config_.seed, kBatchStream, static_cast<std::uint64_t>(step_)));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> pick_t(0, schedule_.num_timesteps() - 1);

  model_.zero_grad();
  const int pixels = cfg.image_size * cfg.image_size;
  const double scale = 2.0 / (static_cast<double>(config_.batch_size) * cfg.in_channels * pixels);
  double loss = 0.0;
  for (int b = 0; b < config_.batch_size; ++b) {
    const DatasetSample& s = data[pick(rng)];
    MASA_EXPECTS(s.image.width == cfg.image_size && s.image.height == cfg.image_size,
                 "trainer: dataset image size does not match the model");
    const int t = pick_t(rng);
    const Latent x0 = image_to_latent(s.image);
    const Latent eps = gaussian_tensor(x0.shape(), rng());
    const Latent xt = q_sample(x0, t, eps, schedule_);
    const PromptTokens tokens = drop_tokens(s.tokens, config_.cond_dropout, config_.token_dropout, rng());

    typename Denoiser<float>::Tape tape;
    const nn::Feat<float> pred = model_.forward_sample(to_features(xt, 0), t, tokens, &tape);
    const nn::Feat<float> target = to_features(eps, 0);
    const nn::Feat<float> diff = pred - target;
    loss += static_cast<double>(diff.template cast<double>().squaredNorm()) / (cfg.in_channels * pixels);
    model_.backward_sample(tape, (diff * static_cast<float>(scale)).eval());
  }
  loss /= config_.batch_size;
  if (!std::isfinite(loss)) {
    throw DivergenceError("training diverged at step " + std::to_string(step_) + ": loss is not finite");
  }

  const auto params = model_.parameters();
  double norm2 = 0.0;
  for (const auto* p : params) norm2 += p->grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm)) {
    throw DivergenceError("training diverged at step " + std::to_string(step_) + ": gradient is not finite");
  }
  const float clip = norm > config_.grad_clip ? static_cast<float>(config_.grad_clip / norm) : 1.0f;

  const double n = step_ + 1;
  const double bc1 = 1.0 - std::pow(config_.adam_beta1, n);
  const double bc2 = 1.0 - std::pow(config_.adam_beta2, n);
  const float lr_t = static_cast<float>(config_.learning_rate * std::sqrt(bc2) / bc1);
  const float b1 = static_cast<float>(config_.adam_beta1), b2 = static_cast<float>(config_.adam_beta2);
  const float eps_hat = static_cast<float>(config_.adam_eps * std::sqrt(bc2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Mat<float> g = params[i]->grad * clip;
    adam_m_[i] = b1 * adam_m_[i] + (1.0f - b1) * g;
    adam_v_[i] = b2 * adam_v_[i] + (1.0f - b2) * g.cwiseProduct(g);
    params[i]->value.array() -= lr_t * adam_m_[i].array() / (adam_v_[i].array().sqrt() + eps_hat);
  }

  // EMA with a short warmup so early checkpoints are not dominated by the init.
  const float decay = static_cast<float>(std::min(config_.ema_decay, (1.0 + n) / (10.0 + n)));
  const auto ema_params = ema_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ema_params[i]->value = decay * ema_params[i]->value + (1.0f - decay) * params[i]->value;
  }

  losses_.push_back({static_cast<std::uint64_t>(step_), static_cast<float>(loss)});
  ++step_;
  return loss;
}

std::string Trainer::meta_json() const {
  return json{{"trainer", train_json(config_)},
              {"completed_steps", step_},
              {"optimizer", "adam"},
              {"num_parameters", model_.num_parameters()}}
      .dump();
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.denoiser = model_.config();
  ck.schedule = schedule_.params();
  ck.meta_json = meta_json();
  store_parameters(ck, model_);
  store_parameters(ck, ema_, kEmaPrefix);
  std::size_t i = 0;
  model_.visit_parameters([&](const nn::Param<float>& p) {
    ck.tensors.push_back(mat_to_row_major(std::string(kAdamM) + p.name, adam_m_[i]));
    ck.tensors.push_back(mat_to_row_major(std::string(kAdamV) + p.name, adam_v_[i]));
    ++i;
  });
  ck.losses = losses_;
  return ck;
}

Checkpoint Trainer::inference_checkpoint() const {
  Checkpoint ck;
  ck.denoiser = ema_.config();
  ck.schedule = schedule_.params();
  ck.meta_json = json{{"trained_steps", step_}, {"trainer", train_json(config_)}, {"weights", "ema"}}.dump();
  store_parameters(ck, ema_);
  ck.losses = losses_;
  return ck;
}

}  // namespace masa
