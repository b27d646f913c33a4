#include "masa/attention_control.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "masa/errors.hpp"
#include "masa/image.hpp"

namespace masa {

void ControlConfig::validate(int max_tokens) const {
  auto fail = [](const std::string& m) { throw ConfigError("control config: " + m); };
  if (start_step < 0) fail("start_step must be non-negative");
  if (start_layer < 0) fail("start_layer must be non-negative");
  if (!(mask_threshold > 0 && mask_threshold < 1)) fail("mask_threshold must be in (0, 1)");
  if (source_token_index < 0 || source_token_index >= max_tokens) fail("source_token_index out of range");
  if (target_token_index < 0 || target_token_index >= max_tokens) fail("target_token_index out of range");
}

// ------------------------------------------------------------------ record

template <typename T>
void AttentionRecord<T>::record(int step, int layer, int batch_index, RecordedAttention<T> entry) {
  auto& items = entries_[{step, layer}];
  if (!items.emplace(batch_index, std::move(entry)).second) {
    throw ContractError("attention record: (step " + std::to_string(step) + ", layer " + std::to_string(layer) +
                        ", item " + std::to_string(batch_index) + ") recorded twice");
  }
}

template <typename T>
const RecordedAttention<T>* AttentionRecord<T>::find(int step, int layer, int batch_index) const {
  const auto it = entries_.find({step, layer});
  if (it == entries_.end()) return nullptr;
  const auto jt = it->second.find(batch_index);
  return jt == it->second.end() ? nullptr : &jt->second;
}

template <typename T>
std::vector<std::pair<int, int>> AttentionRecord<T>::keys() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(entries_.size());
  for (const auto& [key, items] : entries_) out.push_back(key);
  return out;
}

template <typename T>
void CrossMapStore<T>::record(int step, const LayerInfo& layer, Heads<T> weights) {
  MASA_EXPECTS(layer.kind == LayerKind::cross_attention, "cross map store: layer is not cross-attention");
  auto& maps = steps_[step];
  for (const auto& m : maps) {
    MASA_EXPECTS(m.layer.index != layer.index, "cross map store: (step " + std::to_string(step) + ", layer " +
                                                   std::to_string(layer.index) + ") recorded twice");
  }
  maps.push_back({layer, std::move(weights)});
}

template <typename T>
const std::vector<CrossMap<T>>& CrossMapStore<T>::maps(int step) const {
  const auto it = steps_.find(step);
  MASA_EXPECTS(it != steps_.end(), "cross map store: no maps at step " + std::to_string(step));
  return it->second;
}

template <typename T>
std::vector<int> CrossMapStore<T>::steps() const {
  std::vector<int> out;
  for (const auto& [s, m] : steps_) out.push_back(s);
  return out;
}

template <typename T>
int CrossMapStore<T>::aggregated_layer_count(int step) const {
  if (!has_step(step)) return 0;
  int n = 0;
  for (const auto& m : maps(step)) n += m.layer.resolution == kAggregateSide;
  return n;
}

template <typename T>
Mat<T> CrossMapStore<T>::aggregate(int step) const {
  Mat<T> acc;
  int count = 0;
  for (const auto& m : maps(step)) {
    if (m.layer.resolution != kAggregateSide) continue;
    for (const auto& h : m.weights) {
      if (count == 0) {
        acc = h;
      } else {
        MASA_EXPECTS(h.rows() == acc.rows() && h.cols() == acc.cols(), "cross map store: map shape mismatch");
        acc += h;
      }
      ++count;
    }
  }
  MASA_EXPECTS(count > 0, "cross map store: no 16x16 cross-attention maps at step " + std::to_string(step));
  return acc / static_cast<T>(count);
}

// ------------------------------------------------------------------ masks

ForegroundMask ForegroundMask::filled(int side, std::uint8_t value) {
  return ForegroundMask{side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side, value), false};
}

std::size_t ForegroundMask::count() const {
  return static_cast<std::size_t>(std::count_if(grid.begin(), grid.end(), [](std::uint8_t v) { return v != 0; }));
}

template <typename T>
ForegroundMask threshold_map(const Vec<T>& map, int side, double tau) {
  MASA_EXPECTS(map.size() == static_cast<Eigen::Index>(side) * side, "threshold_map: map size mismatch");
  ForegroundMask m = ForegroundMask::filled(side, 0);
  const T lo = map.minCoeff(), hi = map.maxCoeff();
  if (!(hi > lo)) {
    m.degenerate = true;
    return m;
  }
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    const double normalized = static_cast<double>((map[i] - lo) / (hi - lo));
    m.grid[static_cast<std::size_t>(i)] = normalized >= tau ? 1 : 0;
  }
  return m;
}

template <typename T>
ForegroundMask extract_mask(const CrossMapStore<T>& store, int step_index, int token_index, double tau) {
  const Mat<T> agg = store.aggregate(step_index);
  MASA_EXPECTS(token_index >= 0 && token_index < agg.cols(), "extract_mask: token index out of range");
  return threshold_map<T>(agg.col(token_index), CrossMapStore<T>::kAggregateSide, tau);
}

std::vector<std::uint8_t> upsample_mask(const ForegroundMask& mask, int target_side) {
  MASA_EXPECTS(mask.side > 0 && mask.grid.size() == static_cast<std::size_t>(mask.side) * mask.side,
               "upsample_mask: malformed mask");
  MASA_EXPECTS(target_side > 0, "upsample_mask: target side must be positive");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(target_side) * target_side);
  for (int y = 0; y < target_side; ++y) {
    const int sy = y * mask.side / target_side;
    for (int x = 0; x < target_side; ++x) {
      const int sx = x * mask.side / target_side;
      out[static_cast<std::size_t>(y) * target_side + x] = mask.grid[static_cast<std::size_t>(sy) * mask.side + sx];
    }
  }
  return out;
}

// ------------------------------------------------------------------ mutual self-attention

template <typename T>
Heads<T> mutual_self_attention(const Heads<T>& q, const Heads<T>& own_k, const Heads<T>& own_v,
                               const AttentionRecord<T>& record, int step_index, const LayerInfo& layer,
                               int batch_index, const ControlConfig& cfg, const ForegroundMask* source_mask,
                               const ForegroundMask* target_mask, ControlStats* stats) {
  if (!edit_decision(step_index, layer.index, cfg)) return attention(q, own_k, own_v).out;
  const RecordedAttention<T>* src = record.find(step_index, layer.index, batch_index);
  if (src == nullptr) {
    throw ControlError("no source record for step " + std::to_string(step_index) + ", layer " +
                       std::to_string(layer.index) + ", item " + std::to_string(batch_index));
  }
  if (stats) ++stats->substituted_items;
  if (source_mask == nullptr || target_mask == nullptr) return attention(q, src->k, src->v).out;

  const Eigen::Index n_q = q.front().rows();
  const Eigen::Index n_k = src->k.front().rows();
  const int key_side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_k))));
  const int query_side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_q))));
  MASA_EXPECTS(static_cast<Eigen::Index>(key_side) * key_side == n_k &&
                   static_cast<Eigen::Index>(query_side) * query_side == n_q,
               "mutual self-attention: masks need square attention grids");

  std::vector<std::uint8_t> fg_keys = upsample_mask(*source_mask, key_side);
  std::vector<std::uint8_t> bg_keys(fg_keys.size());
  std::transform(fg_keys.begin(), fg_keys.end(), bg_keys.begin(), [](std::uint8_t v) -> std::uint8_t { return v ? 0 : 1; });
  const std::vector<std::uint8_t> m = upsample_mask(*target_mask, query_side);

  const auto fg = masked_attention(q, src->k, src->v, fg_keys);
  const auto bg = masked_attention(q, src->k, src->v, bg_keys);
  if (stats) {
    ++stats->masked_evaluations;
    stats->mask_fallbacks += static_cast<std::size_t>(fg.fallback) + static_cast<std::size_t>(bg.fallback);
  }
  Heads<T> out(q.size());
  for (std::size_t h = 0; h < q.size(); ++h) {
    out[h].resize(fg.out[h].rows(), fg.out[h].cols());
    for (Eigen::Index i = 0; i < n_q; ++i) {
      out[h].row(i) = m[static_cast<std::size_t>(i)] ? fg.out[h].row(i) : bg.out[h].row(i);
    }
  }
  return out;
}

// ------------------------------------------------------------------ controllers

template <typename T>
RecordingController<T>::RecordingController(std::size_t num_layers, AttentionRecord<T>* record,
                                            CrossMapStore<T>* cross_maps, Options options)
    : num_layers_(num_layers), record_(record), cross_maps_(cross_maps), options_(options) {
  MASA_EXPECTS(!options_.record_self || record_ != nullptr, "recording controller: missing record");
}

template <typename T>
void RecordingController<T>::begin_pass(int step_index, std::vector<bool> unconditional) {
  step_ = step_index;
  unconditional_ = std::move(unconditional);
}

template <typename T>
Heads<T> RecordingController<T>::self_attention(const AttentionSite& site, const Heads<T>& q, const Heads<T>& k,
                                                const Heads<T>& v) {
  MASA_EXPECTS(step_ >= 0, "recording controller: begin_pass was not called");
  if (options_.record_self) {
    RecordedAttention<T> entry{k, v, {}};
    if (options_.record_queries) entry.q = q;
    record_->record(step_, site.layer->index, site.batch_index, std::move(entry));
  }
  return attention(q, k, v).out;
}

template <typename T>
void RecordingController<T>::observe_cross_attention(const AttentionSite& site, const Heads<T>&,
                                                     const Heads<T>& weights) {
  if (cross_maps_ == nullptr) return;
  const auto b = static_cast<std::size_t>(site.batch_index);
  const bool uncond = b < unconditional_.size() && unconditional_[b];
  if (!uncond) cross_maps_->record(step_, *site.layer, weights);
}

template <typename T>
MutualSelfAttentionController<T>::MutualSelfAttentionController(std::size_t num_layers,
                                                                const AttentionRecord<T>* record, ControlConfig cfg)
    : num_layers_(num_layers), record_(record), cfg_(cfg) {
  MASA_EXPECTS(record_ != nullptr, "mutual self-attention controller: missing record");
}

template <typename T>
void MutualSelfAttentionController<T>::set_masks(std::optional<ForegroundMask> source_mask,
                                                 std::optional<ForegroundMask> target_mask) {
  MASA_EXPECTS(source_mask.has_value() == target_mask.has_value(),
               "mutual self-attention controller: masks must be given in pairs");
  source_mask_ = std::move(source_mask);
  target_mask_ = std::move(target_mask);
}

template <typename T>
void MutualSelfAttentionController<T>::begin_pass(int step_index, std::vector<bool> unconditional) {
  step_ = step_index;
  unconditional_ = std::move(unconditional);
}

template <typename T>
Heads<T> MutualSelfAttentionController<T>::self_attention(const AttentionSite& site, const Heads<T>& q,
                                                          const Heads<T>& k, const Heads<T>& v) {
  MASA_EXPECTS(step_ >= 0, "mutual self-attention controller: begin_pass was not called");
  const auto b = static_cast<std::size_t>(site.batch_index);
  const bool uncond = b < unconditional_.size() && unconditional_[b];
  if (uncond && !cfg_.apply_to_unconditional) return attention(q, k, v).out;
  const auto* ms = source_mask_ ? &*source_mask_ : nullptr;
  const auto* mt = target_mask_ ? &*target_mask_ : nullptr;
  Heads<T> out = mutual_self_attention(q, k, v, *record_, step_, *site.layer, site.batch_index, cfg_, ms, mt, &stats_);
  if (edit_decision(step_, site.layer->index, cfg_) && substituted_keys_.emplace(step_, site.layer->index).second) {
    ++stats_.substitutions;
  }
  return out;
}

// ------------------------------------------------------------------ dump

namespace {

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// First three principal components of the rows of x, each scaled to [0, 1].
template <typename T>
Image query_pca_image(const Heads<T>& q, int side) {
  const Eigen::Index n = q.front().rows();
  Eigen::Index width = 0;
  for (const auto& h : q) width += h.cols();
  Eigen::MatrixXd x(n, width);
  Eigen::Index col = 0;
  for (const auto& h : q) {
    x.middleCols(col, h.cols()) = h.template cast<double>();
    col += h.cols();
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Image img(side, side);
  for (int c = 0; c < 3 && c < width; ++c) {
    Eigen::VectorXd dir = eig.eigenvectors().col(width - 1 - c);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir[arg] < 0) dir = -dir;  // fix the sign so dumps are reproducible
    const Eigen::VectorXd proj = x * dir;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    for (Eigen::Index i = 0; i < n; ++i) {
      img.at(c, static_cast<int>(i / side), static_cast<int>(i % side)) =
          static_cast<float>(hi > lo ? (proj[i] - lo) / (hi - lo) : 0.0);
    }
  }
  return img;
}

std::string safe_label(std::string s) {
  for (auto& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
  }
  return s;
}

}  // namespace

template <typename T>
void write_attention_dump(const std::filesystem::path& root, const std::vector<LayerInfo>& layers,
                          const CrossMapStore<T>& cross_maps, const AttentionRecord<T>& record,
                          const std::vector<int>& steps, const std::vector<std::string>& token_labels,
                          int batch_index) {
  namespace fs = std::filesystem;
  using json = nlohmann::json;
  const fs::path base = root / "attn";
  json entries = json::array();
  for (int step : steps) {
    for (const auto& layer : layers) {
      const fs::path dir = base / std::to_string(step) / std::to_string(layer.index);
      json e{{"step", step},
             {"layer", layer.index},
             {"kind", to_string(layer.kind)},
             {"section", to_string(layer.section)},
             {"resolution", layer.resolution}};
      if (layer.kind == LayerKind::cross_attention) {
        if (!cross_maps.has_step(step)) continue;
        const CrossMap<T>* found = nullptr;
        for (const auto& m : cross_maps.maps(step)) {
          if (m.layer.index == layer.index) found = &m;
        }
        if (!found) continue;
        const auto& w = found->weights;
        Mat<T> mean = Mat<T>::Zero(w.front().rows(), w.front().cols());
        double row_err = 0.0;
        for (const auto& h : w) {
          mean += h;
          row_err = std::max(row_err, static_cast<double>((h.rowwise().sum().array() - T(1)).abs().maxCoeff()));
        }
        mean /= static_cast<T>(w.size());
        fs::create_directories(dir);
        json files = json::array();
        for (Eigen::Index tok = 0; tok < mean.cols(); ++tok) {
          const T peak = mean.col(tok).maxCoeff();
          std::vector<std::uint8_t> px(static_cast<std::size_t>(mean.rows()));
          for (Eigen::Index i = 0; i < mean.rows(); ++i) {
            px[static_cast<std::size_t>(i)] = to_u8(peak > T(0) ? static_cast<double>(mean(i, tok) / peak) : 0.0);
          }
          const std::string label = static_cast<std::size_t>(tok) < token_labels.size()
                                        ? safe_label(token_labels[static_cast<std::size_t>(tok)])
                                        : "tok";
          const std::string name = "token_" + std::to_string(tok) + "_" + label + ".png";
          write_png_gray(dir / name, layer.resolution, layer.resolution, px);
          files.push_back(name);
        }
        e["files"] = files;
        e["shape"] = {static_cast<int>(w.size()), static_cast<int>(w.front().rows()), static_cast<int>(w.front().cols())};
        e["max_row_sum_error"] = row_err;
        e["heatmap_scale"] = "head-mean weight divided by its per-token maximum";
      } else {
        const auto* rec = record.find(step, layer.index, batch_index);
        if (!rec) continue;
        e["shape"] = {static_cast<int>(rec->k.size()), static_cast<int>(rec->k.front().rows()),
                      static_cast<int>(rec->k.front().cols())};
        if (!rec->q.empty()) {
          fs::create_directories(dir);
          write_png_rgb(dir / "query_pca.png", query_pca_image(rec->q, layer.resolution));
          e["files"] = json::array({"query_pca.png"});
        } else {
          e["files"] = json::array();
        }
      }
      entries.push_back(e);
    }
  }
  fs::create_directories(base);
  json manifest{{"format", "masa-attn-dump"}, {"version", 1}, {"batch_index", batch_index},
                {"tokens", token_labels}, {"steps", steps}, {"entries", entries}};
  std::ofstream(base / "manifest.json") << manifest.dump(2) << '\n';
}

#define MASA_INSTANTIATE(T)                                                                                         \
  template class AttentionRecord<T>;                                                                                \
  template class CrossMapStore<T>;                                                                                  \
  template class RecordingController<T>;                                                                            \
  template class MutualSelfAttentionController<T>;                                                                  \
  template ForegroundMask threshold_map<T>(const Vec<T>&, int, double);                                             \
  template ForegroundMask extract_mask<T>(const CrossMapStore<T>&, int, int, double);                               \
  template Heads<T> mutual_self_attention<T>(const Heads<T>&, const Heads<T>&, const Heads<T>&,                     \
                                             const AttentionRecord<T>&, int, const LayerInfo&, int,                \
                                             const ControlConfig&, const ForegroundMask*, const ForegroundMask*,   \
                                             ControlStats*);                                                        \
  template void write_attention_dump<T>(const std::filesystem::path&, const std::vector<LayerInfo>&,               \
                                        const CrossMapStore<T>&, const AttentionRecord<T>&, const std::vector<int>&, \
                                        const std::vector<std::string>&, int);

MASA_INSTANTIATE(float)
MASA_INSTANTIATE(double)

#undef MASA_INSTANTIATE

}  // namespace masa
