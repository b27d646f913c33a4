#pragma once

// Source-branch recording, the (S, L) edit gate, cross-attention mask
// extraction and mask-guided mutual self-attention.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "masa/attention.hpp"
#include "masa/controller.hpp"

namespace masa {

struct ControlConfig {
  int start_step = 4;   // S: first step index (completed iterations) under control
  int start_layer = 10;  // L: first global attention-layer index under control
  bool mask_enabled = false;
  int source_token_index = 1;  // token whose cross-attention gives M_s
  int target_token_index = 1;  // token whose cross-attention gives M
  double mask_threshold = 0.35;
  bool apply_to_unconditional = true;

  // Throws ConfigError when a field is out of range for a prompt of max_tokens.
  void validate(int max_tokens) const;
  friend bool operator==(const ControlConfig&, const ControlConfig&) = default;
};

// True when the target branch should attend to the source keys and values.
[[nodiscard]] constexpr bool edit_decision(int step_index, int layer_index, const ControlConfig& cfg) {
  return step_index >= cfg.start_step && layer_index >= cfg.start_layer;
}

template <typename T>
struct RecordedAttention {
  Heads<T> k, v;
  Heads<T> q;  // empty unless queries are recorded
};

// Self-attention keys and values of the source branch, keyed by
// (step_index, layer_index) with one entry per batch item.
template <typename T>
class AttentionRecord {
 public:
  // Throws ContractError when (step, layer, batch_index) was already recorded.
  void record(int step, int layer, int batch_index, RecordedAttention<T> entry);
  [[nodiscard]] const RecordedAttention<T>* find(int step, int layer, int batch_index) const;
  // Number of distinct (step, layer) keys.
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::vector<std::pair<int, int>> keys() const;

 private:
  std::map<std::pair<int, int>, std::map<int, RecordedAttention<T>>> entries_;
};

template <typename T>
struct CrossMap {
  LayerInfo layer;
  Heads<T> weights;  // [h][n_q, N]
};

// Cross-attention maps of the conditional batch item, per step.
template <typename T>
class CrossMapStore {
 public:
  static constexpr int kAggregateSide = 16;

  // Throws ContractError on a duplicate (step, layer) or a non-cross layer.
  void record(int step, const LayerInfo& layer, Heads<T> weights);
  [[nodiscard]] const std::vector<CrossMap<T>>& maps(int step) const;
  [[nodiscard]] bool has_step(int step) const { return steps_.count(step) != 0; }
  [[nodiscard]] std::vector<int> steps() const;
  // Mean over heads and over every cross-attention layer at 16x16: [256, N].
  // Throws ContractError when the step has no such layer.
  [[nodiscard]] Mat<T> aggregate(int step) const;
  [[nodiscard]] int aggregated_layer_count(int step) const;

 private:
  std::map<int, std::vector<CrossMap<T>>> steps_;
};

struct ForegroundMask {
  int side = 0;
  std::vector<std::uint8_t> grid;  // row-major, side * side
  bool degenerate = false;

  static ForegroundMask filled(int side, std::uint8_t value);
  [[nodiscard]] std::size_t count() const;
  friend bool operator==(const ForegroundMask&, const ForegroundMask&) = default;
};

// Min-max normalizes a square map (row-major, side*side) and thresholds at tau.
// A constant map yields a degenerate all-zero mask.
template <typename T>
ForegroundMask threshold_map(const Vec<T>& map, int side, double tau);

// Mask from the aggregated map of token_index at step_index.
template <typename T>
ForegroundMask extract_mask(const CrossMapStore<T>& store, int step_index, int token_index, double tau);

// Nearest-neighbour resampling to target_side, row-major like attention queries and keys.
std::vector<std::uint8_t> upsample_mask(const ForegroundMask& mask, int target_side);

// Counters maintained by the editing controller.
struct ControlStats {
  std::size_t substitutions = 0;        // distinct (step, layer) pairs that used source K, V
  std::size_t substituted_items = 0;    // batch-item evaluations that used source K, V
  std::size_t masked_evaluations = 0;   // evaluations that used the mask-guided combination
  std::size_t mask_fallbacks = 0;       // masked_attention calls that fell back to unmasked
  friend bool operator==(const ControlStats&, const ControlStats&) = default;
};

// Target-branch self-attention. Without the gate this is plain attention on
// the layer's own keys and values; with the gate it attends to the recorded
// source keys and values, blended by foreground/background when both masks
// are given. Throws ControlError when a needed record entry is missing.
template <typename T>
Heads<T> mutual_self_attention(const Heads<T>& q, const Heads<T>& own_k, const Heads<T>& own_v,
                               const AttentionRecord<T>& record, int step_index, const LayerInfo& layer,
                               int batch_index, const ControlConfig& cfg, const ForegroundMask* source_mask,
                               const ForegroundMask* target_mask, ControlStats* stats = nullptr);

// Records self-attention K, V (optionally Q) and conditional cross maps; never
// changes any output.
template <typename T>
class RecordingController final : public AttentionController<T> {
 public:
  struct Options {
    bool record_self = true;
    bool record_queries = false;
  };
  RecordingController(std::size_t num_layers, AttentionRecord<T>* record, CrossMapStore<T>* cross_maps,
                      Options options);
  RecordingController(std::size_t num_layers, AttentionRecord<T>* record, CrossMapStore<T>* cross_maps)
      : RecordingController(num_layers, record, cross_maps, Options{}) {}

  [[nodiscard]] std::size_t num_layers() const override { return num_layers_; }
  void begin_pass(int step_index, std::vector<bool> unconditional) override;
  Heads<T> self_attention(const AttentionSite& site, const Heads<T>& q, const Heads<T>& k,
                          const Heads<T>& v) override;
  void observe_cross_attention(const AttentionSite& site, const Heads<T>& q, const Heads<T>& weights) override;

 private:
  std::size_t num_layers_;
  AttentionRecord<T>* record_;
  CrossMapStore<T>* cross_maps_;
  Options options_;
  int step_ = -1;
  std::vector<bool> unconditional_;
};

// Mutual self-attention in the target branch.
template <typename T>
class MutualSelfAttentionController final : public AttentionController<T> {
 public:
  MutualSelfAttentionController(std::size_t num_layers, const AttentionRecord<T>* record, ControlConfig cfg);

  // Masks used by the next passes; both null disables mask guidance.
  void set_masks(std::optional<ForegroundMask> source_mask, std::optional<ForegroundMask> target_mask);
  [[nodiscard]] const ControlStats& stats() const { return stats_; }
  [[nodiscard]] const ControlConfig& config() const { return cfg_; }

  [[nodiscard]] std::size_t num_layers() const override { return num_layers_; }
  void begin_pass(int step_index, std::vector<bool> unconditional) override;
  Heads<T> self_attention(const AttentionSite& site, const Heads<T>& q, const Heads<T>& k,
                          const Heads<T>& v) override;
  void observe_cross_attention(const AttentionSite&, const Heads<T>&, const Heads<T>&) override {}

 private:
  std::size_t num_layers_;
  const AttentionRecord<T>* record_;
  ControlConfig cfg_;
  std::optional<ForegroundMask> source_mask_, target_mask_;
  ControlStats stats_;
  std::set<std::pair<int, int>> substituted_keys_;
  int step_ = -1;
  std::vector<bool> unconditional_;
};

// Writes attn/{step}/{layer}/ under root: per-token 8-bit heatmaps for cross
// layers, a query PCA image for self layers (when queries were recorded) and
// attn/manifest.json. Only the listed steps are written.
template <typename T>
void write_attention_dump(const std::filesystem::path& root, const std::vector<LayerInfo>& layers,
                          const CrossMapStore<T>& cross_maps, const AttentionRecord<T>& record,
                          const std::vector<int>& steps, const std::vector<std::string>& token_labels,
                          int batch_index);

}  // namespace masa
