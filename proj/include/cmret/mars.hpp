#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cmret/mat.hpp"

namespace cmret {

// Per-layer head-averaged post-softmax attention maps captured while
// encoding one item. layers[l] is S x S and row-stochastic.
struct AttentionStack {
  std::vector<Mat> layers;
  int layer_count() const { return static_cast<int>(layers.size()); }
};

enum class LayerGroup { Early, Middle, Late };

// Which layers feed the aggregation and how aggressively each map is pruned.
struct PruneConfig {
  double discard_ratio{0.25};
  std::vector<int> layer_set;  // indices into AttentionStack::layers, ascending
};

// Result of composing the pruned per-layer maps. anchor_index is the row used
// for saliency scoring ([CLS] for images, [EOS] for text); valid marks
// positions eligible for selection (no structural tokens, no padding).
struct AggregatedMap {
  Mat R;
  int anchor_index{0};
  std::vector<bool> valid;
};

constexpr double kneg_inf = -std::numeric_limits<double>::infinity();

// Zeroes the floor(delta * S) smallest entries of each row (ties resolved by
// ascending value, then ascending column) and keeps the rest.
Mat discard_smallest(const Mat& attention, double discard_ratio);

// Full prune step: discard, mix with the identity, halve and L1-normalize
// each row.
Mat prune_attention(const Mat& attention, double discard_ratio);

// Left-to-right product over maps ordered by increasing layer depth
// (attention-rollout convention). All maps must share S.
AggregatedMap aggregate_layers(std::span<const Mat> pruned, int anchor_index,
                               std::vector<bool> valid);

// Anchor row of R with invalid positions forced to -inf.
std::vector<double> token_scores(const AggregatedMap& map);

// k distinct indices with the largest scores; ties broken by lowest index;
// result ordered by descending score then ascending index.
std::vector<int> select_topk(std::span<const double> scores, int k);

// Greedy redundancy-penalized variant: each pick maximizes
// score - beta * max cosine similarity to already-selected token embeddings.
// tokens holds one embedding row per score position.
std::vector<int> select_topk_diverse(std::span<const double> scores, int k, const Mat& tokens,
                                     double beta);

// Heuristic selection baselines over the last layer's incoming attention:
// A = min mean, B = max mean, C = min std, D = max std. Min variants negate
// so select_topk realizes the heuristic. `present` marks rows that exist
// structurally (non-padding); `valid` masks selectable columns.
enum class SelectionStrategy { MinMean, MaxMean, MinStd, MaxStd };
SelectionStrategy strategy_from_name(const std::string& name);  // "A".."D"

std::vector<double> baseline_strategy_scores(const AttentionStack& attn,
                                             SelectionStrategy strategy,
                                             const std::vector<bool>& present,
                                             const std::vector<bool>& valid);

// Mean over valid rows of the Shannon entropy (natural log) of the row
// restricted and renormalized to valid positions.
double attention_entropy(const Mat& attention, const std::vector<bool>& valid);

// Layer thirds: Early = first ceil(L/3), Middle = next ceil(L/3), Late = rest.
std::vector<int> layer_group_indices(int layer_count, LayerGroup group);

// Parses a layer-set spec: "ml" (default Middle+Late), "e"/"m"/"l" and
// combinations ("em", "el", "ml", "eml"), "single:<index>", or a
// comma-separated index list ("0,2,5").
std::vector<int> parse_layer_set(const std::string& spec, int layer_count);

}  // namespace cmret
