#pragma once

#include <span>
#include <string>
#include <vector>

#include "cmret/ats.hpp"
#include "cmret/encoders.hpp"
#include "cmret/graph.hpp"
#include "cmret/mars.hpp"
#include "cmret/objectives.hpp"

namespace cmret {

// Saliency-scoring settings: which layers feed the rollout, how hard each map
// is pruned, and the optional heuristic/diversity ablation knobs.
struct MarsConfig {
  std::string layer_spec{"ml"};
  double discard_ratio{0.25};
  std::string strategy{"mars"};  // "mars" or baseline "A".."D"
  double diversity_beta{0.0};
};

// Top-k selected local features per modality, post-selection pre-pooling.
// Indices live in attention space (0 is [CLS]/[SOS]).
struct AttentiveBank {
  Tensor image_tokens;  // [k_i, D]
  Tensor text_tokens;   // [k_t, D]
  std::vector<int> selected_image_indices;
  std::vector<int> selected_text_indices;
};

struct GuidedEmbedding {
  Tensor image;     // [1, D] (v)
  Tensor tau_text;  // [1, D] (the paper's pooled text embedding)
};

// Residual two-layer MLP; the output layer starts at zero so the adapter is
// an exact identity at initialization.
struct AdapterParams {
  Tensor w1, b1, w2, b2;
};
AdapterParams make_adapter(Graph& graph, const std::string& prefix, int dim, int hidden,
                           std::mt19937_64& rng);

// Learnable position-weight logits over per-dimension sorted values.
struct GpoParams {
  Tensor logits;  // [K_max]
};
GpoParams make_gpo(Graph& graph, const std::string& prefix, int k_max);

struct GrabParams {
  AdapterParams image_adapter, text_adapter;
  GpoParams image_gpo, text_gpo;
};
GrabParams make_grab_params(Graph& graph, int dim, int image_k_max, int text_k_max,
                            std::mt19937_64& rng);

// Aggregated saliency maps per Eq.-(1)/(2) rollout over the configured layer
// set. Valid positions exclude structural tokens and padding.
AggregatedMap build_visual_map(const VisualEncoding& visual, const MarsConfig& config);
AggregatedMap build_text_map(const TextEncoding& text, const MarsConfig& config);

// Saliency scores for selection, honoring the configured strategy.
std::vector<double> visual_saliency(const VisualEncoding& visual, const MarsConfig& config);
std::vector<double> text_saliency(const TextEncoding& text, const MarsConfig& config);

RetentionSchedule with_token_count(const RetentionSchedule& schedule, int token_count);

// Algorithm steps 1-3: budgets from the schedule at `step` (per-modality N),
// clamped to the finite score counts, then deterministic top-k selection.
AttentiveBank build_bank(const VisualEncoding& visual, const TextEncoding& text,
                         const AggregatedMap& r_image, const AggregatedMap& r_text,
                         std::int64_t step, const RetentionSchedule& schedule,
                         double diversity_beta = 0.0);

// tokens + MLP(tokens), shape preserved.
Tensor adapt(const Tensor& tokens, const AdapterParams& params);
AttentiveBank adapt(const AttentiveBank& bank, const AdapterParams& image_adapter,
                    const AdapterParams& text_adapter);

struct GrabOutput {
  Tensor image_embs;  // [B, D], unit rows
  Tensor text_embs;   // [B, D], unit rows
  std::vector<AttentiveBank> banks;
  std::vector<GuidedEmbedding> guided;
  Tensor local_loss;
};

// Full Algorithm-1 pass for a batch: MARS maps -> ATS budget -> bank ->
// residual adapter -> GPO pooling -> L_local = TAL + CID on (v, tau).
GrabOutput grab_forward(std::span<const VisualEncoding> visuals,
                        std::span<const TextEncoding> texts, const MarsConfig& mars_config,
                        std::int64_t step, const RetentionSchedule& schedule,
                        const GrabParams& params, const LossConfig& loss_config,
                        const std::vector<int>& ids, const Tensor& classifier);

}  // namespace cmret
