#include "cmret/grab.hpp"

#include <cmath>

#include "cmret/error.hpp"

namespace cmret {

AdapterParams make_adapter(Graph& graph, const std::string& prefix, int dim, int hidden,
                           std::mt19937_64& rng) {
  AdapterParams p;
  p.w1 = graph.add_parameter(prefix + ".w1",
                             Tensor::randn({dim, hidden}, rng, 1.0 / std::sqrt(dim)));
  p.b1 = graph.add_parameter(prefix + ".b1", Tensor::zeros({1, hidden}));
  p.w2 = graph.add_parameter(prefix + ".w2", Tensor::zeros({hidden, dim}));
  p.b2 = graph.add_parameter(prefix + ".b2", Tensor::zeros({1, dim}));
  return p;
}

GpoParams make_gpo(Graph& graph, const std::string& prefix, int k_max) {
  GpoParams p;
  p.logits = graph.add_parameter(prefix + ".logits", Tensor::zeros({k_max}));
  return p;
}

GrabParams make_grab_params(Graph& graph, int dim, int image_k_max, int text_k_max,
                            std::mt19937_64& rng) {
  GrabParams p;
  p.image_adapter = make_adapter(graph, "grab.img_adapter", dim, dim, rng);
  p.text_adapter = make_adapter(graph, "grab.txt_adapter", dim, dim, rng);
  p.image_gpo = make_gpo(graph, "grab.img_gpo", image_k_max);
  p.text_gpo = make_gpo(graph, "grab.txt_gpo", text_k_max);
  return p;
}

namespace {

AggregatedMap rollout(const AttentionStack& attn, const MarsConfig& config, int anchor,
                      std::vector<bool> valid) {
  const std::vector<int> layer_set = parse_layer_set(config.layer_spec, attn.layer_count());
  std::vector<Mat> pruned;
  pruned.reserve(layer_set.size());
  for (int l : layer_set) {
    pruned.push_back(prune_attention(attn.layers[static_cast<size_t>(l)], config.discard_ratio));
  }
  return aggregate_layers(pruned, anchor, std::move(valid));
}

std::vector<bool> text_valid(const TextEncoding& text) {
  return text.valid_mask;
}

}  // namespace

AggregatedMap build_visual_map(const VisualEncoding& visual, const MarsConfig& config) {
  const int seq = visual.attn.layers.empty() ? 0 : visual.attn.layers[0].rows;
  return rollout(visual.attn, config, /*anchor=*/0, visual_valid_mask(seq));
}

AggregatedMap build_text_map(const TextEncoding& text, const MarsConfig& config) {
  return rollout(text.attn, config, text.eos_index, text_valid(text));
}

std::vector<double> visual_saliency(const VisualEncoding& visual, const MarsConfig& config) {
  if (config.strategy == "mars") {
    return token_scores(build_visual_map(visual, config));
  }
  const int seq = visual.attn.layers[0].rows;
  return baseline_strategy_scores(visual.attn, strategy_from_name(config.strategy),
                                  visual_present_mask(seq), visual_valid_mask(seq));
}

std::vector<double> text_saliency(const TextEncoding& text, const MarsConfig& config) {
  if (config.strategy == "mars") {
    return token_scores(build_text_map(text, config));
  }
  const int seq = text.attn.layers[0].rows;
  return baseline_strategy_scores(text.attn, strategy_from_name(config.strategy),
                                  text_present_mask(seq, text.eos_index), text_valid(text));
}

RetentionSchedule with_token_count(const RetentionSchedule& schedule, int token_count) {
  RetentionSchedule s = schedule;
  s.token_count = token_count;
  return s;
}

namespace {

std::vector<int> select_for_modality(const std::vector<double>& scores, const Tensor& tokens,
                                     std::int64_t step, const RetentionSchedule& schedule,
                                     double beta) {
  int finite = 0;
  for (double v : scores) finite += std::isfinite(v) ? 1 : 0;
  const int k = clamp_budget(budget_at(schedule, step), finite);
  if (beta != 0.0) {
    Mat emb(static_cast<int>(scores.size()), tokens.dim(1));
    const auto& tv = tokens.values();
    std::copy(tv.begin(), tv.end(), emb.v.begin());
    return select_topk_diverse(scores, k, emb, beta);
  }
  return select_topk(scores, k);
}

AttentiveBank bank_from_scores(const VisualEncoding& visual, const TextEncoding& text,
                               const std::vector<double>& image_scores,
                               const std::vector<double>& text_scores, std::int64_t step,
                               const RetentionSchedule& schedule, double beta) {
  AttentiveBank bank;
  bank.selected_image_indices =
      select_for_modality(image_scores, visual.tokens, step,
                          with_token_count(schedule, visual.locals.dim(0)), beta);
  bank.selected_text_indices =
      select_for_modality(text_scores, text.tokens, step,
                          with_token_count(schedule, text.locals.dim(0)), beta);
  bank.image_tokens = gather_rows(visual.tokens, bank.selected_image_indices);
  bank.text_tokens = gather_rows(text.tokens, bank.selected_text_indices);
  return bank;
}

}  // namespace

AttentiveBank build_bank(const VisualEncoding& visual, const TextEncoding& text,
                         const AggregatedMap& r_image, const AggregatedMap& r_text,
                         std::int64_t step, const RetentionSchedule& schedule,
                         double diversity_beta) {
  return bank_from_scores(visual, text, token_scores(r_image), token_scores(r_text), step,
                          schedule, diversity_beta);
}

Tensor adapt(const Tensor& tokens, const AdapterParams& params) {
  Tensor h = add_rowwise(matmul(tokens, params.w1), params.b1);
  h = gelu(h);
  h = add_rowwise(matmul(h, params.w2), params.b2);
  return add(tokens, h);
}

AttentiveBank adapt(const AttentiveBank& bank, const AdapterParams& image_adapter,
                    const AdapterParams& text_adapter) {
  AttentiveBank out = bank;
  out.image_tokens = adapt(bank.image_tokens, image_adapter);
  out.text_tokens = adapt(bank.text_tokens, text_adapter);
  return out;
}

GrabOutput grab_forward(std::span<const VisualEncoding> visuals,
                        std::span<const TextEncoding> texts, const MarsConfig& mars_config,
                        std::int64_t step, const RetentionSchedule& schedule,
                        const GrabParams& params, const LossConfig& loss_config,
                        const std::vector<int>& ids, const Tensor& classifier) {
  if (visuals.size() != texts.size() || visuals.empty()) {
    fail(ErrorKind::Contract, "grab_forward: need equally sized, non-empty modality batches");
  }
  GrabOutput out;
  std::vector<Tensor> image_pooled, text_pooled;
  for (size_t i = 0; i < visuals.size(); ++i) {
    const VisualEncoding& vis = visuals[i];
    const TextEncoding& txt = texts[i];
    AttentiveBank bank =
        bank_from_scores(vis, txt, visual_saliency(vis, mars_config),
                         text_saliency(txt, mars_config), step, schedule,
                         mars_config.diversity_beta);
    AttentiveBank adapted = adapt(bank, params.image_adapter, params.text_adapter);
    GuidedEmbedding guided;
    guided.image = gpo_pool(adapted.image_tokens, params.image_gpo.logits);
    guided.tau_text = gpo_pool(adapted.text_tokens, params.text_gpo.logits);
    image_pooled.push_back(guided.image);
    text_pooled.push_back(guided.tau_text);
    out.guided.push_back(std::move(guided));
    out.banks.push_back(std::move(adapted));
  }
  out.image_embs = l2_normalize_rows(concat_rows(image_pooled));
  out.text_embs = l2_normalize_rows(concat_rows(text_pooled));
  out.local_loss = pair_loss(out.image_embs, out.text_embs, ids, classifier, loss_config);
  return out;
}

}  // namespace cmret
