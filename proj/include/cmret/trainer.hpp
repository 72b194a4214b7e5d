#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cmret/config.hpp"
#include "cmret/dataset.hpp"
#include "cmret/encoders.hpp"
#include "cmret/grab.hpp"
#include "cmret/graph.hpp"
#include "cmret/retrieval.hpp"

namespace cmret {

// A trainable/evaluable model instance: dual encoders, GRAB head, shared
// identity classifier, and the parameter registry they live in.
struct Model {
  RunConfig config;
  Graph graph;
  std::unique_ptr<ImageEncoder> image_encoder;
  std::unique_ptr<TextEncoder> text_encoder;
  GrabParams grab;
  Tensor classifier;       // [C, D]
  std::vector<int> class_ids;  // dataset identity per class index
  std::string train_domain;
  std::int64_t step{0};
  int epoch{0};

  int class_index_of(int identity) const;  // -1 when unseen
  RetentionSchedule schedule_base(std::int64_t total_steps, int steps_per_epoch) const;
};

// Builds a freshly initialized model. identity classes come from the sorted
// distinct train-split identities of the dataset the model will train on.
std::unique_ptr<Model> build_model(const RunConfig& config, int vocab_size,
                                   std::vector<int> class_ids);

struct TrainStats {
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  std::vector<std::filesystem::path> epoch_checkpoints;
  double final_loss{0.0};
};

// Invoked after each epoch with the number of completed epochs; used by
// diagnostics that probe the model mid-training without checkpointing.
using EpochCallback = std::function<void(Model&, int completed_epochs)>;

// Full training run: step-level ATS, Adam with optional cosine decay,
// per-step JSONL logging, periodic checkpointing. Deterministic for a fixed
// (config, seed). When resume_from is given, optimizer moments and step
// counters are restored and training continues from the stored epoch.
TrainStats train_model(Model& model, const Dataset& dataset,
                       const std::filesystem::path& run_dir,
                       const std::filesystem::path* resume_from = nullptr,
                       const EpochCallback* on_epoch_end = nullptr);

std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint_base);

// Rejects checkpoints whose config hash differs from the requested config.
std::unique_ptr<Model> load_model_for_resume(const std::filesystem::path& checkpoint_base,
                                             const RunConfig& expected_config);

struct EvalOptions {
  double lambda_s{0.5};
  std::string split{"test"};
  int batch_size{16};
  // When the model was trained without GRAB, local embeddings fall back to
  // the global ones so fusion degenerates to the global similarity.
};

// Encodes the split's gallery images and query captions, fuses similarities
// and reports metrics. Performs no parameter updates; the caller can verify
// via Graph::value_checksum before/after.
RetrievalResult evaluate_model(Model& model, const Dataset& dataset, const EvalOptions& options);

enum class MaskMode { Pixel, Token };

// Fig.-2-style diagnostic: keep the top ratio*N patches by last-layer [CLS]
// attention, mask the rest, and return R1(unmasked) - R1(masked) in
// percentage points on the fused similarity.
double retention_gap(Model& model, const Dataset& dataset, double retention_ratio,
                     const EvalOptions& options, MaskMode mode = MaskMode::Pixel);

// Per-layer mean attention entropy over a sample of split images.
std::vector<double> image_attention_entropy(Model& model, const Dataset& dataset,
                                            const std::string& split, int max_items);

struct OverlayResult {
  std::filesystem::path image_path;
  std::vector<int> patch_indices;          // attention positions
  std::vector<std::string> caption_tokens; // selected caption words
};

// Writes originals with selected patches outlined plus per-caption selected
// token lists. Deterministic per (checkpoint, sample).
std::vector<OverlayResult> export_overlays(Model& model, const Dataset& dataset, int count,
                                           const std::filesystem::path& out_dir);

}  // namespace cmret
