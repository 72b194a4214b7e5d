#pragma once

#include <vector>

#include "cmret/mat.hpp"
#include "cmret/ops.hpp"

namespace cmret {

struct LossConfig {
  double temperature{0.015};  // tau_temp
  double margin{0.1};
  double lambda_s{0.5};
  int identity_count{0};
};

void validate_loss_config(const LossConfig& config);

// Cosine similarities between two embedding batches plus the identity labels
// that define positives. Inputs are L2-normalized here, so entries lie in
// [-1, 1] and multiple positives per row are possible.
struct BatchSimilarity {
  Tensor sims;  // [B, B], rows = images, cols = texts
  std::vector<int> row_ids;
  std::vector<int> col_ids;
};

BatchSimilarity make_batch_similarity(const Tensor& image_embs, const Tensor& text_embs,
                                      std::vector<int> row_ids, std::vector<int> col_ids);

Tensor tal_loss(const BatchSimilarity& sims, const LossConfig& config);

// Mean cross-entropy of a shared linear classifier [C, D] over the image
// embeddings plus the same over the text embeddings, halved.
Tensor cid_loss(const Tensor& image_embs, const Tensor& text_embs, const std::vector<int>& ids,
                const Tensor& classifier);

// tal + cid for one embedding pair (embeddings are normalized internally).
Tensor pair_loss(const Tensor& image_embs, const Tensor& text_embs, const std::vector<int>& ids,
                 const Tensor& classifier, const LossConfig& config);

// L_total over the global pair plus (optionally) the guided local pair.
Tensor total_loss(const Tensor& global_image, const Tensor& global_text, const Tensor& local_image,
                  const Tensor& local_text, const std::vector<int>& ids, const Tensor& classifier,
                  const LossConfig& config, bool use_local);

// S = lambda * S_global + (1 - lambda) * S_local, elementwise.
Mat fuse_similarity(const Mat& s_global, const Mat& s_local, double lambda_s);

}  // namespace cmret
