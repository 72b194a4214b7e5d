#include "cmret/objectives.hpp"

#include <string>

#include "cmret/error.hpp"

namespace cmret {

void validate_loss_config(const LossConfig& config) {
  if (config.temperature <= 0.0) {
    fail(ErrorKind::Config, "loss temperature must be positive, got " +
                                std::to_string(config.temperature));
  }
  if (config.lambda_s < 0.0 || config.lambda_s > 1.0) {
    fail(ErrorKind::Config, "lambda_s must lie in [0, 1], got " + std::to_string(config.lambda_s));
  }
}

BatchSimilarity make_batch_similarity(const Tensor& image_embs, const Tensor& text_embs,
                                      std::vector<int> row_ids, std::vector<int> col_ids) {
  BatchSimilarity out;
  out.sims = matmul_nt(l2_normalize_rows(image_embs), l2_normalize_rows(text_embs));
  out.row_ids = std::move(row_ids);
  out.col_ids = std::move(col_ids);
  return out;
}

Tensor tal_loss(const BatchSimilarity& sims, const LossConfig& config) {
  validate_loss_config(config);
  return cmret::tal_loss(sims.sims, sims.row_ids, sims.col_ids, config.temperature,
                         config.margin);
}

Tensor cid_loss(const Tensor& image_embs, const Tensor& text_embs, const std::vector<int>& ids,
                const Tensor& classifier) {
  Tensor ce_image = cross_entropy_mean(matmul_nt(image_embs, classifier), ids);
  Tensor ce_text = cross_entropy_mean(matmul_nt(text_embs, classifier), ids);
  return scale(add(ce_image, ce_text), 0.5);
}

Tensor pair_loss(const Tensor& image_embs, const Tensor& text_embs, const std::vector<int>& ids,
                 const Tensor& classifier, const LossConfig& config) {
  Tensor img_n = l2_normalize_rows(image_embs);
  Tensor txt_n = l2_normalize_rows(text_embs);
  BatchSimilarity sims;
  sims.sims = matmul_nt(img_n, txt_n);
  sims.row_ids = ids;
  sims.col_ids = ids;
  Tensor tal = tal_loss(sims, config);
  Tensor cid = cid_loss(img_n, txt_n, ids, classifier);
  return add(tal, cid);
}

Tensor total_loss(const Tensor& global_image, const Tensor& global_text, const Tensor& local_image,
                  const Tensor& local_text, const std::vector<int>& ids, const Tensor& classifier,
                  const LossConfig& config, bool use_local) {
  Tensor global = pair_loss(global_image, global_text, ids, classifier, config);
  if (!use_local) return global;
  Tensor local = pair_loss(local_image, local_text, ids, classifier, config);
  return add(global, local);
}

Mat fuse_similarity(const Mat& s_global, const Mat& s_local, double lambda_s) {
  if (s_global.rows != s_local.rows || s_global.cols != s_local.cols) {
    fail(ErrorKind::Conformance, "fuse_similarity: shapes disagree (" +
                                     std::to_string(s_global.rows) + "x" +
                                     std::to_string(s_global.cols) + " vs " +
                                     std::to_string(s_local.rows) + "x" +
                                     std::to_string(s_local.cols) + ")");
  }
  if (lambda_s < 0.0 || lambda_s > 1.0) {
    fail(ErrorKind::Config, "lambda_s must lie in [0, 1], got " + std::to_string(lambda_s));
  }
  Mat out(s_global.rows, s_global.cols);
  for (size_t i = 0; i < out.v.size(); ++i) {
    out.v[i] = lambda_s * s_global.v[i] + (1.0 - lambda_s) * s_local.v[i];
  }
  return out;
}

}  // namespace cmret
