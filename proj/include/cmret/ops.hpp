#pragma once

#include <vector>

#include "cmret/mat.hpp"
#include "cmret/tensor.hpp"

namespace cmret {

// Elementwise and matrix ops. All 2-D tensors are row-major [rows, cols].
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
// [M,K] x [N,K]^T -> [M,N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& x);

// Row-wise softmax over the last dimension of a 2-D tensor.
Tensor softmax_rows(const Tensor& x);

// y = (x - mean) / sqrt(var + eps) * gamma + beta, per row. gamma/beta: [D].
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

// table: [V,D], ids in [0,V) -> [len(ids), D]
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

// Copies the given rows of x into a new tensor; backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

// Vertical concatenation of 2-D tensors with equal column counts.
Tensor concat_rows(const std::vector<Tensor>& parts);

// x: [B*S, D], pos: [S, D]; adds pos to every block of S rows.
Tensor add_tiled_rows(const Tensor& x, const Tensor& pos);

// x: [R, D], bias: [1, D] (or [D]); adds bias to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

Tensor sum_all(const Tensor& x);

// Row-wise L2 normalization; rows with norm below eps are scaled by 1/eps.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// Fused multi-head self-attention over a batch of sequences.
// q,k,v: [B*S, D] with D = heads * head_dim. When causal, position i only
// attends to j <= i and entries above the diagonal are exactly zero.
// If capture != nullptr it receives, per batch item, the head-averaged
// post-softmax attention map (S x S) of this call.
Tensor multihead_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                int batch, int seq, int heads, bool causal,
                                std::vector<Mat>* capture = nullptr);

// Generalized pooling: per output dimension, token values are sorted
// descending and combined with softmax weights over the first k position
// logits. tokens: [k, D], logits: [K_max] with k <= K_max. Returns [1, D].
Tensor gpo_pool(const Tensor& tokens, const Tensor& logits);

// Mean cross-entropy of logits [B, C] against integer labels.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& ids);

// Soft triplet ranking loss over a similarity matrix [B, B] (rows = images,
// cols = texts). Positives are pairs with equal identity; each anchor uses
// its hardest (lowest-similarity) positive. Both directions are averaged:
//   L = 1/(2B) * sum_i tau * log(1 + sum_{j in Neg(i)} exp((s_ij - p_i + m)/tau))
// summed over image->text and text->image anchors.
Tensor tal_loss(const Tensor& sims, const std::vector<int>& row_ids,
                const std::vector<int>& col_ids, double tau, double margin);

}  // namespace cmret
