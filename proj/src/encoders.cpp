#include "cmret/encoders.hpp"

#include <cmath>

#include "cmret/error.hpp"

namespace cmret {

namespace {

Tensor weight(Graph& graph, const std::string& name, int rows, int cols, std::mt19937_64& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rows));
  return graph.add_parameter(name, Tensor::randn({rows, cols}, rng, stddev));
}

Tensor bias(Graph& graph, const std::string& name, int cols) {
  return graph.add_parameter(name, Tensor::zeros({1, cols}));
}

Tensor ln_gamma(Graph& graph, const std::string& name, int dim) {
  return graph.add_parameter(name, Tensor::full({dim}, 1.0));
}

Tensor ln_beta(Graph& graph, const std::string& name, int dim) {
  return graph.add_parameter(name, Tensor::zeros({dim}));
}

// One pre-norm transformer pass over [B*S, D] activations. Captures the
// head-averaged post-softmax attention of every layer into `stacks` (one
// AttentionStack per batch item).
template <typename BlockT>
Tensor run_tower(Tensor x, const std::vector<BlockT>& blocks, const Tensor& ln_f_g,
                 const Tensor& ln_f_b, const Tensor& proj, int batch, int seq, int heads,
                 double eps, bool causal, std::vector<AttentionStack>& stacks) {
  stacks.assign(static_cast<size_t>(batch), AttentionStack{});
  for (auto& s : stacks) s.layers.reserve(blocks.size());
  std::vector<Mat> capture;
  for (const auto& blk : blocks) {
    Tensor h = layer_norm_rows(x, blk.ln1_g, blk.ln1_b, eps);
    Tensor q = add_rowwise(matmul(h, blk.wq), blk.bq);
    Tensor k = add_rowwise(matmul(h, blk.wk), blk.bk);
    Tensor v = add_rowwise(matmul(h, blk.wv), blk.bv);
    Tensor attn = multihead_self_attention(q, k, v, batch, seq, heads, causal, &capture);
    for (int b = 0; b < batch; ++b) {
      stacks[static_cast<size_t>(b)].layers.push_back(std::move(capture[static_cast<size_t>(b)]));
    }
    x = add(x, add_rowwise(matmul(attn, blk.wo), blk.bo));
    Tensor m = layer_norm_rows(x, blk.ln2_g, blk.ln2_b, eps);
    m = add_rowwise(matmul(m, blk.w1), blk.b1);
    m = gelu(m);
    m = add_rowwise(matmul(m, blk.w2), blk.b2);
    x = add(x, m);
  }
  Tensor final_tokens = layer_norm_rows(x, ln_f_g, ln_f_b, eps);
  return matmul(final_tokens, proj);
}

std::vector<int> sample_rows(int b, int seq) {
  std::vector<int> rows(static_cast<size_t>(seq));
  for (int i = 0; i < seq; ++i) rows[static_cast<size_t>(i)] = b * seq + i;
  return rows;
}

}  // namespace

ImageEncoder::ImageEncoder(const VisualConfig& config, Graph& graph, const std::string& prefix,
                           std::mt19937_64& rng)
    : cfg_(config) {
  if (cfg_.image_h % cfg_.patch != 0 || cfg_.image_w % cfg_.patch != 0) {
    fail(ErrorKind::Config, "image dimensions " + std::to_string(cfg_.image_h) + "x" +
                                std::to_string(cfg_.image_w) + " are not divisible by patch size " +
                                std::to_string(cfg_.patch));
  }
  const int d = cfg_.common.dim;
  if (d % cfg_.common.heads != 0) {
    fail(ErrorKind::Config, "embedding dim must be divisible by head count");
  }
  const int pvec = cfg_.patch * cfg_.patch * 3;
  patch_w_ = weight(graph, prefix + ".patch_w", pvec, d, rng);
  patch_b_ = bias(graph, prefix + ".patch_b", d);
  cls_ = graph.add_parameter(prefix + ".cls", Tensor::randn({1, d}, rng, 0.02));
  pos_ = graph.add_parameter(prefix + ".pos", Tensor::randn({cfg_.seq_len(), d}, rng, 0.02));
  blocks_.resize(static_cast<size_t>(cfg_.common.layers));
  for (int l = 0; l < cfg_.common.layers; ++l) {
    const std::string p = prefix + ".blk" + std::to_string(l);
    Block& blk = blocks_[static_cast<size_t>(l)];
    blk.ln1_g = ln_gamma(graph, p + ".ln1_g", d);
    blk.ln1_b = ln_beta(graph, p + ".ln1_b", d);
    blk.wq = weight(graph, p + ".wq", d, d, rng);
    blk.bq = bias(graph, p + ".bq", d);
    blk.wk = weight(graph, p + ".wk", d, d, rng);
    blk.bk = bias(graph, p + ".bk", d);
    blk.wv = weight(graph, p + ".wv", d, d, rng);
    blk.bv = bias(graph, p + ".bv", d);
    blk.wo = weight(graph, p + ".wo", d, d, rng);
    blk.bo = bias(graph, p + ".bo", d);
    blk.ln2_g = ln_gamma(graph, p + ".ln2_g", d);
    blk.ln2_b = ln_beta(graph, p + ".ln2_b", d);
    blk.w1 = weight(graph, p + ".w1", d, cfg_.common.mlp_hidden, rng);
    blk.b1 = bias(graph, p + ".b1", cfg_.common.mlp_hidden);
    blk.w2 = weight(graph, p + ".w2", cfg_.common.mlp_hidden, d, rng);
    blk.b2 = bias(graph, p + ".b2", d);
  }
  ln_f_g_ = ln_gamma(graph, prefix + ".lnf_g", d);
  ln_f_b_ = ln_beta(graph, prefix + ".lnf_b", d);
  proj_ = weight(graph, prefix + ".proj", d, d, rng);
}

Tensor ImageEncoder::patch_matrix(const Image& image) const {
  if (image.height != cfg_.image_h || image.width != cfg_.image_w) {
    fail(ErrorKind::Config, "image size " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " does not match encoder config " +
                                std::to_string(cfg_.image_h) + "x" + std::to_string(cfg_.image_w));
  }
  const int p = cfg_.patch;
  const int n = cfg_.num_patches();
  const int pvec = p * p * 3;
  std::vector<double> vals(static_cast<size_t>(n) * pvec);
  int row = 0;
  for (int gy = 0; gy < cfg_.grid_h(); ++gy) {
    for (int gx = 0; gx < cfg_.grid_w(); ++gx, ++row) {
      double* dst = vals.data() + static_cast<size_t>(row) * pvec;
      int i = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int c = 0; c < 3; ++c) dst[i++] = image.at(gy * p + py, gx * p + px, c);
        }
      }
    }
  }
  return Tensor::from_values({n, pvec}, std::move(vals));
}

VisualBatch ImageEncoder::encode(const std::vector<Image>& images,
                                 const std::vector<std::vector<bool>>* patch_keep) const {
  if (images.empty()) fail(ErrorKind::Contract, "encode: empty image batch");
  const int batch = static_cast<int>(images.size());
  const int n = cfg_.num_patches();
  const int seq = cfg_.seq_len();

  std::vector<Tensor> patch_parts;
  patch_parts.reserve(images.size());
  for (const Image& img : images) patch_parts.push_back(patch_matrix(img));
  Tensor patches = concat_rows(patch_parts);  // [B*N, P*P*3]
  Tensor embedded = add_rowwise(matmul(patches, patch_w_), patch_b_);
  if (patch_keep) {
    if (static_cast<int>(patch_keep->size()) != batch) {
      fail(ErrorKind::Conformance, "encode: patch keep-mask count does not match batch size");
    }
    const int d = cfg_.common.dim;
    Tensor mask = Tensor::zeros({batch * n, d});
    for (int b = 0; b < batch; ++b) {
      const auto& keep = (*patch_keep)[static_cast<size_t>(b)];
      if (static_cast<int>(keep.size()) != n) {
        fail(ErrorKind::Conformance, "encode: patch keep-mask length does not match patch count");
      }
      for (int p = 0; p < n; ++p) {
        if (!keep[static_cast<size_t>(p)]) continue;
        double* row = mask.values().data() + (static_cast<size_t>(b) * n + p) * d;
        std::fill(row, row + d, 1.0);
      }
    }
    embedded = mul(embedded, mask);
  }

  std::vector<Tensor> seq_parts;
  seq_parts.reserve(static_cast<size_t>(batch) * 2);
  for (int b = 0; b < batch; ++b) {
    seq_parts.push_back(cls_);
    std::vector<int> rows(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) rows[static_cast<size_t>(i)] = b * n + i;
    seq_parts.push_back(gather_rows(embedded, rows));
  }
  Tensor x = add_tiled_rows(concat_rows(seq_parts), pos_);

  std::vector<AttentionStack> stacks;
  Tensor tokens = run_tower(x, blocks_, ln_f_g_, ln_f_b_, proj_, batch, seq, cfg_.common.heads,
                            cfg_.common.ln_eps, /*causal=*/false, stacks);

  VisualBatch out;
  out.seq_len = seq;
  std::vector<int> global_rows;
  global_rows.reserve(images.size());
  for (int b = 0; b < batch; ++b) {
    VisualEncoding enc;
    enc.tokens = gather_rows(tokens, sample_rows(b, seq));
    enc.global = gather_rows(enc.tokens, {0});
    std::vector<int> local_rows(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) local_rows[static_cast<size_t>(i)] = 1 + i;
    enc.locals = gather_rows(enc.tokens, local_rows);
    enc.attn = std::move(stacks[static_cast<size_t>(b)]);
    enc.grid_h = cfg_.grid_h();
    enc.grid_w = cfg_.grid_w();
    out.items.push_back(std::move(enc));
    global_rows.push_back(b * seq);
  }
  out.globals = gather_rows(tokens, global_rows);
  return out;
}

VisualEncoding ImageEncoder::encode_one(const Image& image) const {
  return std::move(encode({image}).items[0]);
}

VisualEncoding ImageEncoder::encode_one_masked(const Image& image,
                                               const std::vector<bool>& patch_keep) const {
  std::vector<std::vector<bool>> masks{patch_keep};
  return std::move(encode({image}, &masks).items[0]);
}

TextEncoder::TextEncoder(const TextConfig& config, Graph& graph, const std::string& prefix,
                         std::mt19937_64& rng)
    : cfg_(config) {
  if (cfg_.vocab_size <= SpecialTokens::kFirstWord) {
    fail(ErrorKind::Config, "vocabulary must contain at least one word beyond the specials");
  }
  if (cfg_.max_len < 3) fail(ErrorKind::Config, "max_len must fit [SOS], one token and [EOS]");
  const int d = cfg_.common.dim;
  if (d % cfg_.common.heads != 0) {
    fail(ErrorKind::Config, "embedding dim must be divisible by head count");
  }
  tok_emb_ = graph.add_parameter(prefix + ".tok_emb",
                                 Tensor::randn({cfg_.vocab_size, d}, rng, 0.02));
  pos_ = graph.add_parameter(prefix + ".pos", Tensor::randn({cfg_.max_len, d}, rng, 0.02));
  blocks_.resize(static_cast<size_t>(cfg_.common.layers));
  for (int l = 0; l < cfg_.common.layers; ++l) {
    const std::string p = prefix + ".blk" + std::to_string(l);
    Block& blk = blocks_[static_cast<size_t>(l)];
    blk.ln1_g = ln_gamma(graph, p + ".ln1_g", d);
    blk.ln1_b = ln_beta(graph, p + ".ln1_b", d);
    blk.wq = weight(graph, p + ".wq", d, d, rng);
    blk.bq = bias(graph, p + ".bq", d);
    blk.wk = weight(graph, p + ".wk", d, d, rng);
    blk.bk = bias(graph, p + ".bk", d);
    blk.wv = weight(graph, p + ".wv", d, d, rng);
    blk.bv = bias(graph, p + ".bv", d);
    blk.wo = weight(graph, p + ".wo", d, d, rng);
    blk.bo = bias(graph, p + ".bo", d);
    blk.ln2_g = ln_gamma(graph, p + ".ln2_g", d);
    blk.ln2_b = ln_beta(graph, p + ".ln2_b", d);
    blk.w1 = weight(graph, p + ".w1", d, cfg_.common.mlp_hidden, rng);
    blk.b1 = bias(graph, p + ".b1", cfg_.common.mlp_hidden);
    blk.w2 = weight(graph, p + ".w2", cfg_.common.mlp_hidden, d, rng);
    blk.b2 = bias(graph, p + ".b2", d);
  }
  ln_f_g_ = ln_gamma(graph, prefix + ".lnf_g", d);
  ln_f_b_ = ln_beta(graph, prefix + ".lnf_b", d);
  proj_ = weight(graph, prefix + ".proj", d, d, rng);
}

TextBatch TextEncoder::encode(const std::vector<std::vector<int>>& token_ids) const {
  if (token_ids.empty()) fail(ErrorKind::Contract, "encode: empty text batch");
  const int batch = static_cast<int>(token_ids.size());
  const int seq = cfg_.seq_len();
  const int cap = cfg_.content_capacity();

  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(batch) * seq);
  std::vector<int> eos_positions(static_cast<size_t>(batch));
  std::vector<std::vector<bool>> masks(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const auto& ids = token_ids[static_cast<size_t>(b)];
    for (int id : ids) {
      if (id < 0 || id >= cfg_.vocab_size) {
        fail(ErrorKind::Data, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(cfg_.vocab_size));
      }
    }
    const int content = std::min(static_cast<int>(ids.size()), cap);
    flat.push_back(SpecialTokens::kSos);
    for (int i = 0; i < content; ++i) flat.push_back(ids[static_cast<size_t>(i)]);
    flat.push_back(SpecialTokens::kEos);
    for (int i = content + 2; i < seq; ++i) flat.push_back(SpecialTokens::kPad);

    eos_positions[static_cast<size_t>(b)] = content + 1;
    auto& mask = masks[static_cast<size_t>(b)];
    mask.assign(static_cast<size_t>(seq), false);
    for (int i = 1; i <= content; ++i) mask[static_cast<size_t>(i)] = true;
  }

  Tensor x = add_tiled_rows(embedding_lookup(tok_emb_, flat), pos_);
  std::vector<AttentionStack> stacks;
  Tensor tokens = run_tower(x, blocks_, ln_f_g_, ln_f_b_, proj_, batch, seq, cfg_.common.heads,
                            cfg_.common.ln_eps, /*causal=*/true, stacks);

  TextBatch out;
  out.seq_len = seq;
  std::vector<int> global_rows(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    TextEncoding enc;
    enc.tokens = gather_rows(tokens, sample_rows(b, seq));
    enc.eos_index = eos_positions[static_cast<size_t>(b)];
    enc.global = gather_rows(enc.tokens, {enc.eos_index});
    enc.sos_embedding = gather_rows(enc.tokens, {0});
    std::vector<int> local_rows(static_cast<size_t>(cap));
    for (int i = 0; i < cap; ++i) local_rows[static_cast<size_t>(i)] = 1 + i;
    enc.locals = gather_rows(enc.tokens, local_rows);
    enc.valid_mask = std::move(masks[static_cast<size_t>(b)]);
    enc.attn = std::move(stacks[static_cast<size_t>(b)]);
    out.items.push_back(std::move(enc));
    global_rows[static_cast<size_t>(b)] = b * seq + eos_positions[static_cast<size_t>(b)];
  }
  out.globals = gather_rows(tokens, global_rows);
  return out;
}

TextEncoding TextEncoder::encode_one(const std::vector<int>& token_ids) const {
  return std::move(encode({token_ids}).items[0]);
}

std::vector<bool> visual_valid_mask(int seq_len) {
  std::vector<bool> mask(static_cast<size_t>(seq_len), true);
  mask[0] = false;  // [CLS]
  return mask;
}

std::vector<bool> visual_present_mask(int seq_len) {
  return std::vector<bool>(static_cast<size_t>(seq_len), true);
}

std::vector<bool> text_present_mask(int seq_len, int eos_index) {
  std::vector<bool> mask(static_cast<size_t>(seq_len), false);
  for (int i = 0; i <= eos_index; ++i) mask[static_cast<size_t>(i)] = true;
  return mask;
}

}  // namespace cmret
