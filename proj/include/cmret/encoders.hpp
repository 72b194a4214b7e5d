#pragma once

#include <string>
#include <vector>

#include "cmret/graph.hpp"
#include "cmret/image.hpp"
#include "cmret/mars.hpp"
#include "cmret/ops.hpp"

namespace cmret {

// Reserved token ids shared by the tokenizer, dataset and text encoder.
struct SpecialTokens {
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kFirstWord = 4;
};

struct EncoderConfig {
  int layers{6};
  int heads{4};
  int dim{64};
  int mlp_hidden{128};
  double ln_eps{1e-5};
};

struct VisualConfig {
  EncoderConfig common;
  int image_h{64};
  int image_w{32};
  int patch{8};

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int num_patches() const { return grid_h() * grid_w(); }
  int seq_len() const { return 1 + num_patches(); }
};

struct TextConfig {
  EncoderConfig common;
  int vocab_size{0};
  int max_len{24};  // total slots including [SOS] and [EOS]

  int content_capacity() const { return max_len - 2; }
  int seq_len() const { return max_len; }
};

// One encoded image: projected token embeddings plus the captured
// per-layer attention maps. `tokens` covers the full sequence including
// [CLS]; `locals` are the patch rows; `global` is the [CLS] row.
struct VisualEncoding {
  Tensor global;   // [1, D]
  Tensor locals;   // [N, D]
  Tensor tokens;   // [1+N, D]
  AttentionStack attn;
  int grid_h{0};
  int grid_w{0};
};

struct TextEncoding {
  Tensor global;         // [1, D], the [EOS] row
  Tensor locals;         // [L, D], content-capacity rows (padding included)
  Tensor sos_embedding;  // [1, D], retained but unused
  Tensor tokens;         // [S, D]
  AttentionStack attn;
  std::vector<bool> valid_mask;  // length S, true at real content tokens
  int eos_index{0};
};

struct VisualBatch {
  std::vector<VisualEncoding> items;
  Tensor globals;  // [B, D]
  int seq_len{0};
};

struct TextBatch {
  std::vector<TextEncoding> items;
  Tensor globals;  // [B, D]
  int seq_len{0};
};

// Patch-based image transformer with a prepended learnable [CLS] token.
// Attention is captured post-softmax and head-averaged, one map per layer.
class ImageEncoder {
 public:
  ImageEncoder(const VisualConfig& config, Graph& graph, const std::string& prefix,
               std::mt19937_64& rng);

  // patch_keep, when given, zeroes the embedded patch tokens at kept-out
  // positions before the positional embedding (token-level masking).
  VisualBatch encode(const std::vector<Image>& images,
                     const std::vector<std::vector<bool>>* patch_keep = nullptr) const;
  VisualEncoding encode_one(const Image& image) const;
  VisualEncoding encode_one_masked(const Image& image, const std::vector<bool>& patch_keep) const;

  const VisualConfig& config() const { return cfg_; }

  // Maps an image to the constant patch-vector matrix [N, P*P*3].
  Tensor patch_matrix(const Image& image) const;

 private:
  struct Block {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
  };
  VisualConfig cfg_;
  Tensor patch_w_, patch_b_, cls_, pos_;
  std::vector<Block> blocks_;
  Tensor ln_f_g_, ln_f_b_, proj_;
};

// Causal text transformer over [SOS] w1..wL [EOS] PAD... sequences.
class TextEncoder {
 public:
  TextEncoder(const TextConfig& config, Graph& graph, const std::string& prefix,
              std::mt19937_64& rng);

  // Sequences are truncated to the content capacity and padded to max_len.
  TextBatch encode(const std::vector<std::vector<int>>& token_ids) const;
  TextEncoding encode_one(const std::vector<int>& token_ids) const;

  const TextConfig& config() const { return cfg_; }

 private:
  struct Block {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
  };
  TextConfig cfg_;
  Tensor tok_emb_, pos_;
  std::vector<Block> blocks_;
  Tensor ln_f_g_, ln_f_b_, proj_;
};

// Selection masks in attention-index space.
std::vector<bool> visual_valid_mask(int seq_len);                 // patches only
std::vector<bool> visual_present_mask(int seq_len);               // every position
std::vector<bool> text_present_mask(int seq_len, int eos_index);  // [SOS]..[EOS]

}  // namespace cmret
