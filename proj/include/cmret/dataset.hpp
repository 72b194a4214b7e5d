#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cmret/image.hpp"

namespace cmret {

// Closed vocabulary: ids 0..3 are [PAD]/[SOS]/[EOS]/[MASK], words follow.
class Vocabulary {
 public:
  static Vocabulary grammar_vocabulary();          // fixed list from the caption grammar
  static Vocabulary from_words(std::vector<std::string> words);

  int id_of(const std::string& word) const;        // data error on unknown words
  const std::string& word_of(int id) const;
  int size() const { return static_cast<int>(words_.size()) + 4; }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;                 // id = index + 4
  std::map<std::string, int> index_;
};

struct Caption {
  std::string text;
  std::vector<int> token_ids;  // content words only; [SOS]/[EOS] added by the encoder
};

struct DatasetRecord {
  std::string image_path;  // relative to the manifest directory
  std::vector<Caption> captions;
  int identity{0};
  std::string split;       // train | val | test
  std::string domain_tag;
};

struct DatasetManifest {
  int format_version{1};
  std::uint64_t seed{0};
  std::string config_hash;
  std::string domain_tag;
  int image_h{0};
  int image_w{0};
  Vocabulary vocab;
  std::vector<DatasetRecord> records;
};

// Figure attributes: torso color, legs color, headwear, carried item, pose.
// The product of the cardinalities must be at least 4x the identity count.
struct SyntheticConfig {
  int identity_count{200};
  int images_per_identity{5};
  int captions_per_image{2};
  int image_h{64};
  int image_w{32};
  double train_fraction{0.7};
  double val_fraction{0.1};
  std::string domain_tag{"alpha"};
  int background_palette{0};     // distinct palettes build distinct domains
  double background_noise{0.05};
  double figure_scale{1.0};
  bool verbose_captions{false};
};

// Renders every identity as a layered colored-shape figure with per-image
// jitter and writes images plus a JSONL manifest under out_dir. Reproducible
// bit-exactly from (config, seed).
DatasetManifest generate_synthetic(const SyntheticConfig& config, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct Dataset {
  DatasetManifest manifest;
  std::filesystem::path root;
  std::vector<Image> images;  // aligned with manifest.records

  std::vector<int> split_indices(const std::string& split) const;
};

// Reads the manifest and decodes every referenced image. Unknown manifest
// fields are tolerated (forward compatibility) with a warning on stderr.
Dataset load_dataset(const std::filesystem::path& manifest_path);

struct ImageAugmentConfig {
  double flip_prob{0.5};
  double crop_prob{1.0};
  int crop_pad{3};
  double erase_prob{0.3};
  double erase_area{0.1};
};

struct TextAugmentConfig {
  double mask_prob{0.1};
  double replace_prob{0.05};
  double remove_prob{0.05};
};

Image augment_image(const Image& image, const ImageAugmentConfig& config, std::mt19937_64& rng);

// Per-token mask/replace/remove over content ids; never empties the caption.
std::vector<int> augment_text(const std::vector<int>& tokens, const TextAugmentConfig& config,
                              int vocab_size, std::mt19937_64& rng);

// Converts a CUHK-PEDES-style annotation file (JSON array of objects with
// {file_path|img_path, captions, id}) into a manifest with a vocabulary built
// from the captions. Images are referenced, not copied.
DatasetManifest convert_annotations(const std::filesystem::path& annotations_json,
                                    const std::string& domain_tag);

}  // namespace cmret
