#include "cmret/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cmret/error.hpp"
#include "cmret/hashutil.hpp"

namespace cmret {

using nlohmann::json;

namespace {

constexpr int kSpecials = 4;  // [PAD], [SOS], [EOS], [MASK]

struct Rgb {
  double r, g, b;
};

const std::vector<std::pair<std::string, Rgb>> kColors = {
    {"red", {0.85, 0.15, 0.15}},   {"blue", {0.15, 0.25, 0.85}},
    {"green", {0.15, 0.70, 0.20}}, {"yellow", {0.90, 0.85, 0.20}},
    {"purple", {0.55, 0.20, 0.70}}, {"orange", {0.95, 0.55, 0.10}},
    {"teal", {0.10, 0.65, 0.65}},  {"pink", {0.95, 0.55, 0.75}},
};

const std::vector<std::string> kTorsoGarments = {"shirt", "jacket", "top"};
const std::vector<std::string> kLegGarments = {"pants", "jeans", "shorts"};
const std::vector<std::pair<std::string, Rgb>> kHeadwear = {
    {"cap", {0.20, 0.20, 0.20}}, {"hat", {0.60, 0.45, 0.20}}, {"hood", {0.50, 0.50, 0.55}}};
const std::vector<std::pair<std::string, Rgb>> kItems = {{"bag", {0.55, 0.35, 0.15}},
                                                         {"backpack", {0.10, 0.35, 0.15}},
                                                         {"phone", {0.05, 0.05, 0.05}},
                                                         {"umbrella", {0.40, 0.10, 0.50}}};
const std::vector<std::string> kPoses = {"standing", "walking", "sitting"};

const std::vector<Rgb> kPalettes = {
    {0.16, 0.18, 0.22},  // cool dark
    {0.72, 0.66, 0.55},  // warm light
    {0.30, 0.45, 0.30},  // greenish
};

struct Attributes {
  int torso_color;
  int legs_color;
  int headwear;  // 0 = none, 1.. -> kHeadwear
  int item;      // 0 = none, 1.. -> kItems
  int pose;
};

constexpr int kHeadwearCard = 4;
constexpr int kItemCard = 5;

int attribute_space_size() {
  return static_cast<int>(kColors.size() * kColors.size()) * kHeadwearCard * kItemCard *
         static_cast<int>(kPoses.size());
}

Attributes decode_attributes(int index) {
  Attributes a;
  a.torso_color = index % static_cast<int>(kColors.size());
  index /= static_cast<int>(kColors.size());
  a.legs_color = index % static_cast<int>(kColors.size());
  index /= static_cast<int>(kColors.size());
  a.headwear = index % kHeadwearCard;
  index /= kHeadwearCard;
  a.item = index % kItemCard;
  index /= kItemCard;
  a.pose = index % static_cast<int>(kPoses.size());
  return a;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<std::string> grammar_word_list() {
  std::set<std::string> words;
  for (const auto& [name, rgb] : kColors) words.insert(name);
  for (const auto& w : kTorsoGarments) words.insert(w);
  for (const auto& w : kLegGarments) words.insert(w);
  for (const auto& [name, rgb] : kHeadwear) words.insert(name);
  for (const auto& [name, rgb] : kItems) words.insert(name);
  for (const auto& w : kPoses) words.insert(w);
  for (const auto& w : {"a", "the", "person", "wearing", "and", "with", "in", "carrying",
                        "no", "headwear", "there", "is", "seen", "on", "street", "nothing"}) {
    words.insert(w);
  }
  return {words.begin(), words.end()};
}

// Base figure geometry in 64x32 canvas units.
struct RectSpec {
  double y, x, h, w;
};

void draw_scaled(Image& img, const RectSpec& rect, const Rgb& color, double scale, int oy, int ox) {
  fill_rect(img, oy + static_cast<int>(std::lround(rect.y * scale)),
            ox + static_cast<int>(std::lround(rect.x * scale)),
            std::max(1, static_cast<int>(std::lround(rect.h * scale))),
            std::max(1, static_cast<int>(std::lround(rect.w * scale))),
            color.r, color.g, color.b);
}

Image render_figure(const Attributes& attrs, const SyntheticConfig& cfg, std::mt19937_64& rng) {
  Image img(cfg.image_h, cfg.image_w);
  const Rgb base = kPalettes[static_cast<size_t>(cfg.background_palette) % kPalettes.size()];
  std::uniform_real_distribution<double> noise(-cfg.background_noise, cfg.background_noise);
  for (int y = 0; y < cfg.image_h; ++y) {
    for (int x = 0; x < cfg.image_w; ++x) {
      img.at(y, x, 0) = std::clamp(base.r + noise(rng), 0.0, 1.0);
      img.at(y, x, 1) = std::clamp(base.g + noise(rng), 0.0, 1.0);
      img.at(y, x, 2) = std::clamp(base.b + noise(rng), 0.0, 1.0);
    }
  }

  std::uniform_int_distribution<int> dx_dist(-2, 2);
  std::uniform_int_distribution<int> dy_dist(-1, 1);
  std::uniform_real_distribution<double> scale_jitter(-0.06, 0.06);
  const double scale =
      cfg.figure_scale * (1.0 + scale_jitter(rng)) * (cfg.image_h / 64.0);
  const int ox = dx_dist(rng) + (cfg.image_w - static_cast<int>(std::lround(32 * scale))) / 2;
  const int oy = dy_dist(rng) + (cfg.image_h - static_cast<int>(std::lround(64 * scale))) / 2;

  const Rgb skin{0.92, 0.76, 0.62};
  draw_scaled(img, {6, 12, 8, 8}, skin, scale, oy, ox);  // head
  if (attrs.headwear > 0) {
    draw_scaled(img, {3, 11, 4, 10}, kHeadwear[static_cast<size_t>(attrs.headwear - 1)].second,
                scale, oy, ox);
  }
  draw_scaled(img, {14, 9, 18, 14}, kColors[static_cast<size_t>(attrs.torso_color)].second, scale,
              oy, ox);  // torso
  const Rgb legs = kColors[static_cast<size_t>(attrs.legs_color)].second;
  switch (attrs.pose) {
    case 0:  // standing
      draw_scaled(img, {32, 10, 18, 5}, legs, scale, oy, ox);
      draw_scaled(img, {32, 17, 18, 5}, legs, scale, oy, ox);
      break;
    case 1:  // walking: spread legs
      draw_scaled(img, {32, 7, 18, 5}, legs, scale, oy, ox);
      draw_scaled(img, {32, 20, 18, 5}, legs, scale, oy, ox);
      break;
    default:  // sitting: short bent legs
      draw_scaled(img, {32, 9, 8, 14}, legs, scale, oy, ox);
      draw_scaled(img, {40, 9, 9, 5}, legs, scale, oy, ox);
      draw_scaled(img, {40, 18, 9, 5}, legs, scale, oy, ox);
      break;
  }
  if (attrs.item > 0) {
    draw_scaled(img, {22, 25, 8, 6}, kItems[static_cast<size_t>(attrs.item - 1)].second, scale, oy,
                ox);
  }
  return img;
}

std::string make_caption(const Attributes& attrs, const SyntheticConfig& cfg,
                         std::mt19937_64& rng) {
  const std::string& tc = kColors[static_cast<size_t>(attrs.torso_color)].first;
  const std::string& lc = kColors[static_cast<size_t>(attrs.legs_color)].first;
  const std::string& tg = kTorsoGarments[rng() % kTorsoGarments.size()];
  const std::string& lg = kLegGarments[rng() % kLegGarments.size()];
  const std::string& pose = kPoses[static_cast<size_t>(attrs.pose)];
  const int variant = static_cast<int>(rng() % 2);

  std::string s;
  if (variant == 0) {
    s = "a person wearing a " + tc + " " + tg + " and " + lc + " " + lg;
    if (attrs.item > 0) s += " carrying a " + kItems[static_cast<size_t>(attrs.item - 1)].first;
    if (attrs.headwear > 0) s += " with a " + kHeadwear[static_cast<size_t>(attrs.headwear - 1)].first;
  } else {
    s = "the " + pose + " person in a " + tc + " " + tg + " and " + lc + " " + lg;
    if (attrs.headwear > 0) s += " with a " + kHeadwear[static_cast<size_t>(attrs.headwear - 1)].first;
    if (attrs.item > 0) {
      s += " carrying a " + kItems[static_cast<size_t>(attrs.item - 1)].first;
    } else {
      s += " carrying nothing";
    }
  }
  if (cfg.verbose_captions) s = "there is " + s + " seen on the street";
  return s;
}

std::string config_hash_of(const SyntheticConfig& cfg) {
  json j;
  j["identity_count"] = cfg.identity_count;
  j["images_per_identity"] = cfg.images_per_identity;
  j["captions_per_image"] = cfg.captions_per_image;
  j["image_h"] = cfg.image_h;
  j["image_w"] = cfg.image_w;
  j["train_fraction"] = cfg.train_fraction;
  j["val_fraction"] = cfg.val_fraction;
  j["domain_tag"] = cfg.domain_tag;
  j["background_palette"] = cfg.background_palette;
  j["background_noise"] = cfg.background_noise;
  j["figure_scale"] = cfg.figure_scale;
  j["verbose_captions"] = cfg.verbose_captions;
  return fnv1a_hex(j.dump());
}

void warn_unknown_keys(const json& obj, const std::set<std::string>& known,
                       const std::string& where) {
  for (auto& [key, value] : obj.items()) {
    if (!known.count(key)) {
      std::cerr << "warning: ignoring unknown manifest field '" << key << "' in " << where << "\n";
    }
  }
}

std::string normalize_word(const std::string& raw) {
  std::string out;
  for (char ch : raw) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  return out;
}

}  // namespace

Vocabulary Vocabulary::grammar_vocabulary() { return from_words(grammar_word_list()); }

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  v.words_ = std::move(words);
  for (size_t i = 0; i < v.words_.size(); ++i) {
    v.index_[v.words_[i]] = static_cast<int>(i) + kSpecials;
  }
  return v;
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) {
    fail(ErrorKind::Data, "word '" + word + "' is not in the vocabulary");
  }
  return it->second;
}

const std::string& Vocabulary::word_of(int id) const {
  static const std::string specials[kSpecials] = {"[PAD]", "[SOS]", "[EOS]", "[MASK]"};
  if (id < 0 || id >= size()) fail(ErrorKind::Data, "token id " + std::to_string(id) + " out of range");
  if (id < kSpecials) return specials[id];
  return words_[static_cast<size_t>(id - kSpecials)];
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    const std::string norm = normalize_word(w);
    if (!norm.empty()) ids.push_back(id_of(norm));
  }
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word_of(ids[i]);
  }
  return out;
}

DatasetManifest generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed,
                                   const std::filesystem::path& out_dir) {
  if (cfg.identity_count < 1 || cfg.images_per_identity < 1 || cfg.captions_per_image < 1) {
    fail(ErrorKind::Config, "synthetic config requires positive counts");
  }
  if (attribute_space_size() < 4 * cfg.identity_count) {
    fail(ErrorKind::Config, "attribute space (" + std::to_string(attribute_space_size()) +
                                ") is too small for " + std::to_string(cfg.identity_count) +
                                " identities (needs 4x headroom)");
  }
  if (cfg.image_h < 32 || cfg.image_w < 16) {
    fail(ErrorKind::Config, "synthetic images must be at least 32x16");
  }

  std::filesystem::create_directories(out_dir / "images");

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.config_hash = config_hash_of(cfg);
  manifest.domain_tag = cfg.domain_tag;
  manifest.image_h = cfg.image_h;
  manifest.image_w = cfg.image_w;
  manifest.vocab = Vocabulary::grammar_vocabulary();

  // Distinct attribute combos per identity.
  std::vector<int> combo_indices(static_cast<size_t>(attribute_space_size()));
  std::iota(combo_indices.begin(), combo_indices.end(), 0);
  std::mt19937_64 combo_rng(mix_seed(seed, 0));
  std::shuffle(combo_indices.begin(), combo_indices.end(), combo_rng);

  const int train_ids = static_cast<int>(std::floor(cfg.identity_count * cfg.train_fraction));
  const int val_ids = static_cast<int>(std::floor(cfg.identity_count * cfg.val_fraction));

  for (int id = 0; id < cfg.identity_count; ++id) {
    const Attributes attrs = decode_attributes(combo_indices[static_cast<size_t>(id)]);
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(id) + 1));
    const std::string split = id < train_ids ? "train" : (id < train_ids + val_ids ? "val" : "test");
    for (int i = 0; i < cfg.images_per_identity; ++i) {
      Image img = render_figure(attrs, cfg, rng);
      char name[64];
      std::snprintf(name, sizeof(name), "images/id%05d_%02d.ppm", id, i);
      write_ppm(img, out_dir / name);

      DatasetRecord rec;
      rec.image_path = name;
      rec.identity = id;
      rec.split = split;
      rec.domain_tag = cfg.domain_tag;
      for (int c = 0; c < cfg.captions_per_image; ++c) {
        Caption cap;
        cap.text = make_caption(attrs, cfg, rng);
        cap.token_ids = manifest.vocab.tokenize(cap.text);
        rec.captions.push_back(std::move(cap));
      }
      manifest.records.push_back(std::move(rec));
    }
  }

  save_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write manifest " + path.string());
  json header;
  header["type"] = "header";
  header["format_version"] = manifest.format_version;
  header["seed"] = manifest.seed;
  header["config_hash"] = manifest.config_hash;
  header["domain_tag"] = manifest.domain_tag;
  header["image_h"] = manifest.image_h;
  header["image_w"] = manifest.image_w;
  header["vocab"] = manifest.vocab.words();
  f << header.dump() << "\n";
  for (const auto& rec : manifest.records) {
    json r;
    r["type"] = "record";
    r["image_path"] = rec.image_path;
    r["identity"] = rec.identity;
    r["split"] = rec.split;
    r["domain_tag"] = rec.domain_tag;
    json caps = json::array();
    for (const auto& cap : rec.captions) {
      caps.push_back({{"text", cap.text}, {"token_ids", cap.token_ids}});
    }
    r["captions"] = std::move(caps);
    f << r.dump() << "\n";
  }
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> idx;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].split == split) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) fail(ErrorKind::Io, "cannot open manifest " + manifest_path.string());

  Dataset ds;
  ds.root = manifest_path.parent_path();

  std::string line;
  size_t line_no = 0;
  bool have_header = false;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::Data, "manifest line " + std::to_string(line_no) + " is not valid JSON: " +
                                e.what());
    }
    const std::string type = j.value("type", "");
    if (type == "header") {
      if (j.value("format_version", -1) != 1) {
        fail(ErrorKind::Version, "unsupported manifest format version in " + manifest_path.string());
      }
      warn_unknown_keys(j, {"type", "format_version", "seed", "config_hash", "domain_tag",
                            "image_h", "image_w", "vocab"},
                        "header");
      ds.manifest.format_version = 1;
      ds.manifest.seed = j.value("seed", std::uint64_t{0});
      ds.manifest.config_hash = j.value("config_hash", "");
      ds.manifest.domain_tag = j.value("domain_tag", "");
      ds.manifest.image_h = j.value("image_h", 0);
      ds.manifest.image_w = j.value("image_w", 0);
      ds.manifest.vocab = Vocabulary::from_words(j.value("vocab", std::vector<std::string>{}));
      have_header = true;
    } else if (type == "record") {
      warn_unknown_keys(j, {"type", "image_path", "identity", "split", "domain_tag", "captions"},
                        "record " + std::to_string(line_no));
      DatasetRecord rec;
      rec.image_path = j.at("image_path").get<std::string>();
      rec.identity = j.at("identity").get<int>();
      rec.split = j.value("split", "train");
      rec.domain_tag = j.value("domain_tag", "");
      for (const auto& cap : j.at("captions")) {
        Caption c;
        c.text = cap.value("text", "");
        c.token_ids = cap.at("token_ids").get<std::vector<int>>();
        if (c.token_ids.empty()) {
          fail(ErrorKind::Data, "record " + rec.image_path + " has an empty caption");
        }
        rec.captions.push_back(std::move(c));
      }
      if (rec.captions.empty()) {
        fail(ErrorKind::Data, "record " + rec.image_path + " has no captions");
      }
      ds.manifest.records.push_back(std::move(rec));
    } else {
      std::cerr << "warning: ignoring unknown manifest line type '" << type << "'\n";
    }
  }
  if (!have_header) fail(ErrorKind::Version, "manifest has no header line: " + manifest_path.string());

  ds.images.reserve(ds.manifest.records.size());
  for (const auto& rec : ds.manifest.records) {
    const std::filesystem::path img_path = ds.root / rec.image_path;
    if (!std::filesystem::exists(img_path)) {
      fail(ErrorKind::Io, "record " + rec.image_path + ": image file missing (" +
                              img_path.string() + ")");
    }
    try {
      ds.images.push_back(read_ppm(img_path));
    } catch (const Error& e) {
      fail(e.kind(), "record " + rec.image_path + ": " + e.what());
    }
  }
  return ds;
}

Image augment_image(const Image& image, const ImageAugmentConfig& cfg, std::mt19937_64& rng) {
  Image out = image;
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  if (cfg.flip_prob > 0.0 && coin(rng) < cfg.flip_prob) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width / 2; ++x) {
        for (int c = 0; c < 3; ++c) std::swap(out.at(y, x, c), out.at(y, out.width - 1 - x, c));
      }
    }
  }

  if (cfg.crop_prob > 0.0 && cfg.crop_pad > 0 && coin(rng) < cfg.crop_prob) {
    // pad with edge replication, then crop back at a random offset
    const int pad = cfg.crop_pad;
    std::uniform_int_distribution<int> off(0, 2 * pad);
    const int oy = off(rng), ox = off(rng);
    Image cropped(out.height, out.width);
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const int sy = std::clamp(y + oy - pad, 0, out.height - 1);
        const int sx = std::clamp(x + ox - pad, 0, out.width - 1);
        for (int c = 0; c < 3; ++c) cropped.at(y, x, c) = out.at(sy, sx, c);
      }
    }
    out = std::move(cropped);
  }

  if (cfg.erase_prob > 0.0 && cfg.erase_area > 0.0 && coin(rng) < cfg.erase_prob) {
    const double target = cfg.erase_area * out.height * out.width;
    std::uniform_real_distribution<double> aspect(0.5, 2.0);
    int eh = std::max(1, static_cast<int>(std::lround(std::sqrt(target * aspect(rng)))));
    eh = std::min(eh, out.height);
    int ew = std::max(1, static_cast<int>(std::lround(target / eh)));
    ew = std::min(ew, out.width);
    std::uniform_int_distribution<int> ys(0, out.height - eh);
    std::uniform_int_distribution<int> xs(0, out.width - ew);
    fill_rect(out, ys(rng), xs(rng), eh, ew, 0.0, 0.0, 0.0);
  }
  return out;
}

std::vector<int> augment_text(const std::vector<int>& tokens, const TextAugmentConfig& cfg,
                              int vocab_size, std::mt19937_64& rng) {
  if (cfg.mask_prob + cfg.replace_prob + cfg.remove_prob <= 0.0) return tokens;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> word(kSpecials, vocab_size - 1);
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int tok : tokens) {
    const double u = coin(rng);
    if (u < cfg.remove_prob) continue;
    if (u < cfg.remove_prob + cfg.mask_prob) {
      out.push_back(3);  // [MASK]
    } else if (u < cfg.remove_prob + cfg.mask_prob + cfg.replace_prob) {
      out.push_back(word(rng));
    } else {
      out.push_back(tok);
    }
  }
  if (out.empty() && !tokens.empty()) out.push_back(tokens.front());
  return out;
}

DatasetManifest convert_annotations(const std::filesystem::path& annotations_json,
                                    const std::string& domain_tag) {
  std::ifstream f(annotations_json);
  if (!f) fail(ErrorKind::Io, "cannot open annotation file " + annotations_json.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, "annotation file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_array()) fail(ErrorKind::Data, "annotation file must be a JSON array of records");

  // First pass: vocabulary from the caption text.
  std::set<std::string> words;
  for (const auto& rec : j) {
    for (const auto& cap : rec.at("captions")) {
      std::istringstream ss(cap.get<std::string>());
      std::string w;
      while (ss >> w) {
        const std::string norm = normalize_word(w);
        if (!norm.empty()) words.insert(norm);
      }
    }
  }

  DatasetManifest manifest;
  manifest.domain_tag = domain_tag;
  manifest.vocab = Vocabulary::from_words({words.begin(), words.end()});
  manifest.config_hash = fnv1a_hex("converted:" + annotations_json.string());

  for (const auto& rec : j) {
    DatasetRecord r;
    if (rec.contains("file_path")) {
      r.image_path = rec["file_path"].get<std::string>();
    } else if (rec.contains("img_path")) {
      r.image_path = rec["img_path"].get<std::string>();
    } else {
      r.image_path = rec.at("image_path").get<std::string>();
    }
    r.identity = rec.contains("id") ? rec["id"].get<int>() : rec.at("identity").get<int>();
    r.split = rec.value("split", "train");
    r.domain_tag = domain_tag;
    for (const auto& cap : rec.at("captions")) {
      Caption c;
      c.text = cap.get<std::string>();
      c.token_ids = manifest.vocab.tokenize(c.text);
      if (c.token_ids.empty()) continue;
      r.captions.push_back(std::move(c));
    }
    if (r.captions.empty()) {
      fail(ErrorKind::Data, "annotation record " + r.image_path + " has no usable captions");
    }
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

}  // namespace cmret
