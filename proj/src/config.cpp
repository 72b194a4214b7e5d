#include "cmret/config.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "cmret/error.hpp"
#include "cmret/hashutil.hpp"

namespace cmret {

using nlohmann::json;

namespace {

json encoder_to_json(const EncoderConfig& c) {
  return {{"layers", c.layers}, {"heads", c.heads}, {"dim", c.dim},
          {"mlp_hidden", c.mlp_hidden}, {"ln_eps", c.ln_eps}};
}

EncoderConfig encoder_from_json(const json& j, EncoderConfig base) {
  base.layers = j.value("layers", base.layers);
  base.heads = j.value("heads", base.heads);
  base.dim = j.value("dim", base.dim);
  base.mlp_hidden = j.value("mlp_hidden", base.mlp_hidden);
  base.ln_eps = j.value("ln_eps", base.ln_eps);
  return base;
}

}  // namespace

std::string to_json_string(const RunConfig& c) {
  json j;
  j["visual"] = encoder_to_json(c.visual.common);
  j["visual"]["image_h"] = c.visual.image_h;
  j["visual"]["image_w"] = c.visual.image_w;
  j["visual"]["patch"] = c.visual.patch;
  j["text"] = encoder_to_json(c.text.common);
  j["text"]["vocab_size"] = c.text.vocab_size;
  j["text"]["max_len"] = c.text.max_len;
  j["mars"] = {{"layer_spec", c.mars.layer_spec},
               {"discard_ratio", c.mars.discard_ratio},
               {"strategy", c.mars.strategy},
               {"diversity_beta", c.mars.diversity_beta}};
  j["ats"] = {{"rho_start", c.ats.rho_start},
              {"rho_end", c.ats.rho_end},
              {"horizon_fraction", c.ats.horizon_fraction},
              {"horizon_override", c.ats.horizon_override},
              {"granularity", c.ats.granularity}};
  j["loss"] = {{"temperature", c.loss.temperature},
               {"margin", c.loss.margin},
               {"lambda_s", c.loss.lambda_s}};
  j["optim"] = {{"learning_rate", c.optim.learning_rate},
                {"cosine_schedule", c.optim.cosine_schedule},
                {"batch_size", c.optim.batch_size},
                {"epochs", c.optim.epochs},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"adam_eps", c.optim.adam_eps}};
  j["image_aug"] = {{"flip_prob", c.image_aug.flip_prob},
                    {"crop_prob", c.image_aug.crop_prob},
                    {"crop_pad", c.image_aug.crop_pad},
                    {"erase_prob", c.image_aug.erase_prob},
                    {"erase_area", c.image_aug.erase_area}};
  j["text_aug"] = {{"mask_prob", c.text_aug.mask_prob},
                   {"replace_prob", c.text_aug.replace_prob},
                   {"remove_prob", c.text_aug.remove_prob}};
  j["use_grab"] = c.use_grab;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["train_manifest"] = c.train_manifest;
  j["output_dir"] = c.output_dir;
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, "run config is not valid JSON: " + std::string(e.what()));
  }
  RunConfig c;
  if (j.contains("visual")) {
    c.visual.common = encoder_from_json(j["visual"], c.visual.common);
    c.visual.image_h = j["visual"].value("image_h", c.visual.image_h);
    c.visual.image_w = j["visual"].value("image_w", c.visual.image_w);
    c.visual.patch = j["visual"].value("patch", c.visual.patch);
  }
  if (j.contains("text")) {
    c.text.common = encoder_from_json(j["text"], c.text.common);
    c.text.vocab_size = j["text"].value("vocab_size", c.text.vocab_size);
    c.text.max_len = j["text"].value("max_len", c.text.max_len);
  }
  if (j.contains("mars")) {
    c.mars.layer_spec = j["mars"].value("layer_spec", c.mars.layer_spec);
    c.mars.discard_ratio = j["mars"].value("discard_ratio", c.mars.discard_ratio);
    c.mars.strategy = j["mars"].value("strategy", c.mars.strategy);
    c.mars.diversity_beta = j["mars"].value("diversity_beta", c.mars.diversity_beta);
  }
  if (j.contains("ats")) {
    c.ats.rho_start = j["ats"].value("rho_start", c.ats.rho_start);
    c.ats.rho_end = j["ats"].value("rho_end", c.ats.rho_end);
    c.ats.horizon_fraction = j["ats"].value("horizon_fraction", c.ats.horizon_fraction);
    c.ats.horizon_override = j["ats"].value("horizon_override", c.ats.horizon_override);
    c.ats.granularity = j["ats"].value("granularity", c.ats.granularity);
  }
  if (j.contains("loss")) {
    c.loss.temperature = j["loss"].value("temperature", c.loss.temperature);
    c.loss.margin = j["loss"].value("margin", c.loss.margin);
    c.loss.lambda_s = j["loss"].value("lambda_s", c.loss.lambda_s);
  }
  if (j.contains("optim")) {
    c.optim.learning_rate = j["optim"].value("learning_rate", c.optim.learning_rate);
    c.optim.cosine_schedule = j["optim"].value("cosine_schedule", c.optim.cosine_schedule);
    c.optim.batch_size = j["optim"].value("batch_size", c.optim.batch_size);
    c.optim.epochs = j["optim"].value("epochs", c.optim.epochs);
    c.optim.beta1 = j["optim"].value("beta1", c.optim.beta1);
    c.optim.beta2 = j["optim"].value("beta2", c.optim.beta2);
    c.optim.adam_eps = j["optim"].value("adam_eps", c.optim.adam_eps);
  }
  if (j.contains("image_aug")) {
    c.image_aug.flip_prob = j["image_aug"].value("flip_prob", c.image_aug.flip_prob);
    c.image_aug.crop_prob = j["image_aug"].value("crop_prob", c.image_aug.crop_prob);
    c.image_aug.crop_pad = j["image_aug"].value("crop_pad", c.image_aug.crop_pad);
    c.image_aug.erase_prob = j["image_aug"].value("erase_prob", c.image_aug.erase_prob);
    c.image_aug.erase_area = j["image_aug"].value("erase_area", c.image_aug.erase_area);
  }
  if (j.contains("text_aug")) {
    c.text_aug.mask_prob = j["text_aug"].value("mask_prob", c.text_aug.mask_prob);
    c.text_aug.replace_prob = j["text_aug"].value("replace_prob", c.text_aug.replace_prob);
    c.text_aug.remove_prob = j["text_aug"].value("remove_prob", c.text_aug.remove_prob);
  }
  c.use_grab = j.value("use_grab", c.use_grab);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.train_manifest = j.value("train_manifest", c.train_manifest);
  c.output_dir = j.value("output_dir", c.output_dir);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::Io, "cannot open run config " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return run_config_from_json(text);
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write run config " + path.string());
  f << to_json_string(config) << "\n";
}

std::string config_hash(const RunConfig& config) { return fnv1a_hex(to_json_string(config)); }

void validate_run_config(const RunConfig& c) {
  if (c.visual.image_h % c.visual.patch != 0 || c.visual.image_w % c.visual.patch != 0) {
    fail(ErrorKind::Config, "image dimensions must be divisible by the patch size");
  }
  if (c.visual.common.layers < 1 || c.text.common.layers < 1) {
    fail(ErrorKind::Config, "encoders need at least one layer");
  }
  if (c.visual.common.dim % c.visual.common.heads != 0 ||
      c.text.common.dim % c.text.common.heads != 0) {
    fail(ErrorKind::Config, "embedding dim must be divisible by the head count");
  }
  if (c.visual.common.dim != c.text.common.dim) {
    fail(ErrorKind::Config, "visual and text embedding dims must agree for the shared space");
  }
  if (c.text.max_len < 3) fail(ErrorKind::Config, "max_len must be at least 3");
  if (c.mars.discard_ratio < 0.0 || c.mars.discard_ratio > 1.0) {
    fail(ErrorKind::Config, "discard ratio must lie in [0, 1]");
  }
  if (c.mars.strategy != "mars") strategy_from_name(c.mars.strategy);
  if (!(c.ats.rho_end > 0.0 && c.ats.rho_end <= c.ats.rho_start && c.ats.rho_start <= 1.0)) {
    fail(ErrorKind::Config, "retention ratios must satisfy 0 < rho_end <= rho_start <= 1");
  }
  if (c.ats.granularity != "step" && c.ats.granularity != "epoch") {
    fail(ErrorKind::Config, "ats granularity must be 'step' or 'epoch'");
  }
  if (c.ats.horizon_fraction <= 0.0 && c.ats.horizon_override <= 0) {
    fail(ErrorKind::Config, "ats horizon must be positive");
  }
  validate_loss_config(c.loss);
  if (c.optim.learning_rate <= 0.0) fail(ErrorKind::Config, "learning rate must be positive");
  if (c.optim.batch_size < 1) fail(ErrorKind::Config, "batch size must be positive");
  if (c.optim.epochs < 1) fail(ErrorKind::Config, "epoch count must be positive");
}

}  // namespace cmret
