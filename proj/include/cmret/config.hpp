#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cmret/dataset.hpp"
#include "cmret/encoders.hpp"
#include "cmret/grab.hpp"
#include "cmret/objectives.hpp"

namespace cmret {

struct OptimConfig {
  double learning_rate{1e-5};
  bool cosine_schedule{true};
  int batch_size{64};
  int epochs{60};
  double beta1{0.9};
  double beta2{0.999};
  double adam_eps{1e-8};
};

struct AtsConfig {
  double rho_start{0.65};
  double rho_end{0.5};
  // T defaults to horizon_fraction * total planned steps; a positive
  // horizon_override pins it directly (in steps or epochs per granularity).
  double horizon_fraction{0.5};
  std::int64_t horizon_override{0};
  std::string granularity{"step"};  // step | epoch
};

// Full run configuration: hashed into every checkpoint and report.
struct RunConfig {
  VisualConfig visual;
  TextConfig text;  // vocab_size is filled from the dataset manifest
  MarsConfig mars;
  AtsConfig ats;
  LossConfig loss;
  OptimConfig optim;
  ImageAugmentConfig image_aug;
  TextAugmentConfig text_aug;
  bool use_grab{true};
  std::uint64_t seed{0};
  int checkpoint_every{0};  // epochs between checkpoints; 0 = final only
  std::string train_manifest;
  std::string output_dir;
};

std::string to_json_string(const RunConfig& config);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

// FNV-1a over the canonical serialization.
std::string config_hash(const RunConfig& config);

// Rejects out-of-range hyperparameters before any compute.
void validate_run_config(const RunConfig& config);

}  // namespace cmret
