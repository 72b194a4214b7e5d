#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmret/tensor.hpp"

namespace cmret {

// Named parameter registry. Registration order is fixed and determines
// serialization order, so checkpoints are byte-stable for a given model.
class Graph {
 public:
  Tensor add_parameter(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }

  void zero_grad();
  std::int64_t parameter_count() const;

  // FNV-1a over the little-endian serialized values of all parameters.
  std::uint64_t value_checksum() const;

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

// Checkpoint = <base>.json manifest + <base>.bin flat little-endian blob.
struct CheckpointMeta {
  int format_version{1};
  std::string config_hash;
  std::string config_json;
  std::uint64_t seed{0};
  std::int64_t step{0};
  int epoch{0};
  std::map<std::string, std::string> extra;
};

void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& entries,
                     const CheckpointMeta& meta, const std::filesystem::path& base);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor>> entries;
};

// Validates format version and that the blob length matches the manifest.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& base);

// Copies checkpoint entries into the graph's registered parameters; every
// parameter must be present with matching dtype and shape.
void restore_parameters(Graph& graph, const LoadedCheckpoint& ckpt);

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), where the
// numeric gradient is a central finite difference of step h on each input
// coordinate. `f` must be a pure function of `inputs` (re-evaluated ~2N+1
// times). Inputs are expected to be float64 for tight tolerances.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                  double h);

// Single-tensor form: f(x) -> scalar loss.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace cmret
