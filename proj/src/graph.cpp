#include "cmret/graph.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cmret/error.hpp"

namespace cmret {

using nlohmann::json;

Tensor Graph::add_parameter(const std::string& name, Tensor t) {
  if (find(name)) fail(ErrorKind::Contract, "duplicate parameter name: " + name);
  t.impl()->requires_grad = true;
  t.impl()->ensure_grad();
  params_.emplace_back(name, t);
  return t;
}

Tensor* Graph::find(const std::string& name) {
  for (auto& [n, t] : params_) {
    if (n == name) return &t;
  }
  return nullptr;
}

void Graph::zero_grad() {
  for (auto& [n, t] : params_) t.zero_grad();
}

std::int64_t Graph::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& [n, t] : params_) total += t.numel();
  return total;
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_update(std::uint64_t& h, const unsigned char* data, size_t len) {
  for (size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= kFnvPrime;
  }
}

void append_le(std::vector<unsigned char>& buf, const Tensor& t) {
  if (t.dtype() == Dtype::f32) {
    for (double v : t.values()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int b = 0; b < 4; ++b) buf.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFF));
    }
  } else {
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) buf.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFF));
    }
  }
}

}  // namespace

std::uint64_t Graph::value_checksum() const {
  std::uint64_t h = kFnvOffset;
  std::vector<unsigned char> buf;
  for (const auto& [name, t] : params_) {
    fnv_update(h, reinterpret_cast<const unsigned char*>(name.data()), name.size());
    buf.clear();
    append_le(buf, t);
    fnv_update(h, buf.data(), buf.size());
  }
  return h;
}

void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& entries,
                     const CheckpointMeta& meta, const std::filesystem::path& base) {
  std::vector<unsigned char> blob;
  json manifest;
  manifest["format_version"] = meta.format_version;
  manifest["config_hash"] = meta.config_hash;
  manifest["config_json"] = meta.config_json;
  manifest["seed"] = meta.seed;
  manifest["step"] = meta.step;
  manifest["epoch"] = meta.epoch;
  for (const auto& [k, v] : meta.extra) manifest["extra"][k] = v;

  json list = json::array();
  for (const auto& [name, t] : entries) {
    const size_t offset = blob.size();
    append_le(blob, t);
    json e;
    e["name"] = name;
    e["dtype"] = dtype_name(t.dtype());
    e["shape"] = t.shape();
    e["byte_offset"] = offset;
    e["byte_length"] = blob.size() - offset;
    list.push_back(std::move(e));
  }
  manifest["entries"] = std::move(list);
  manifest["total_bytes"] = blob.size();

  {
    std::ofstream f(base.string() + ".json", std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot write checkpoint manifest " + base.string() + ".json");
    f << manifest.dump(2) << "\n";
  }
  {
    std::ofstream f(base.string() + ".bin", std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot write checkpoint blob " + base.string() + ".bin");
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& base) {
  std::ifstream mf(base.string() + ".json");
  if (!mf) fail(ErrorKind::Io, "cannot open checkpoint manifest " + base.string() + ".json");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    fail(ErrorKind::Version, "checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }

  LoadedCheckpoint out;
  if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != 1) {
    fail(ErrorKind::Version, "unsupported checkpoint format version in " + base.string());
  }
  out.meta.format_version = 1;
  out.meta.config_hash = manifest.value("config_hash", "");
  out.meta.config_json = manifest.value("config_json", "");
  out.meta.seed = manifest.value("seed", std::uint64_t{0});
  out.meta.step = manifest.value("step", std::int64_t{0});
  out.meta.epoch = manifest.value("epoch", 0);
  if (manifest.contains("extra")) {
    for (auto& [k, v] : manifest["extra"].items()) out.meta.extra[k] = v.get<std::string>();
  }

  std::ifstream bf(base.string() + ".bin", std::ios::binary | std::ios::ate);
  if (!bf) fail(ErrorKind::Io, "cannot open checkpoint blob " + base.string() + ".bin");
  const auto file_size = static_cast<std::uint64_t>(bf.tellg());
  const auto expected = manifest["total_bytes"].get<std::uint64_t>();
  if (file_size != expected) {
    fail(ErrorKind::Version, "checkpoint blob length " + std::to_string(file_size) +
                                 " does not match manifest total_bytes " + std::to_string(expected));
  }
  std::vector<unsigned char> blob(file_size);
  bf.seekg(0);
  bf.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(file_size));

  for (const auto& e : manifest["entries"]) {
    const std::string name = e["name"].get<std::string>();
    const std::string dts = e["dtype"].get<std::string>();
    Dtype dt;
    if (dts == "float32") {
      dt = Dtype::f32;
    } else if (dts == "float64") {
      dt = Dtype::f64;
    } else {
      fail(ErrorKind::Version, "unknown dtype '" + dts + "' for checkpoint entry " + name);
    }
    const std::vector<int> shape = e["shape"].get<std::vector<int>>();
    const std::uint64_t offset = e["byte_offset"].get<std::uint64_t>();
    const std::uint64_t length = e["byte_length"].get<std::uint64_t>();
    if (offset + length > blob.size()) {
      fail(ErrorKind::Version, "checkpoint entry " + name + " extends past blob end");
    }
    Tensor t = Tensor::zeros(shape, dt);
    const std::uint64_t width = dt == Dtype::f32 ? 4 : 8;
    if (length != width * static_cast<std::uint64_t>(t.numel())) {
      fail(ErrorKind::Version, "checkpoint entry " + name + " has inconsistent byte length");
    }
    auto& vals = t.values();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const unsigned char* p = blob.data() + offset + static_cast<std::uint64_t>(i) * width;
      if (dt == Dtype::f32) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, 4);
        vals[static_cast<size_t>(i)] = static_cast<double>(f);
      } else {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
        double d;
        std::memcpy(&d, &bits, 8);
        vals[static_cast<size_t>(i)] = d;
      }
    }
    out.entries.emplace_back(name, std::move(t));
  }
  return out;
}

void restore_parameters(Graph& graph, const LoadedCheckpoint& ckpt) {
  for (auto& [name, param] : graph.parameters()) {
    const Tensor* src = nullptr;
    for (const auto& [n, t] : ckpt.entries) {
      if (n == name) {
        src = &t;
        break;
      }
    }
    if (!src) fail(ErrorKind::Version, "checkpoint is missing parameter " + name);
    if (src->shape() != param.shape() || src->dtype() != param.dtype()) {
      fail(ErrorKind::Version, "checkpoint entry " + name + " has shape/dtype mismatch");
    }
    param.values() = src->values();
  }
}

namespace {

double run_scalar(const std::function<Tensor()>& f) {
  Tensor loss = f();
  if (loss.numel() != 1) fail(ErrorKind::Contract, "grad_check: f must return a scalar");
  const double v = loss.item();
  if (!std::isfinite(v)) fail(ErrorKind::Numeric, "grad_check: non-finite loss value");
  return v;
}

}  // namespace

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double h) {
  // Analytic pass.
  for (const auto& t : inputs) {
    const_cast<Tensor&>(t).impl()->requires_grad = true;
    const_cast<Tensor&>(t).zero_grad();
  }
  Tensor loss = f();
  if (loss.numel() != 1) fail(ErrorKind::Contract, "grad_check: f must return a scalar");
  if (!std::isfinite(loss.item())) fail(ErrorKind::Numeric, "grad_check: non-finite loss value");
  backward(loss);
  std::vector<Buffer> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) analytic.push_back(t.grad());

  double max_err = 0.0;
  {
    NoGradGuard ng;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
      Tensor t = inputs[ti];
      auto& vals = t.values();
      for (size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double plus = run_scalar(f);
        vals[i] = orig - h;
        const double minus = run_scalar(f);
        vals[i] = orig;
        const double numeric = (plus - minus) / (2.0 * h);
        if (!std::isfinite(numeric)) {
          fail(ErrorKind::Numeric, "grad_check: non-finite numeric gradient");
        }
        const double err =
            std::abs(analytic[ti][i] - numeric) / std::max(1.0, std::abs(numeric));
        max_err = std::max(max_err, err);
      }
    }
  }
  return max_err;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  return grad_check([&]() { return f(x); }, std::vector<Tensor>{x}, h);
}

}  // namespace cmret
