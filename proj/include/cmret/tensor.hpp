#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cmret/aligned.hpp"

namespace cmret {

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "float32" : "float64"; }
inline Dtype promote(Dtype a, Dtype b) {
  return (a == Dtype::f64 || b == Dtype::f64) ? Dtype::f64 : Dtype::f32;
}

class Tensor;

// Storage plus tape linkage for one node of the computation graph.
// Values are held as doubles; tensors with dtype float32 keep every element
// rounded to float precision so storage semantics match the declared dtype.
struct TensorImpl {
  std::vector<int> shape;
  Dtype dtype{Dtype::f32};
  bool requires_grad{false};
  Buffer values;
  Buffer grad;  // same length as values once touched

  std::vector<Tensor> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

// Value-semantic handle to shared tensor storage (define-by-run tape).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, Dtype dt = Dtype::f32, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, Dtype dt = Dtype::f32,
                     bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> vals,
                            Dtype dt = Dtype::f32, bool requires_grad = false);
  static Tensor scalar(double v, Dtype dt = Dtype::f32);
  static Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double stddev,
                      Dtype dt = Dtype::f32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return impl_->numel(); }
  Dtype dtype() const { return impl_->dtype; }
  bool requires_grad() const { return impl_->requires_grad; }

  Buffer& values() { return impl_->values; }
  const Buffer& values() const { return impl_->values; }
  Buffer& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const Buffer& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    impl_->ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  double item() const;  // scalar tensors only

  // Rounds stored values to the declared dtype (no-op for float64).
  void round_to_dtype();

  TensorImpl* impl() const { return impl_.get(); }

  static std::string shape_string(const std::vector<int>& shape);

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_tensor(std::vector<int> shape, Dtype dt);
};

Tensor make_tensor(std::vector<int> shape, Dtype dt);

// Thread-local tape switch. Inference paths disable recording entirely.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse-mode sweep from a scalar loss. Visits each reachable node once in
// reverse topological order and accumulates into .grad of requires_grad
// tensors. Throws a contract error for non-scalar losses.
void backward(const Tensor& loss);

}  // namespace cmret
