#include "cmret/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cmret/error.hpp"

namespace cmret {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Tensor make_tensor(std::vector<int> shape, Dtype dt) {
  auto impl = std::make_shared<TensorImpl>();
  for (int d : shape) {
    if (d <= 0) fail(ErrorKind::Contract, "tensor extents must be positive");
  }
  impl->shape = std::move(shape);
  impl->dtype = dt;
  impl->values.assign(static_cast<size_t>(impl->numel()), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, Dtype dt, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), dt);
  t.impl_->requires_grad = requires_grad;
  if (requires_grad) t.impl_->ensure_grad();
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, Dtype dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  t.round_to_dtype();
  return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> vals, Dtype dt,
                           bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  if (static_cast<std::int64_t>(vals.size()) != t.numel()) {
    fail(ErrorKind::Conformance, "from_values: buffer length " + std::to_string(vals.size()) +
                                     " does not match shape " + shape_string(t.shape()));
  }
  t.impl_->values.assign(vals.begin(), vals.end());
  t.round_to_dtype();
  return t;
}

Tensor Tensor::scalar(double v, Dtype dt) { return from_values({1}, {v}, dt); }

Tensor Tensor::randn(std::vector<int> shape, std::mt19937_64& rng, double stddev, Dtype dt,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  t.round_to_dtype();
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    fail(ErrorKind::Contract, "item(): tensor has " + std::to_string(numel()) + " elements");
  }
  return impl_->values[0];
}

void Tensor::round_to_dtype() {
  if (impl_->dtype != Dtype::f32) return;
  for (auto& v : impl_->values) v = static_cast<double>(static_cast<float>(v));
}

std::string Tensor::shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void backward(const Tensor& loss) {
  if (!loss.defined()) fail(ErrorKind::Contract, "backward: undefined loss tensor");
  if (loss.numel() != 1) {
    fail(ErrorKind::Contract,
         "backward: loss must be scalar, got shape " + Tensor::shape_string(loss.shape()));
  }

  // Iterative post-order DFS; reversed it yields a valid topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (visited.insert(loss.impl()).second) stack.push_back({loss.impl(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].impl();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

}  // namespace cmret
