#include "cmret/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "cmret/error.hpp"

namespace cmret {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using DynStride = Eigen::Stride<Eigen::Dynamic, 1>;

Eigen::Map<RowMat, 0, DynStride> bmap(double* p, int rows, int cols, int stride) {
  return Eigen::Map<RowMat, 0, DynStride>(p, rows, cols, DynStride(stride, 1));
}
Eigen::Map<const RowMat, 0, DynStride> bmap(const double* p, int rows, int cols, int stride) {
  return Eigen::Map<const RowMat, 0, DynStride>(p, rows, cols, DynStride(stride, 1));
}

Tensor op_output(std::vector<int> shape, Dtype dt, std::vector<Tensor> parents,
                 std::function<void(TensorImpl&)> bw) {
  Tensor out = make_tensor(std::move(shape), dt);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    out.impl()->requires_grad = true;
    out.impl()->parents = std::move(parents);
    out.impl()->backward_fn = std::move(bw);
  }
  return out;
}

void check_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    fail(ErrorKind::Conformance, std::string(op) + ": expected 2-D tensor, got shape " +
                                     Tensor::shape_string(t.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Conformance, std::string(op) + ": shape mismatch " +
                                     Tensor::shape_string(a.shape()) + " vs " +
                                     Tensor::shape_string(b.shape()));
  }
}


}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = op_output(a.shape(), promote(a.dtype(), b.dtype()), {a, b}, [](TensorImpl& self) {
    for (int side = 0; side < 2; ++side) {
      Tensor p = self.parents[static_cast<size_t>(side)];
      if (!p.requires_grad()) continue;
      auto& g = p.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  out.round_to_dtype();
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = op_output(a.shape(), promote(a.dtype(), b.dtype()), {a, b}, [](TensorImpl& self) {
    Tensor pa = self.parents[0], pb = self.parents[1];
    if (pa.requires_grad()) {
      auto& g = pa.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad()) {
      auto& g = pb.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  out.round_to_dtype();
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = op_output(a.shape(), promote(a.dtype(), b.dtype()), {a, b}, [](TensorImpl& self) {
    Tensor pa = self.parents[0], pb = self.parents[1];
    if (pa.requires_grad()) {
      auto& g = pa.grad();
      const auto& bv = pb.values();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (pb.requires_grad()) {
      auto& g = pb.grad();
      const auto& av = pa.values();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  out.round_to_dtype();
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = op_output(a.shape(), a.dtype(), {a}, [c](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  out.round_to_dtype();
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = op_output(a.shape(), a.dtype(), {a}, [](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  out.round_to_dtype();
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    fail(ErrorKind::Conformance, "matmul: inner dimensions disagree, " +
                                     Tensor::shape_string(a.shape()) + " x " +
                                     Tensor::shape_string(b.shape()));
  }
  Tensor out = op_output({m, n}, promote(a.dtype(), b.dtype()), {a, b}, [m, k, n](TensorImpl& self) {
    Tensor pa = self.parents[0], pb = self.parents[1];
    auto dC = bmap(self.grad.data(), m, n, n);
    if (pa.requires_grad()) {
      auto dA = bmap(pa.grad().data(), m, k, k);
      auto B = bmap(pb.values().data(), k, n, n);
      dA.noalias() += dC * B.transpose();
    }
    if (pb.requires_grad()) {
      auto dB = bmap(pb.grad().data(), k, n, n);
      auto A = bmap(pa.values().data(), m, k, k);
      dB.noalias() += A.transpose() * dC;
    }
  });
  auto A = bmap(a.values().data(), m, k, k);
  auto B = bmap(b.values().data(), k, n, n);
  auto C = bmap(out.values().data(), m, n, n);
  C.noalias() = A * B;
  out.round_to_dtype();
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (k != b.dim(1)) {
    fail(ErrorKind::Conformance, "matmul_nt: inner dimensions disagree, " +
                                     Tensor::shape_string(a.shape()) + " x " +
                                     Tensor::shape_string(b.shape()) + "^T");
  }
  Tensor out = op_output({m, n}, promote(a.dtype(), b.dtype()), {a, b}, [m, k, n](TensorImpl& self) {
    Tensor pa = self.parents[0], pb = self.parents[1];
    auto dC = bmap(self.grad.data(), m, n, n);
    if (pa.requires_grad()) {
      auto dA = bmap(pa.grad().data(), m, k, k);
      auto B = bmap(pb.values().data(), n, k, k);
      dA.noalias() += dC * B;
    }
    if (pb.requires_grad()) {
      auto dB = bmap(pb.grad().data(), n, k, k);
      auto A = bmap(pa.values().data(), m, k, k);
      dB.noalias() += dC.transpose() * A;
    }
  });
  auto A = bmap(a.values().data(), m, k, k);
  auto B = bmap(b.values().data(), n, k, k);
  auto C = bmap(out.values().data(), m, n, n);
  C.noalias() = A * B.transpose();
  out.round_to_dtype();
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = op_output(x.shape(), x.dtype(), {x}, [](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    const auto& xv = p.values();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
  const auto& xv = x.values();
  auto& ov = out.values();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < ov.size(); ++i) {
    ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  }
  out.round_to_dtype();
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  check_2d(x, "softmax_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = op_output(x.shape(), x.dtype(), {x}, [rows, cols](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (int r = 0; r < rows; ++r) {
      const double* y = self.values.data() + static_cast<size_t>(r) * cols;
      const double* dy = self.grad.data() + static_cast<size_t>(r) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += dy[c] * y[c];
      double* dx = g.data() + static_cast<size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  });
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int r = 0; r < rows; ++r) {
    const double* in = xv.data() + static_cast<size_t>(r) * cols;
    double* o = ov.data() + static_cast<size_t>(r) * cols;
    double mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (int c = 0; c < cols; ++c) o[c] /= sum;
  }
  out.round_to_dtype();
  return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_2d(x, "layer_norm_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  if (gamma.numel() != cols || beta.numel() != cols) {
    fail(ErrorKind::Conformance, "layer_norm_rows: gamma/beta length must equal row width " +
                                     std::to_string(cols));
  }
  Tensor out =
      op_output(x.shape(), promote(x.dtype(), gamma.dtype()), {x, gamma, beta},
                [rows, cols, eps](TensorImpl& self) {
                  Tensor px = self.parents[0], pg = self.parents[1], pb = self.parents[2];
                  const auto& xv = px.values();
                  const auto& gv = pg.values();
                  for (int r = 0; r < rows; ++r) {
                    const double* xr = xv.data() + static_cast<size_t>(r) * cols;
                    const double* dy = self.grad.data() + static_cast<size_t>(r) * cols;
                    double mean = 0.0;
                    for (int c = 0; c < cols; ++c) mean += xr[c];
                    mean /= cols;
                    double var = 0.0;
                    for (int c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
                    var /= cols;
                    const double inv_std = 1.0 / std::sqrt(var + eps);

                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int c = 0; c < cols; ++c) {
                      const double xhat = (xr[c] - mean) * inv_std;
                      const double dxhat = dy[c] * gv[static_cast<size_t>(c)];
                      mean_dxhat += dxhat;
                      mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= cols;
                    mean_dxhat_xhat /= cols;

                    if (px.requires_grad()) {
                      double* dx = px.grad().data() + static_cast<size_t>(r) * cols;
                      for (int c = 0; c < cols; ++c) {
                        const double xhat = (xr[c] - mean) * inv_std;
                        const double dxhat = dy[c] * gv[static_cast<size_t>(c)];
                        dx[c] += inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                      }
                    }
                    if (pg.requires_grad()) {
                      auto& dg = pg.grad();
                      for (int c = 0; c < cols; ++c) {
                        const double xhat = (xr[c] - mean) * inv_std;
                        dg[static_cast<size_t>(c)] += dy[c] * xhat;
                      }
                    }
                    if (pb.requires_grad()) {
                      auto& db = pb.grad();
                      for (int c = 0; c < cols; ++c) db[static_cast<size_t>(c)] += dy[c];
                    }
                  }
                });
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  auto& ov = out.values();
  for (int r = 0; r < rows; ++r) {
    const double* xr = xv.data() + static_cast<size_t>(r) * cols;
    double* o = ov.data() + static_cast<size_t>(r) * cols;
    double mean = 0.0;
    for (int c = 0; c < cols; ++c) mean += xr[c];
    mean /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= cols;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) {
      o[c] = (xr[c] - mean) * inv_std * gv[static_cast<size_t>(c)] + bv[static_cast<size_t>(c)];
    }
  }
  out.round_to_dtype();
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding_lookup");
  const int vocab = table.dim(0), dim = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      fail(ErrorKind::Data, "embedding_lookup: token id " + std::to_string(id) +
                                " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  const int rows = static_cast<int>(ids.size());
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  Tensor out =
      op_output({rows, dim}, table.dtype(), {table}, [ids_copy, dim](TensorImpl& self) {
        Tensor p = self.parents[0];
        if (!p.requires_grad()) return;
        auto& g = p.grad();
        for (size_t r = 0; r < ids_copy->size(); ++r) {
          double* dst = g.data() + static_cast<size_t>((*ids_copy)[r]) * dim;
          const double* src = self.grad.data() + r * dim;
          for (int c = 0; c < dim; ++c) dst[c] += src[c];
        }
      });
  const auto& tv = table.values();
  auto& ov = out.values();
  for (size_t r = 0; r < ids.size(); ++r) {
    const double* src = tv.data() + static_cast<size_t>(ids[r]) * dim;
    std::copy(src, src + dim, ov.data() + r * dim);
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  check_2d(x, "gather_rows");
  const int n = x.dim(0), dim = x.dim(1);
  for (int r : rows) {
    if (r < 0 || r >= n) {
      fail(ErrorKind::Contract,
           "gather_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(n) + ")");
    }
  }
  auto rows_copy = std::make_shared<std::vector<int>>(rows);
  Tensor out = op_output({static_cast<int>(rows.size()), dim}, x.dtype(), {x},
                         [rows_copy, dim](TensorImpl& self) {
                           Tensor p = self.parents[0];
                           if (!p.requires_grad()) return;
                           auto& g = p.grad();
                           for (size_t r = 0; r < rows_copy->size(); ++r) {
                             double* dst = g.data() + static_cast<size_t>((*rows_copy)[r]) * dim;
                             const double* src = self.grad.data() + r * dim;
                             for (int c = 0; c < dim; ++c) dst[c] += src[c];
                           }
                         });
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t r = 0; r < rows.size(); ++r) {
    const double* src = xv.data() + static_cast<size_t>(rows[r]) * dim;
    std::copy(src, src + dim, ov.data() + r * dim);
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::Contract, "concat_rows: empty input list");
  const int dim = parts[0].dim(1);
  int total = 0;
  Dtype dt = parts[0].dtype();
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.dim(1) != dim) {
      fail(ErrorKind::Conformance, "concat_rows: column mismatch " + std::to_string(p.dim(1)) +
                                       " vs " + std::to_string(dim));
    }
    total += p.dim(0);
    dt = promote(dt, p.dtype());
  }
  Tensor out = op_output({total, dim}, dt, parts, [dim](TensorImpl& self) {
    size_t offset = 0;
    for (auto& parent : self.parents) {
      const size_t len = parent.values().size();
      if (parent.requires_grad()) {
        auto& g = parent.grad();
        for (size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
  auto& ov = out.values();
  size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.values();
    std::copy(pv.begin(), pv.end(), ov.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += pv.size();
  }
  out.round_to_dtype();
  return out;
}

Tensor add_tiled_rows(const Tensor& x, const Tensor& pos) {
  check_2d(x, "add_tiled_rows");
  check_2d(pos, "add_tiled_rows");
  const int dim = x.dim(1), seq = pos.dim(0);
  if (pos.dim(1) != dim || x.dim(0) % seq != 0) {
    fail(ErrorKind::Conformance, "add_tiled_rows: incompatible shapes " +
                                     Tensor::shape_string(x.shape()) + " and " +
                                     Tensor::shape_string(pos.shape()));
  }
  const int batch = x.dim(0) / seq;
  Tensor out = op_output(x.shape(), promote(x.dtype(), pos.dtype()), {x, pos},
                         [batch, seq, dim](TensorImpl& self) {
                           Tensor px = self.parents[0], pp = self.parents[1];
                           if (px.requires_grad()) {
                             auto& g = px.grad();
                             for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (pp.requires_grad()) {
                             auto& g = pp.grad();
                             for (int b = 0; b < batch; ++b) {
                               const double* src =
                                   self.grad.data() + static_cast<size_t>(b) * seq * dim;
                               for (size_t i = 0; i < g.size(); ++i) g[i] += src[i];
                             }
                           }
                         });
  const auto& xv = x.values();
  const auto& pv = pos.values();
  auto& ov = out.values();
  for (int b = 0; b < batch; ++b) {
    const size_t base = static_cast<size_t>(b) * seq * dim;
    for (size_t i = 0; i < pv.size(); ++i) ov[base + i] = xv[base + i] + pv[i];
  }
  out.round_to_dtype();
  return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  check_2d(x, "add_rowwise");
  const int dim = x.dim(1);
  if (bias.numel() != dim) {
    fail(ErrorKind::Conformance,
         "add_rowwise: bias length " + std::to_string(bias.numel()) +
             " does not match row width " + std::to_string(dim));
  }
  const int rows = x.dim(0);
  Tensor out = op_output(x.shape(), promote(x.dtype(), bias.dtype()), {x, bias},
                         [rows, dim](TensorImpl& self) {
                           Tensor px = self.parents[0], pb = self.parents[1];
                           if (px.requires_grad()) {
                             auto& g = px.grad();
                             for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (pb.requires_grad()) {
                             auto& g = pb.grad();
                             for (int r = 0; r < rows; ++r) {
                               const double* src = self.grad.data() + static_cast<size_t>(r) * dim;
                               for (int c = 0; c < dim; ++c) g[static_cast<size_t>(c)] += src[c];
                             }
                           }
                         });
  const auto& xv = x.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (int r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * dim;
    for (int c = 0; c < dim; ++c) ov[base + c] = xv[base + c] + bv[static_cast<size_t>(c)];
  }
  out.round_to_dtype();
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = op_output({1}, x.dtype(), {x}, [](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (auto& v : g) v += self.grad[0];
  });
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.values()[0] = s;
  out.round_to_dtype();
  return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  check_2d(x, "l2_normalize_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = op_output(x.shape(), x.dtype(), {x}, [rows, cols, eps](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    const auto& xv = p.values();
    auto& g = p.grad();
    for (int r = 0; r < rows; ++r) {
      const size_t base = static_cast<size_t>(r) * cols;
      double sq = 0.0;
      for (int c = 0; c < cols; ++c) sq += xv[base + c] * xv[base + c];
      const double norm = std::sqrt(sq);
      if (norm <= eps) {
        for (int c = 0; c < cols; ++c) g[base + c] += self.grad[base + c] / eps;
        continue;
      }
      const double* y = self.values.data() + base;
      const double* dy = self.grad.data() + base;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (int c = 0; c < cols; ++c) g[base + c] += (dy[c] - y[c] * dot) / norm;
    }
  });
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * cols;
    double sq = 0.0;
    for (int c = 0; c < cols; ++c) sq += xv[base + c] * xv[base + c];
    const double norm = std::sqrt(sq);
    const double inv = 1.0 / std::max(norm, eps);
    for (int c = 0; c < cols; ++c) ov[base + c] = xv[base + c] * inv;
  }
  out.round_to_dtype();
  return out;
}

Tensor multihead_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                                int seq, int heads, bool causal, std::vector<Mat>* capture) {
  check_2d(q, "multihead_self_attention");
  check_same_shape(q, k, "multihead_self_attention");
  check_same_shape(q, v, "multihead_self_attention");
  const int dim = q.dim(1);
  if (q.dim(0) != batch * seq || dim % heads != 0) {
    fail(ErrorKind::Conformance, "multihead_self_attention: shape " +
                                     Tensor::shape_string(q.shape()) + " incompatible with batch " +
                                     std::to_string(batch) + ", seq " + std::to_string(seq) +
                                     ", heads " + std::to_string(heads));
  }
  const int hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // Post-softmax probabilities, kept for backward: [batch][head] S x S.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(batch) * heads * seq * seq, 0.0);

  Dtype dt = promote(promote(q.dtype(), k.dtype()), v.dtype());
  Tensor out = op_output(
      {batch * seq, dim}, dt, {q, k, v},
      [batch, seq, heads, hd, dim, inv_sqrt, probs](TensorImpl& self) {
        Tensor pq = self.parents[0], pk = self.parents[1], pv = self.parents[2];
        RowMat dP(seq, seq), dS(seq, seq), P(seq, seq);
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const size_t pbase =
                (static_cast<size_t>(b) * heads + h) * static_cast<size_t>(seq) * seq;
            for (int i = 0; i < seq; ++i)
              for (int j = 0; j < seq; ++j)
                P(i, j) = (*probs)[pbase + static_cast<size_t>(i) * seq + j];

            const int row0 = b * seq;
            const int col0 = h * hd;
            auto dO = bmap(self.grad.data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
            auto Vb = bmap(pv.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
            auto Qb = bmap(pq.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
            auto Kb = bmap(pk.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);

            dP.noalias() = dO * Vb.transpose();
            if (pv.requires_grad()) {
              auto dV = bmap(pv.grad().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
              dV.noalias() += P.transpose() * dO;
            }
            for (int i = 0; i < seq; ++i) {
              double dot = 0.0;
              for (int j = 0; j < seq; ++j) dot += dP(i, j) * P(i, j);
              for (int j = 0; j < seq; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot);
            }
            if (pq.requires_grad()) {
              auto dQ = bmap(pq.grad().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
              dQ.noalias() += inv_sqrt * (dS * Kb);
            }
            if (pk.requires_grad()) {
              auto dK = bmap(pk.grad().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
              dK.noalias() += inv_sqrt * (dS.transpose() * Qb);
            }
          }
        }
      });

  if (capture) {
    capture->assign(static_cast<size_t>(batch), Mat(seq, seq));
  }
  const double head_weight = 1.0 / heads;
  RowMat scores(seq, seq);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int row0 = b * seq;
      const int col0 = h * hd;
      auto Qb = bmap(q.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
      auto Kb = bmap(k.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
      auto Vb = bmap(v.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
      scores.noalias() = inv_sqrt * (Qb * Kb.transpose());

      const size_t pbase = (static_cast<size_t>(b) * heads + h) * static_cast<size_t>(seq) * seq;
      for (int i = 0; i < seq; ++i) {
        const int limit = causal ? i + 1 : seq;
        double mx = scores(i, 0);
        for (int j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (int j = 0; j < limit; ++j) {
          const double e = std::exp(scores(i, j) - mx);
          (*probs)[pbase + static_cast<size_t>(i) * seq + j] = e;
          sum += e;
        }
        for (int j = 0; j < limit; ++j) (*probs)[pbase + static_cast<size_t>(i) * seq + j] /= sum;
        // entries at j >= limit stay exactly zero
      }

      auto Pb = bmap(probs->data() + pbase, seq, seq, seq);
      auto Ob = bmap(out.values().data() + static_cast<size_t>(row0) * dim + col0, seq, hd, dim);
      Ob.noalias() = Pb * Vb;

      if (capture) {
        Mat& cm = (*capture)[static_cast<size_t>(b)];
        for (int i = 0; i < seq; ++i)
          for (int j = 0; j < seq; ++j)
            cm(i, j) += head_weight * (*probs)[pbase + static_cast<size_t>(i) * seq + j];
      }
    }
  }
  out.round_to_dtype();
  return out;
}

Tensor gpo_pool(const Tensor& tokens, const Tensor& logits) {
  check_2d(tokens, "gpo_pool");
  const int k = tokens.dim(0), dim = tokens.dim(1);
  const int kmax = static_cast<int>(logits.numel());
  if (k > kmax) {
    fail(ErrorKind::Config, "gpo_pool: bank size " + std::to_string(k) +
                                " exceeds position-logit capacity " + std::to_string(kmax));
  }
  // Softmax over the first k logits.
  auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(k), 0.0);
  {
    const auto& lv = logits.values();
    double mx = lv[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, lv[static_cast<size_t>(i)]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      (*weights)[static_cast<size_t>(i)] = std::exp(lv[static_cast<size_t>(i)] - mx);
      sum += (*weights)[static_cast<size_t>(i)];
    }
    for (auto& w : *weights) w /= sum;
  }
  // Per-dimension descending sort; ties keep the lower original row first.
  auto perm = std::make_shared<std::vector<int>>(static_cast<size_t>(k) * dim);
  {
    const auto& tv = tokens.values();
    std::vector<int> idx(static_cast<size_t>(k));
    for (int d = 0; d < dim; ++d) {
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return tv[static_cast<size_t>(a) * dim + d] > tv[static_cast<size_t>(b) * dim + d];
      });
      for (int r = 0; r < k; ++r) (*perm)[static_cast<size_t>(r) * dim + d] = idx[static_cast<size_t>(r)];
    }
  }

  Tensor out = op_output(
      {1, dim}, promote(tokens.dtype(), logits.dtype()), {tokens, logits},
      [k, dim, weights, perm](TensorImpl& self) {
        Tensor pt = self.parents[0], pl = self.parents[1];
        const auto& tv = pt.values();
        std::vector<double> dw(static_cast<size_t>(k), 0.0);
        for (int r = 0; r < k; ++r) {
          for (int d = 0; d < dim; ++d) {
            const int src = (*perm)[static_cast<size_t>(r) * dim + d];
            const double g = self.grad[static_cast<size_t>(d)];
            dw[static_cast<size_t>(r)] += g * tv[static_cast<size_t>(src) * dim + d];
            if (pt.requires_grad()) {
              pt.grad()[static_cast<size_t>(src) * dim + d] += (*weights)[static_cast<size_t>(r)] * g;
            }
          }
        }
        if (pl.requires_grad()) {
          double dot = 0.0;
          for (int r = 0; r < k; ++r) dot += dw[static_cast<size_t>(r)] * (*weights)[static_cast<size_t>(r)];
          auto& gl = pl.grad();
          for (int r = 0; r < k; ++r) {
            gl[static_cast<size_t>(r)] += (*weights)[static_cast<size_t>(r)] * (dw[static_cast<size_t>(r)] - dot);
          }
        }
      });
  const auto& tv = tokens.values();
  auto& ov = out.values();
  for (int d = 0; d < dim; ++d) {
    double acc = 0.0;
    for (int r = 0; r < k; ++r) {
      acc += (*weights)[static_cast<size_t>(r)] *
             tv[static_cast<size_t>((*perm)[static_cast<size_t>(r) * dim + d]) * dim + d];
    }
    ov[static_cast<size_t>(d)] = acc;
  }
  out.round_to_dtype();
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& ids) {
  check_2d(logits, "cross_entropy_mean");
  const int b = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(ids.size()) != b) {
    fail(ErrorKind::Conformance, "cross_entropy_mean: expected " + std::to_string(b) + " labels");
  }
  for (int id : ids) {
    if (id < 0 || id >= c) {
      fail(ErrorKind::Data, "cross_entropy_mean: identity " + std::to_string(id) +
                                " outside [0, " + std::to_string(c) + ")");
    }
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  Tensor out = op_output({1}, logits.dtype(), {logits}, [b, c, ids_copy](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    const auto& lv = p.values();
    auto& g = p.grad();
    const double scale = self.grad[0] / b;
    for (int r = 0; r < b; ++r) {
      const double* row = lv.data() + static_cast<size_t>(r) * c;
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
      double* gr = g.data() + static_cast<size_t>(r) * c;
      for (int j = 0; j < c; ++j) {
        const double soft = std::exp(row[j] - mx) / sum;
        gr[j] += scale * (soft - (j == (*ids_copy)[static_cast<size_t>(r)] ? 1.0 : 0.0));
      }
    }
  });
  const auto& lv = logits.values();
  std::vector<double> row_losses(static_cast<size_t>(b));
  for (int r = 0; r < b; ++r) {
    const double* row = lv.data() + static_cast<size_t>(r) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    row_losses[static_cast<size_t>(r)] = mx + std::log(sum) - row[ids[static_cast<size_t>(r)]];
  }
  // Order-independent reduction so the loss is exactly permutation-invariant
  // in batch order.
  std::sort(row_losses.begin(), row_losses.end());
  double loss = 0.0;
  for (double v : row_losses) loss += v;
  out.values()[0] = loss / b;
  out.round_to_dtype();
  return out;
}

namespace {

// One direction of the triplet alignment loss. Anchors iterate over rows of
// `sims`; transposing is handled by the caller through the accessor lambda.
struct TalDirection {
  double total{0.0};
  // per anchor: weight list over negatives and the hardest-positive column
  std::vector<std::vector<std::pair<int, double>>> neg_weights;
  std::vector<int> hardest_positive;
};

TalDirection tal_direction(const std::function<double(int, int)>& s, int n,
                           const std::vector<int>& anchor_ids,
                           const std::vector<int>& other_ids, double tau, double margin,
                           const char* direction) {
  TalDirection res;
  res.neg_weights.resize(static_cast<size_t>(n));
  res.hardest_positive.assign(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    double p = 0.0;
    int p_idx = -1;
    for (int j = 0; j < n; ++j) {
      if (other_ids[static_cast<size_t>(j)] != anchor_ids[static_cast<size_t>(i)]) continue;
      if (p_idx < 0 || s(i, j) < p) {
        p = s(i, j);
        p_idx = j;
      }
    }
    if (p_idx < 0) {
      fail(ErrorKind::Data, std::string("tal_loss: ") + direction + " anchor " +
                                std::to_string(i) + " has no positive pair in batch");
    }
    res.hardest_positive[static_cast<size_t>(i)] = p_idx;

    double zmax = 0.0;  // the implicit "1 +" term corresponds to z = 0
    std::vector<std::pair<int, double>> zs;
    for (int j = 0; j < n; ++j) {
      if (other_ids[static_cast<size_t>(j)] == anchor_ids[static_cast<size_t>(i)]) continue;
      const double z = (s(i, j) - p + margin) / tau;
      zs.emplace_back(j, z);
      zmax = std::max(zmax, z);
    }
    double denom = std::exp(-zmax);
    for (auto& [j, z] : zs) denom += std::exp(z - zmax);
    res.total += tau * (zmax + std::log(denom));
    auto& w = res.neg_weights[static_cast<size_t>(i)];
    w.reserve(zs.size());
    for (auto& [j, z] : zs) w.emplace_back(j, std::exp(z - zmax) / denom);
  }
  return res;
}

}  // namespace

Tensor tal_loss(const Tensor& sims, const std::vector<int>& row_ids,
                const std::vector<int>& col_ids, double tau, double margin) {
  check_2d(sims, "tal_loss");
  if (tau <= 0.0) fail(ErrorKind::Config, "tal_loss: temperature must be positive");
  const int n = sims.dim(0);
  if (sims.dim(1) != n) {
    fail(ErrorKind::Conformance,
         "tal_loss: similarity matrix must be square, got " + Tensor::shape_string(sims.shape()));
  }
  if (static_cast<int>(row_ids.size()) != n || static_cast<int>(col_ids.size()) != n) {
    fail(ErrorKind::Conformance, "tal_loss: identity lists must have length " + std::to_string(n));
  }

  const auto& sv = sims.values();
  auto at = [&](int i, int j) { return sv[static_cast<size_t>(i) * n + j]; };
  auto at_t = [&](int i, int j) { return sv[static_cast<size_t>(j) * n + i]; };

  TalDirection rows = tal_direction(at, n, row_ids, col_ids, tau, margin, "image");
  TalDirection cols = tal_direction(at_t, n, col_ids, row_ids, tau, margin, "text");

  auto rows_ptr = std::make_shared<TalDirection>(std::move(rows));
  auto cols_ptr = std::make_shared<TalDirection>(std::move(cols));

  Tensor out = op_output({1}, sims.dtype(), {sims}, [n, tau, rows_ptr, cols_ptr](TensorImpl& self) {
    Tensor p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    const double scale = self.grad[0] / (2.0 * n);
    for (int i = 0; i < n; ++i) {
      double wsum = 0.0;
      for (const auto& [j, w] : rows_ptr->neg_weights[static_cast<size_t>(i)]) {
        g[static_cast<size_t>(i) * n + j] += scale * w;
        wsum += w;
      }
      g[static_cast<size_t>(i) * n + rows_ptr->hardest_positive[static_cast<size_t>(i)]] -=
          scale * wsum;
    }
    for (int j = 0; j < n; ++j) {
      double wsum = 0.0;
      for (const auto& [i, w] : cols_ptr->neg_weights[static_cast<size_t>(j)]) {
        g[static_cast<size_t>(i) * n + j] += scale * w;
        wsum += w;
      }
      g[static_cast<size_t>(cols_ptr->hardest_positive[static_cast<size_t>(j)]) * n + j] -=
          scale * wsum;
    }
  });
  out.values()[0] = (rows_ptr->total + cols_ptr->total) / (2.0 * n);
  out.round_to_dtype();
  return out;
}

}  // namespace cmret
