#pragma once

#include <vector>

#include "cmret/aligned.hpp"

namespace cmret {

// Plain dense row-major matrix of doubles. Used for values that live outside
// the autodiff tape: captured attention maps, aggregated saliency maps and
// similarity matrices at inference time.
struct Mat {
  int rows{0};
  int cols{0};
  Buffer v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

  const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
  double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);

}  // namespace cmret
