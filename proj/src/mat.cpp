#include "cmret/mat.hpp"

#include <Eigen/Core>

#include "cmret/error.hpp"

namespace cmret {

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) {
    fail(ErrorKind::Conformance, "mat matmul: inner dimensions disagree (" +
                                     std::to_string(a.cols) + " vs " + std::to_string(b.rows) + ")");
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat out(a.rows, b.cols);
  Eigen::Map<const RowMat> ma(a.v.data(), a.rows, a.cols);
  Eigen::Map<const RowMat> mb(b.v.data(), b.rows, b.cols);
  Eigen::Map<RowMat> mo(out.v.data(), out.rows, out.cols);
  mo.noalias() = ma * mb;
  return out;
}

Mat transpose(const Mat& a) {
  Mat out(a.cols, a.rows);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) out(c, r) = a(r, c);
  return out;
}

}  // namespace cmret
