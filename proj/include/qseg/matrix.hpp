// Dense row-major double matrix plus the handful of product kernels the
// autodiff tape needs. Accumulation order is fixed so results are bitwise
// reproducible run to run.
#pragma once

#include <cassert>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace qseg {

struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative dimension");
  }

  bool empty() const { return rows == 0 || cols == 0; }
  size_t size() const { return v.size(); }

  double& at(int r, int c) {
    assert(r >= 0 && r < rows && c >= 0 && c < cols);
    return v[static_cast<size_t>(r) * cols + c];
  }
  double at(int r, int c) const {
    assert(r >= 0 && r < rows && c >= 0 && c < cols);
    return v[static_cast<size_t>(r) * cols + c];
  }
  double* row(int r) {
    assert(r >= 0 && r < rows);
    return v.data() + static_cast<size_t>(r) * cols;
  }
  const double* row(int r) const {
    assert(r >= 0 && r < rows);
    return v.data() + static_cast<size_t>(r) * cols;
  }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

// dst += a * b, with a (m x k) and b (k x n). ikj order: the inner loop is a
// contiguous axpy over rows of b, which the compiler vectorizes.
inline void macc_nn(Mat& dst, const Mat& a, const Mat& b) {
  require_shape(a.cols == b.rows && dst.rows == a.rows && dst.cols == b.cols, "macc_nn");
  const int m = a.rows, k = a.cols, n = b.cols;
  for (int i = 0; i < m; ++i) {
    double* d = dst.row(i);
    const double* ar = a.row(i);
    for (int p = 0; p < k; ++p) {
      const double s = ar[p];
      if (s == 0.0) continue;
      const double* br = b.row(p);
      for (int j = 0; j < n; ++j) d[j] += s * br[j];
    }
  }
}

// dst += a * b^T, with a (m x k) and b (n x k). Serial row-dot-row chains
// stall on add latency and resist vectorization, so transpose b once (O(nk))
// and reuse the contiguous-axpy inner loop over all m rows.
inline void macc_nt(Mat& dst, const Mat& a, const Mat& b) {
  require_shape(a.cols == b.cols && dst.rows == a.rows && dst.cols == b.rows, "macc_nt");
  const int m = a.rows, k = a.cols, n = b.rows;
  Mat bt(k, n);
  for (int j = 0; j < n; ++j) {
    const double* br = b.row(j);
    for (int p = 0; p < k; ++p) bt.at(p, j) = br[p];
  }
  for (int i = 0; i < m; ++i) {
    const double* ar = a.row(i);
    double* d = dst.row(i);
    for (int p = 0; p < k; ++p) {
      const double s = ar[p];
      if (s == 0.0) continue;
      const double* br = bt.row(p);
      for (int j = 0; j < n; ++j) d[j] += s * br[j];
    }
  }
}

// dst += a^T * b, with a (k x m) and b (k x n). kij order keeps b contiguous.
inline void macc_tn(Mat& dst, const Mat& a, const Mat& b) {
  require_shape(a.rows == b.rows && dst.rows == a.cols && dst.cols == b.cols, "macc_tn");
  const int k = a.rows, m = a.cols, n = b.cols;
  for (int p = 0; p < k; ++p) {
    const double* ar = a.row(p);
    const double* br = b.row(p);
    for (int i = 0; i < m; ++i) {
      const double s = ar[i];
      if (s == 0.0) continue;
      double* d = dst.row(i);
      for (int j = 0; j < n; ++j) d[j] += s * br[j];
    }
  }
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  macc_nn(out, a, b);
  return out;
}

inline Mat matmul_nt(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.rows);
  macc_nt(out, a, b);
  return out;
}

inline Mat matmul_tn(const Mat& a, const Mat& b) {
  Mat out(a.cols, b.cols);
  macc_tn(out, a, b);
  return out;
}

inline Mat transposed(const Mat& a) {
  Mat out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

}  // namespace qseg
