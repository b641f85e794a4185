#pragma once
// Small deterministic kernels. Every reduction runs in index order so results
// are bit-reproducible across runs and thread counts.
#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "avsink/errors.hpp"

namespace avsink {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec = VectorX<double>;
using Mat = MatrixX<double>;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j))) return false;
  return true;
}

template <typename Scalar>
VectorX<Scalar> softmax(const VectorX<Scalar>& v) {
  if (v.size() == 0) throw DataError("softmax: empty input");
  if (!all_finite(v)) throw DataError("non-finite input");
  Scalar mx = v(0);
  for (Eigen::Index i = 1; i < v.size(); ++i) mx = std::max(mx, v(i));
  VectorX<Scalar> out(v.size());
  Scalar z = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out(i) = std::exp(v(i) - mx);
    z += out(i);
  }
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i) /= z;
  return out;
}

template <typename Scalar>
VectorX<Scalar> log_softmax(const VectorX<Scalar>& v) {
  if (v.size() == 0) throw DataError("log_softmax: empty input");
  if (!all_finite(v)) throw DataError("non-finite input");
  Scalar mx = v(0);
  for (Eigen::Index i = 1; i < v.size(); ++i) mx = std::max(mx, v(i));
  Scalar z = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) z += std::exp(v(i) - mx);
  const Scalar lz = std::log(z);
  VectorX<Scalar> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i) = v(i) - mx - lz;
  return out;
}

// out[d] = gain[d] * x[d] / sqrt(mean(x^2) + eps)
template <typename Scalar>
VectorX<Scalar> rms_norm(const VectorX<Scalar>& x, const VectorX<Scalar>& gain, Scalar eps) {
  if (x.size() != gain.size()) throw DataError("rms_norm: length mismatch");
  if (x.size() == 0) throw DataError("rms_norm: empty input");
  Scalar ss = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) ss += x(i) * x(i);
  const Scalar denom = std::sqrt(ss / Scalar(x.size()) + eps);
  VectorX<Scalar> out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    out(i) = denom > 0 ? gain(i) * x(i) / denom : Scalar(0);
  return out;
}

// Unit-gain rms_norm applied to every row.
template <typename Scalar>
MatrixX<Scalar> rms_norm_rows(const MatrixX<Scalar>& x, Scalar eps) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Scalar ss = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) ss += x(r, c) * x(r, c);
    const Scalar denom = std::sqrt(ss / Scalar(x.cols()) + eps);
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = denom > 0 ? x(r, c) / denom : Scalar(0);
  }
  return out;
}

// a * b^T with a fixed left-to-right summation order.
template <typename Scalar>
MatrixX<Scalar> matmul_nt(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.cols() != b.cols()) throw DataError("matmul_nt: inner dimension mismatch");
  MatrixX<Scalar> out(a.rows(), b.rows());
  const Eigen::Index k = a.cols();
  // Rows of b that are entirely zero give exact zeros; planted weights are mostly empty.
  std::vector<char> live(static_cast<size_t>(b.rows()), 0);
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index p = 0; p < k; ++p)
      if (b(j, p) != Scalar(0)) {
        live[static_cast<size_t>(j)] = 1;
        break;
      }
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Scalar* ar = a.data() + i * k;
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      if (!live[static_cast<size_t>(j)]) {
        out(i, j) = Scalar(0);
        continue;
      }
      const Scalar* br = b.data() + j * k;
      Scalar s = 0;
      for (Eigen::Index p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) = s;
    }
  }
  return out;
}

// a * b, accumulated over the inner index in increasing order.
template <typename Scalar>
MatrixX<Scalar> matmul(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.cols() != b.rows()) throw DataError("matmul: inner dimension mismatch");
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(a.rows(), b.cols());
  const Eigen::Index n = b.cols();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Scalar* orow = out.data() + i * n;
    for (Eigen::Index p = 0; p < a.cols(); ++p) {
      const Scalar aip = a(i, p);
      if (aip == Scalar(0)) continue;
      const Scalar* brow = b.data() + p * n;
      for (Eigen::Index j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

}  // namespace avsink
