#pragma once

// Dense primitives shared by the decoder, the probes and the harness.
// Storage is Eigen, row-major, so a matrix's data() is the row-major array
// that the JSON formats expose.

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "cai/errors.hpp"

namespace cai {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Scalar = double>
constexpr Scalar mask_value() {
  return -std::numeric_limits<Scalar>::infinity();
}

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Matrix product with an explicit shape check.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.rows(), a.cols()) + " times " +
                     shape_string(b.rows(), b.cols()));
  }
  return a * b;
}

/// Row-wise softmax, stabilized by the row max. Masked (-inf) entries map to
/// exactly zero; a row with no finite entry is rejected.
template <typename Derived>
MatrixX<typename Derived::Scalar> row_softmax(const Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Scalar row_max = scores.row(i).maxCoeff();
    if (!std::isfinite(row_max)) {
      throw DegenerateRowError("row_softmax: row " + std::to_string(i) +
                               " has no finite entry");
    }
    Scalar total = 0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      const Scalar e = std::exp(scores(i, j) - row_max);
      out(i, j) = e;
      total += e;
    }
    out.row(i) /= total;
  }
  return out;
}

/// Sets entries strictly above the diagonal to the mask value in place.
template <typename Derived>
void apply_causal_mask(Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < scores.cols(); ++j) {
      scores(i, j) = mask_value<Scalar>();
    }
  }
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

}  // namespace cai
