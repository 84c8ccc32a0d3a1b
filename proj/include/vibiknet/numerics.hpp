#pragma once

// Dense linear-algebra and statistical primitives. Everything here is a pure
// function over Eigen expressions, templated on the scalar type; the rest of
// the library instantiates it with double.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "vibiknet/errors.hpp"

namespace vibik {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

namespace detail {

inline void require_same_length(Index a, Index b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length " + std::to_string(a) + " vs " +
                         std::to_string(b));
  }
}

}  // namespace detail

// Principal component projection x -> basis^T (x - mean), optionally whitened
// by 1/sqrt(eigenvalue + epsilon).
template <typename Scalar>
struct PcaModel {
  VectorX<Scalar> mean;         // D
  MatrixX<Scalar> basis;        // D x d, columns are principal directions
  VectorX<Scalar> eigenvalues;  // d, non-increasing
  bool whiten = false;
  Scalar epsilon = Scalar(0);

  Index input_dim() const { return basis.rows(); }
  Index output_dim() const { return basis.cols(); }

  friend bool operator==(const PcaModel& a, const PcaModel& b) {
    return a.whiten == b.whiten && a.epsilon == b.epsilon && a.mean == b.mean &&
           a.basis == b.basis && a.eigenvalues == b.eigenvalues;
  }
};

/// Fits a PCA model to `samples` (one sample per row) by eigendecomposition of
/// the explicit sample covariance. Each basis column is sign-flipped so that its
/// largest-magnitude entry is positive.
template <typename Derived>
PcaModel<typename Derived::Scalar> pca_fit(const Eigen::MatrixBase<Derived>& samples,
                                           Index target_dim,
                                           typename Derived::Scalar epsilon = 0,
                                           bool whiten = false) {
  using Scalar = typename Derived::Scalar;
  const Index n = samples.rows();
  const Index dim = samples.cols();
  if (n < 2) throw InsufficientData("pca_fit needs at least 2 samples, got " + std::to_string(n));
  if (!samples.allFinite()) throw InvalidValue("pca_fit: non-finite sample value");
  if (target_dim < 1 || target_dim > dim) {
    throw DimensionError("pca_fit: target_dim " + std::to_string(target_dim) +
                         " outside [1, " + std::to_string(dim) + "]");
  }
  if (target_dim > n - 1) {
    throw InsufficientData("pca_fit: target_dim " + std::to_string(target_dim) +
                           " exceeds sample count - 1 = " + std::to_string(n - 1));
  }

  PcaModel<Scalar> model;
  model.whiten = whiten;
  model.epsilon = epsilon;
  model.mean = samples.colwise().mean().transpose();
  const MatrixX<Scalar> centered = samples.rowwise() - model.mean.transpose();
  const MatrixX<Scalar> cov = (centered.adjoint() * centered) / Scalar(n - 1);

  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalFailure("pca_fit eigendecomposition", 0);

  // Eigen returns ascending eigenvalues.
  model.basis.resize(dim, target_dim);
  model.eigenvalues.resize(target_dim);
  for (Index j = 0; j < target_dim; ++j) {
    const Index src = dim - 1 - j;
    auto col = solver.eigenvectors().col(src);
    Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    model.basis.col(j) = col(arg) < Scalar(0) ? VectorX<Scalar>(-col) : VectorX<Scalar>(col);
    model.eigenvalues(j) = std::max(solver.eigenvalues()(src), Scalar(0));
  }
  return model;
}

template <typename Scalar, typename Derived>
VectorX<Scalar> pca_transform(const PcaModel<Scalar>& model, const Eigen::MatrixBase<Derived>& x) {
  detail::require_same_length(x.size(), model.input_dim(), "pca_transform");
  VectorX<Scalar> out = model.basis.transpose() * (x - model.mean);
  if (model.whiten) {
    out.array() /= (model.eigenvalues.array() + model.epsilon).sqrt();
  }
  return out;
}

/// Row-wise PCA projection of a sample matrix (one sample per row).
template <typename Scalar, typename Derived>
MatrixX<Scalar> pca_transform_rows(const PcaModel<Scalar>& model,
                                   const Eigen::MatrixBase<Derived>& rows) {
  detail::require_same_length(rows.cols(), model.input_dim(), "pca_transform_rows");
  MatrixX<Scalar> out = (rows.rowwise() - model.mean.transpose()) * model.basis;
  if (model.whiten) {
    const VectorX<Scalar> scale =
        (model.eigenvalues.array() + model.epsilon).sqrt().inverse().matrix();
    out = out * scale.asDiagonal();
  }
  return out;
}

/// Numerically stable softmax (max-subtracted).
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw DimensionError("softmax of empty vector");
  if (!logits.allFinite()) throw InvalidValue("softmax: non-finite logit");
  VectorX<Scalar> out = (logits.array() - logits.maxCoeff()).exp().matrix();
  out /= out.sum();
  return out;
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

namespace detail {

template <typename Scalar>
Eigen::FFT<Scalar>& fft_engine() {
  thread_local Eigen::FFT<Scalar> engine;
  return engine;
}

template <typename Scalar, typename Derived>
std::vector<std::complex<Scalar>> spectrum(const Eigen::MatrixBase<Derived>& v) {
  std::vector<Scalar> time(v.size());
  for (Index i = 0; i < v.size(); ++i) time[i] = v(i);
  std::vector<std::complex<Scalar>> freq;
  fft_engine<Scalar>().fwd(freq, time);
  return freq;
}

template <typename Scalar>
VectorX<Scalar> inverse_real(const std::vector<std::complex<Scalar>>& freq) {
  std::vector<Scalar> time;
  fft_engine<Scalar>().inv(time, freq);
  return Eigen::Map<const VectorX<Scalar>>(time.data(), static_cast<Index>(time.size()));
}

}  // namespace detail

/// result[k] = sum_j a[j] * b[(k - j) mod d], evaluated as a product of spectra.
template <typename DerivedA, typename DerivedB>
VectorX<typename DerivedA::Scalar> circular_convolve(const Eigen::MatrixBase<DerivedA>& a,
                                                     const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  detail::require_same_length(a.size(), b.size(), "circular_convolve");
  if (a.size() == 0) return VectorX<Scalar>();
  auto fa = detail::spectrum<Scalar>(a);
  const auto fb = detail::spectrum<Scalar>(b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  return detail::inverse_real<Scalar>(fa);
}

/// result[j] = sum_k g[k] * b[(k - j) mod d]; the adjoint of a -> circular_convolve(a, b).
template <typename DerivedG, typename DerivedB>
VectorX<typename DerivedG::Scalar> circular_correlate(const Eigen::MatrixBase<DerivedG>& g,
                                                      const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedG::Scalar;
  detail::require_same_length(g.size(), b.size(), "circular_correlate");
  if (g.size() == 0) return VectorX<Scalar>();
  auto fg = detail::spectrum<Scalar>(g);
  const auto fb = detail::spectrum<Scalar>(b);
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] *= std::conj(fb[i]);
  return detail::inverse_real<Scalar>(fg);
}

}  // namespace vibik
