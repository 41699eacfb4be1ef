#pragma once

// Random-matrix ensembles and the rank-one spiked model
//   M = (lambda / n) theta theta^T + Z,   Z ~ GOE(n).
//
// Signals follow the ||theta||^2 = n convention (theta in {+1, -1}^n for the
// Rademacher generator). Callers wanting unit-norm signals rescale.

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <utility>

#include "opamp/errors.hpp"
#include "opamp/rng.hpp"

namespace opamp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Dense symmetric matrix with both triangles stored. Symmetry is checked
/// exactly on construction.
class SymmetricMatrix {
public:
  SymmetricMatrix() = default;

  explicit SymmetricMatrix(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols())
      throw ShapeError("SymmetricMatrix: matrix is not square");
    for (Eigen::Index j = 0; j < entries_.cols(); ++j)
      for (Eigen::Index i = j + 1; i < entries_.rows(); ++i)
        if (entries_(i, j) != entries_(j, i))
          throw InvalidParameter("SymmetricMatrix: entries are not symmetric");
  }

  static SymmetricMatrix zeros(std::size_t n) {
    SymmetricMatrix out;
    out.entries_ = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    return out;
  }

  std::size_t n() const noexcept { return static_cast<std::size_t>(entries_.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return entries_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  const Matrix &entries() const noexcept { return entries_; }

  /// Row i of the matrix. Since the matrix is symmetric this is the
  /// contiguous column i of the column-major storage.
  auto row(std::size_t i) const { return entries_.col(static_cast<Eigen::Index>(i)); }

private:
  // Bypasses the symmetry scan for matrices that are symmetric by construction.
  struct Trusted {};
  SymmetricMatrix(Matrix entries, Trusted) : entries_(std::move(entries)) {}

  friend SymmetricMatrix sample_goe(std::size_t n, Seed seed);
  friend struct SpikedInstance build_spiked(double lambda, const Vector &theta,
                                            const SymmetricMatrix &noise);

  Matrix entries_;
};

/// GOE(n): off-diagonal entries N(0, 1/n), diagonal entries N(0, 2/n).
/// Entries are drawn row by row over the upper triangle (i <= j), so the
/// output is a pure function of (n, seed).
inline SymmetricMatrix sample_goe(std::size_t n, Seed seed) {
  if (n == 0) throw InvalidDimension("sample_goe: n must be at least 1");
  Rng rng(seed);
  const auto N = static_cast<Eigen::Index>(n);
  Matrix z(N, N);
  const double off_sd = std::sqrt(1.0 / static_cast<double>(n));
  const double diag_sd = std::sqrt(2.0 / static_cast<double>(n));
  for (Eigen::Index i = 0; i < N; ++i) {
    z(i, i) = diag_sd * rng.gaussian();
    for (Eigen::Index j = i + 1; j < N; ++j) {
      const double v = off_sd * rng.gaussian();
      z(i, j) = v;
      z(j, i) = v;
    }
  }
  return SymmetricMatrix(std::move(z), SymmetricMatrix::Trusted{});
}

/// I.i.d. fair +-1 entries.
inline Vector sample_rademacher_signal(std::size_t n, Seed seed) {
  if (n == 0) throw InvalidDimension("sample_rademacher_signal: n must be at least 1");
  Rng rng(seed);
  Vector theta(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = rng.bernoulli(0.5) ? 1.0 : -1.0;
  return theta;
}

struct SpikedInstance {
  std::size_t n = 0;
  double lambda = 0.0;
  Vector theta;
  SymmetricMatrix Z;
  SymmetricMatrix M;
};

/// M = (lambda / n) theta theta^T + Z. Z is kept alongside M.
inline SpikedInstance build_spiked(double lambda, const Vector &theta, const SymmetricMatrix &noise) {
  if (static_cast<std::size_t>(theta.size()) != noise.n())
    throw ShapeError("build_spiked: theta length " + std::to_string(theta.size()) +
                     " does not match matrix dimension " + std::to_string(noise.n()));
  if (!(lambda >= 0.0)) throw InvalidParameter("build_spiked: lambda must be nonnegative");
  const double scale = lambda / static_cast<double>(noise.n());
  Matrix m(noise.entries().rows(), noise.entries().cols());
  // Fill the lower triangle and mirror so m is symmetric bit for bit.
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = j; i < m.rows(); ++i) {
      const double spike = scale * (theta(i) * theta(j));
      m(i, j) = noise.entries()(i, j) + spike;
      m(j, i) = m(i, j);
    }
  SpikedInstance out;
  out.n = noise.n();
  out.lambda = lambda;
  out.theta = theta;
  out.Z = noise;
  out.M = SymmetricMatrix(std::move(m), SymmetricMatrix::Trusted{});
  return out;
}

/// Limiting squared overlap between the signal and the top eigenvector:
/// 1 - 1/lambda^2 above the spectral transition lambda = 1, else 0.
inline double bbp_overlap(double lambda) {
  if (!(lambda >= 0.0)) throw InvalidParameter("bbp_overlap: lambda must be nonnegative");
  return lambda > 1.0 ? 1.0 - 1.0 / (lambda * lambda) : 0.0;
}

} // namespace opamp
