#pragma once

// Dense reference engines for OpAMP,
//
//   x_t = L_t(Z) f_t(x_{<t}) - sum_{s<t} B_ts f_s(x_{<s}),   L_t(Z) = sum_k L_tk Z R_tk,
//
// its autoregressive variant
//
//   x_t = L_t(Z) f_t(x_{t-1}) + sum_{s<t} A_ts x_s - sum_{s<t} B_ts f_s(x_{s-1}),
//
// and the matrix-valued state evolution of both. Everything is stored densely;
// meant for n in the tens and T up to about 10.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "opamp/errors.hpp"
#include "opamp/models.hpp"
#include "opamp/rng.hpp"
#include "opamp/schedules.hpp"

namespace opamp {

/// L(Z) = sum_k L_k Z R_k.
class OperatorDecomposition {
public:
  /// Rejects decompositions whose factors exceed `max_op_norm` in operator
  /// norm.
  OperatorDecomposition(std::vector<Matrix> L, std::vector<Matrix> R,
                        double max_op_norm = std::numeric_limits<double>::infinity())
      : L_(std::move(L)), R_(std::move(R)) {
    if (L_.empty() || L_.size() != R_.size())
      throw ShapeError("OperatorDecomposition: need K >= 1 matching L and R factors");
    const auto n = L_.front().rows();
    for (std::size_t k = 0; k < L_.size(); ++k) {
      for (const Matrix *m : {&L_[k], &R_[k]}) {
        if (m->rows() != n || m->cols() != n) throw ShapeError("OperatorDecomposition: factors must be n x n");
        const double norm = Eigen::JacobiSVD<Matrix>(*m).singularValues()(0);
        op_norm_bound_ = std::max(op_norm_bound_, norm);
      }
    }
    if (op_norm_bound_ > max_op_norm)
      throw InvalidParameter("OperatorDecomposition: operator norm " + std::to_string(op_norm_bound_) +
                             " exceeds the bound " + std::to_string(max_op_norm));
  }

  static OperatorDecomposition identity(std::size_t n) {
    const auto m = static_cast<Eigen::Index>(n);
    return {{Matrix::Identity(m, m)}, {Matrix::Identity(m, m)}};
  }

  /// Pi Z with Pi = diag(mask).
  static OperatorDecomposition projector(const UpdateMask &mask) {
    const auto n = static_cast<Eigen::Index>(mask.size());
    Matrix P = Matrix::Zero(n, n);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask.active(i)) P(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
    return {{P}, {Matrix::Identity(n, n)}};
  }

  std::size_t K() const noexcept { return L_.size(); }
  std::size_t n() const noexcept { return static_cast<std::size_t>(L_.front().rows()); }
  const Matrix &L(std::size_t k) const { return L_.at(k); }
  const Matrix &R(std::size_t k) const { return R_.at(k); }
  double op_norm_bound() const noexcept { return op_norm_bound_; }

  Matrix apply(const Matrix &Z) const {
    check(Z);
    Matrix out = Matrix::Zero(Z.rows(), Z.cols());
    for (std::size_t k = 0; k < K(); ++k) out.noalias() += L_[k] * Z * R_[k];
    return out;
  }

  /// L(Z) v without forming L(Z).
  Vector apply(const Matrix &Z, const Vector &v) const {
    check(Z);
    if (v.size() != Z.rows()) throw ShapeError("OperatorDecomposition::apply: vector length mismatch");
    Vector out = Vector::Zero(v.size());
    for (std::size_t k = 0; k < K(); ++k) out.noalias() += L_[k] * (Z * (R_[k] * v));
    return out;
  }

private:
  void check(const Matrix &Z) const {
    if (Z.rows() != L_.front().rows() || Z.cols() != Z.rows())
      throw ShapeError("OperatorDecomposition::apply: Z must be n x n");
  }

  std::vector<Matrix> L_, R_;
  double op_norm_bound_ = 0.0;
};

/// f_t(x_0, ..., x_{t-1}) with an optional analytic Jacobian D_s f_t.
/// Autoregressive recursions call it with the single input x_{t-1}.
struct MemoryFunction {
  std::function<Vector(std::span<const Vector>)> f;
  std::function<Matrix(std::span<const Vector>, std::size_t)> jacobian;

  Vector operator()(std::span<const Vector> xs) const { return f(xs); }
};

inline constexpr double kJacobianStep = 1e-6;

/// D_s f(xs): analytic when provided, else forward differences with step
/// kJacobianStep.
inline Matrix jacobian(const MemoryFunction &fn, std::span<const Vector> xs, std::size_t s) {
  if (s >= xs.size()) throw IndexError("jacobian: input index out of range");
  if (fn.jacobian) return fn.jacobian(xs, s);
  std::vector<Vector> probe(xs.begin(), xs.end());
  const Vector base = fn(probe);
  Matrix J(base.size(), probe[s].size());
  for (Eigen::Index j = 0; j < probe[s].size(); ++j) {
    const double keep = probe[s](j);
    probe[s](j) = keep + kJacobianStep;
    J.col(j) = (fn(probe) - base) / kJacobianStep;
    probe[s](j) = keep;
  }
  return J;
}

/// Coordinatewise f(x)_i = eta(x_i) applied to the last input.
inline MemoryFunction separable_function(std::function<double(double)> eta, std::function<double(double)> deta) {
  MemoryFunction fn;
  fn.f = [eta](std::span<const Vector> xs) -> Vector {
    if (xs.empty()) throw MissingState("separable_function: no input iterate");
    return xs.back().unaryExpr(eta);
  };
  fn.jacobian = [deta](std::span<const Vector> xs, std::size_t s) -> Matrix {
    const auto n = xs.back().size();
    if (s + 1 != xs.size()) return Matrix::Zero(n, n);
    return xs.back().unaryExpr(deta).asDiagonal();
  };
  return fn;
}

/// Constant f_0.
inline MemoryFunction constant_function(Vector value) {
  MemoryFunction fn;
  fn.f = [value](std::span<const Vector>) { return value; };
  fn.jacobian = [n = value.size()](std::span<const Vector>, std::size_t) { return Matrix::Zero(n, n); };
  return fn;
}

/// One OpAMP step. `fvals[s]` holds f_s(x_{<s}) for s < t and `B_row[s]` the
/// matrix B_ts.
inline Vector opamp_step(const Matrix &Z, const OperatorDecomposition &decomposition, const MemoryFunction &f_t,
                         std::span<const Matrix> B_row, std::span<const Vector> xs, std::span<const Vector> fvals) {
  const std::size_t t = xs.size();
  if (B_row.size() != t || fvals.size() != t)
    throw ShapeError("opamp_step: need one B_ts and one f_s value for every s < t");
  Vector x = decomposition.apply(Z, f_t(xs));
  for (std::size_t s = 0; s < t; ++s) x.noalias() -= B_row[s] * fvals[s];
  return x;
}

/// A_ts (autoregressive weights) and the derived C_ts with
/// C_ts = sum_{r<t} A_tr C_rs and C_tt = I.
class MemoryMatrices {
public:
  MemoryMatrices(std::size_t n, std::size_t T) : n_(n), T_(T) {}

  /// Projection AMP memory: A_{t,t-1} = I - Pi_t for t >= 1.
  static MemoryMatrices projection(std::span<const UpdateMask> masks) {
    if (masks.empty()) throw InvalidDimension("MemoryMatrices::projection: no masks");
    MemoryMatrices m(masks.front().size(), masks.size() - 1);
    for (std::size_t t = 1; t < masks.size(); ++t) {
      Vector keep(static_cast<Eigen::Index>(m.n_));
      for (std::size_t i = 0; i < m.n_; ++i) keep(static_cast<Eigen::Index>(i)) = masks[t].active(i) ? 0.0 : 1.0;
      m.set_A(t, t - 1, keep.asDiagonal());
    }
    return m;
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t T() const noexcept { return T_; }

  void set_A(std::size_t t, std::size_t s, Matrix a) {
    if (s >= t || t > T_) throw IndexError("MemoryMatrices::set_A: need s < t <= T");
    if (a.rows() != static_cast<Eigen::Index>(n_) || a.cols() != a.rows())
      throw ShapeError("MemoryMatrices::set_A: A_ts must be n x n");
    A_[{t, s}] = std::move(a);
    C_.clear();
  }

  Matrix A(std::size_t t, std::size_t s) const {
    auto it = A_.find({t, s});
    const auto n = static_cast<Eigen::Index>(n_);
    return it == A_.end() ? Matrix::Zero(n, n) : it->second;
  }

  bool has_A(std::size_t t, std::size_t s) const { return A_.count({t, s}) > 0; }

  /// C_ts for s <= t <= T.
  const Matrix &C(std::size_t t, std::size_t s) const {
    if (s > t || t > T_) throw IndexError("MemoryMatrices::C: need s <= t <= T");
    if (C_.empty()) build();
    return C_.at({t, s});
  }

  /// max |U V - I| where U is the block unitriangular matrix with -A_ts
  /// below the diagonal and V the one with C_ts.
  double inverse_residual() const {
    const auto n = static_cast<Eigen::Index>(n_);
    const auto N = n * static_cast<Eigen::Index>(T_ + 1);
    Matrix U = Matrix::Identity(N, N), V = Matrix::Identity(N, N);
    for (std::size_t t = 0; t <= T_; ++t)
      for (std::size_t s = 0; s < t; ++s) {
        const auto rt = static_cast<Eigen::Index>(t) * n, cs = static_cast<Eigen::Index>(s) * n;
        if (has_A(t, s)) U.block(rt, cs, n, n) = -A_.at({t, s});
        V.block(rt, cs, n, n) = C(t, s);
      }
    return (U * V - Matrix::Identity(N, N)).cwiseAbs().maxCoeff();
  }

private:
  void build() const {
    const auto n = static_cast<Eigen::Index>(n_);
    for (std::size_t t = 0; t <= T_; ++t) {
      C_[{t, t}] = Matrix::Identity(n, n);
      for (std::size_t s = 0; s < t; ++s) {
        Matrix acc = Matrix::Zero(n, n);
        for (std::size_t r = s; r < t; ++r) {
          auto it = A_.find({t, r});
          if (it != A_.end()) acc.noalias() += it->second * C_.at({r, s});
        }
        C_[{t, s}] = std::move(acc);
      }
    }
  }

  std::size_t n_, T_;
  std::map<std::pair<std::size_t, std::size_t>, Matrix> A_;
  mutable std::map<std::pair<std::size_t, std::size_t>, Matrix> C_;
};

/// One autoregressive OpAMP step. xs = x_0..x_{t-1}; fvals[s] = f_s(x_{s-1}).
inline Vector autoregressive_step(const Matrix &Z, const OperatorDecomposition &decomposition,
                                  const MemoryFunction &f_t, const MemoryMatrices &memory, std::span<const Matrix> B_row,
                                  std::span<const Vector> xs, std::span<const Vector> fvals) {
  const std::size_t t = xs.size();
  if (B_row.size() != t || fvals.size() != t)
    throw ShapeError("autoregressive_step: need one B_ts and one f_s value for every s < t");
  Vector x = decomposition.apply(Z, t == 0 ? f_t(xs) : f_t(xs.subspan(t - 1)));
  for (std::size_t s = 0; s < t; ++s) {
    if (memory.has_A(t, s)) x.noalias() += memory.A(t, s) * xs[s];
    x.noalias() -= B_row[s] * fvals[s];
  }
  return x;
}

/// Covariance blocks cov(y_s, y_t) and overlaps q_{sltk}.
struct GaussianSE {
  std::size_t n = 0;
  std::map<std::pair<std::size_t, std::size_t>, Matrix> cov;
  std::map<std::array<std::size_t, 4>, double> q;
  /// For the autoregressive form: cov(y~_s, y~_t) of the transformed
  /// process. Equal to `cov` otherwise.
  std::map<std::pair<std::size_t, std::size_t>, Matrix> cov_tilde;

  std::size_t steps() const {
    std::size_t t = 0;
    while (cov.count({t, t})) ++t;
    return t;
  }

  Matrix block(std::size_t s, std::size_t t) const {
    if (s <= t) return cov.at({s, t});
    return cov.at({t, s}).transpose();
  }

  /// Stacked covariance of (y_0, ..., y_{t-1}).
  Matrix stacked(std::size_t t, bool tilde = false) const {
    const auto n_ = static_cast<Eigen::Index>(n);
    Matrix S(n_ * static_cast<Eigen::Index>(t), n_ * static_cast<Eigen::Index>(t));
    const auto &src = tilde ? cov_tilde : cov;
    for (std::size_t a = 0; a < t; ++a)
      for (std::size_t b = a; b < t; ++b) {
        const Matrix &blk = src.at({a, b});
        S.block(static_cast<Eigen::Index>(a) * n_, static_cast<Eigen::Index>(b) * n_, n_, n_) = blk;
        S.block(static_cast<Eigen::Index>(b) * n_, static_cast<Eigen::Index>(a) * n_, n_, n_) = blk.transpose();
      }
    return S;
  }
};

inline constexpr double kEigenClip = 1e-10;
inline constexpr double kPsdTolerance = 1e-2;

/// Symmetric square root of a covariance with eigenvalues below kEigenClip set
/// to zero. Fails when the most negative eigenvalue is below
/// -kPsdTolerance * max(1, largest eigenvalue).
inline Matrix covariance_factor(const Matrix &cov) {
  const Matrix sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalInstability("covariance_factor: eigendecomposition failed");
  Vector ev = eig.eigenvalues();
  const double top = std::max(1.0, ev.maxCoeff());
  if (ev.minCoeff() < -kPsdTolerance * top)
    throw NumericalInstability("covariance_factor: covariance has eigenvalue " + std::to_string(ev.minCoeff()));
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev(i) = ev(i) < kEigenClip ? 0.0 : std::sqrt(ev(i));
  return eig.eigenvectors() * ev.asDiagonal();
}

namespace detail {

/// Draws `samples` joint realizations of a zero-mean Gaussian vector, split
/// into t blocks of length n.
inline std::vector<std::vector<Vector>> sample_blocks(const Matrix &cov, std::size_t t, std::size_t n,
                                                      std::size_t samples, Rng &rng) {
  std::vector<std::vector<Vector>> out(samples);
  if (t == 0) return out;
  const Matrix F = covariance_factor(cov);
  Vector g(F.cols());
  const auto n_ = static_cast<Eigen::Index>(n);
  for (auto &draw : out) {
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = rng.gaussian();
    const Vector y = F * g;
    draw.reserve(t);
    for (std::size_t s = 0; s < t; ++s) draw.push_back(y.segment(static_cast<Eigen::Index>(s) * n_, n_));
  }
  return out;
}

/// y_{t-1} = sum_{s<=t-1} C_{t-1,s} y~_s from a draw of y~_{<t}.
inline Vector reconstruct(const MemoryMatrices &memory, std::span<const Vector> tilde, std::size_t u) {
  Vector y = Vector::Zero(tilde.front().size());
  for (std::size_t s = 0; s <= u; ++s) y.noalias() += memory.C(u, s) * tilde[s];
  return y;
}

/// f_s evaluated on one draw: the full history for OpAMP, y_{s-1} for the
/// autoregressive form.
inline Vector evaluate(const MemoryFunction &f, std::span<const Vector> ys, std::size_t s,
                       const MemoryMatrices *memory, std::span<const Vector> tilde) {
  if (s == 0) return f(std::span<const Vector>{});
  if (!memory) return f(ys.first(s));
  const Vector prev = reconstruct(*memory, tilde, s - 1);
  return f(std::span<const Vector>(&prev, 1));
}

} // namespace detail

/// State evolution through time T (blocks 0..T). Expectations over y_{<t} use
/// `mc_samples` joint Gaussian draws; f_0 must not depend on its inputs.
/// With `memory`, builds the SE of the autoregressive recursion.
inline GaussianSE se_opamp(std::span<const OperatorDecomposition> decompositions,
                           std::span<const MemoryFunction> fs, std::size_t T, std::size_t mc_samples, Seed seed,
                           const MemoryMatrices *memory = nullptr) {
  if (decompositions.size() <= T || fs.size() <= T)
    throw ShapeError("se_opamp: need decompositions and functions for t = 0..T");
  if (mc_samples == 0) throw InvalidParameter("se_opamp: mc_samples must be positive");
  const std::size_t n = decompositions[0].n();
  GaussianSE se;
  se.n = n;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t <= T; ++t) {
    Rng rng(derive_seed(seed, t));
    const std::size_t draws = t == 0 ? 1 : mc_samples;
    const auto tilde_draws =
        detail::sample_blocks(t == 0 ? Matrix() : se.stacked(t, true), t, n, draws, rng);
    const auto &dt = decompositions[t];
    for (std::size_t s = 0; s <= t; ++s) {
      const auto &ds = decompositions[s];
      Matrix qs = Matrix::Zero(static_cast<Eigen::Index>(ds.K()), static_cast<Eigen::Index>(dt.K()));
      for (const auto &tilde : tilde_draws) {
        std::vector<Vector> ys;
        if (!memory) {
          ys = tilde;
        }
        const Vector fs_val = detail::evaluate(fs[s], ys, s, memory, tilde);
        const Vector ft_val = detail::evaluate(fs[t], ys, t, memory, tilde);
        for (std::size_t l = 0; l < ds.K(); ++l) {
          const Vector a = ds.R(l) * fs_val;
          for (std::size_t k = 0; k < dt.K(); ++k)
            qs(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) += a.dot(dt.R(k) * ft_val);
        }
      }
      qs *= inv_n / static_cast<double>(draws);
      const auto n_ = static_cast<Eigen::Index>(n);
      Matrix blk = Matrix::Zero(n_, n_);
      for (std::size_t l = 0; l < ds.K(); ++l)
        for (std::size_t k = 0; k < dt.K(); ++k) {
          const double v = qs(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k));
          se.q[{s, l, t, k}] = v;
          blk.noalias() += v * ds.L(l) * dt.L(k).transpose();
        }
      se.cov_tilde[{s, t}] = std::move(blk);
    }
    // cov(y_s, y_t) = sum_{s' <= s, t' <= t} C_{ss'} cov(y~_s', y~_t') C_{tt'}^T.
    for (std::size_t s = 0; s <= t; ++s) {
      if (!memory) {
        se.cov[{s, t}] = se.cov_tilde.at({s, t});
        continue;
      }
      Matrix acc = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      for (std::size_t a = 0; a <= s; ++a)
        for (std::size_t b = 0; b <= t; ++b) {
          const Matrix blk = a <= b ? se.cov_tilde.at({a, b}) : Matrix(se.cov_tilde.at({b, a}).transpose());
          acc.noalias() += memory->C(s, a) * blk * memory->C(t, b).transpose();
        }
      se.cov[{s, t}] = std::move(acc);
    }
  }
  return se;
}

namespace detail {

inline std::vector<Matrix> assemble_B(std::span<const OperatorDecomposition> decompositions, std::size_t t,
                                      std::span<const Matrix> jacobians) {
  const auto &dt = decompositions[t];
  const double inv_n = 1.0 / static_cast<double>(dt.n());
  std::vector<Matrix> B;
  B.reserve(t);
  for (std::size_t s = 0; s < t; ++s) {
    const auto &ds = decompositions[s];
    Matrix acc = Matrix::Zero(static_cast<Eigen::Index>(dt.n()), static_cast<Eigen::Index>(dt.n()));
    for (std::size_t k = 0; k < dt.K(); ++k)
      for (std::size_t l = 0; l < ds.K(); ++l) {
        const double c = inv_n * (dt.R(k) * jacobians[s] * ds.L(l)).trace();
        acc.noalias() += c * dt.L(k) * ds.R(l);
      }
    B.push_back(std::move(acc));
  }
  return B;
}

/// E[D_s f_t] (or D f_t C_{t-1,s} in the autoregressive form) on a single
/// path ys = y_0..y_{t-1}.
inline std::vector<Matrix> path_jacobians(const MemoryFunction &f_t, std::span<const Vector> ys,
                                          const MemoryMatrices *memory) {
  const std::size_t t = ys.size();
  std::vector<Matrix> out;
  out.reserve(t);
  if (!memory) {
    for (std::size_t s = 0; s < t; ++s) out.push_back(jacobian(f_t, ys, s));
    return out;
  }
  const Matrix D = jacobian(f_t, ys.subspan(t - 1), 0);
  for (std::size_t s = 0; s < t; ++s) out.push_back(D * memory->C(t - 1, s));
  return out;
}

} // namespace detail

/// B_ts, s < t, with E[D_s f_t(y_{<t})] averaged over `mc_samples` draws from
/// the SE. With `memory`, uses E[D f_t(y_{t-1})] C_{t-1,s}.
inline std::vector<Matrix> debias_opamp(std::span<const OperatorDecomposition> decompositions,
                                        const MemoryFunction &f_t, const GaussianSE &se, std::size_t t,
                                        std::size_t mc_samples, Seed seed, const MemoryMatrices *memory = nullptr) {
  if (t == 0) return {};
  if (decompositions.size() <= t) throw ShapeError("debias_opamp: no decomposition for time t");
  if (se.steps() < t) throw MissingState("debias_opamp: SE not built through t - 1");
  if (mc_samples == 0) throw InvalidParameter("debias_opamp: mc_samples must be positive");
  Rng rng(seed);
  const auto draws = detail::sample_blocks(se.stacked(t), t, se.n, mc_samples, rng);
  const auto n_ = static_cast<Eigen::Index>(se.n);
  std::vector<Matrix> mean(t, Matrix::Zero(n_, n_));
  for (const auto &ys : draws) {
    const auto J = detail::path_jacobians(f_t, ys, memory);
    for (std::size_t s = 0; s < t; ++s) mean[s] += J[s];
  }
  for (auto &m : mean) m /= static_cast<double>(mc_samples);
  return detail::assemble_B(decompositions, t, mean);
}

/// B_ts with the expectation replaced by the realized path x_{<t}.
inline std::vector<Matrix> debias_opamp_empirical(std::span<const OperatorDecomposition> decompositions,
                                                  const MemoryFunction &f_t, std::span<const Vector> xs,
                                                  const MemoryMatrices *memory = nullptr) {
  const std::size_t t = xs.size();
  if (t == 0) return {};
  if (decompositions.size() <= t) throw ShapeError("debias_opamp_empirical: no decomposition for time t");
  return detail::assemble_B(decompositions, t, detail::path_jacobians(f_t, xs, memory));
}

/// Diagonal of cov(y_t), t = 0..T, for diagonal projectors:
///   cov(y_t) = m_t Pi_t + cov(y_{t-1}) Pi_t^perp,   m_t = E||f_t(y_{t-1})||^2 / n.
inline std::vector<Vector> se_proj_commuting(const Schedule &schedule, std::span<const double> second_moments,
                                             std::size_t T) {
  if (second_moments.size() <= T) throw ShapeError("se_proj_commuting: need second moments for t = 0..T");
  std::vector<Vector> out;
  out.reserve(T + 1);
  Vector cov = Vector::Zero(static_cast<Eigen::Index>(schedule.n()));
  for (std::size_t t = 0; t <= T; ++t) {
    const auto mask = schedule.mask(t);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask.active(i)) cov(static_cast<Eigen::Index>(i)) = second_moments[t];
    out.push_back(cov);
  }
  return out;
}

} // namespace opamp
