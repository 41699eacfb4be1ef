#pragma once

// Projection AMP with partial row updates on the spiked model:
//
//   hat-theta_t = f_t(x_{t-1})
//   x_t = delta_t o (M hat-theta_t - sum_{s<t} b_ts hat-theta_s) + (1 - delta_t) o x_{t-1}
//
// and the partial-update power iteration it specializes to when f_t projects
// onto the sphere. Time indexing: step t consumes delta_t, produces x_t and
// then hat-theta_{t+1}; hat-theta_0 = f0 is supplied by the caller.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "opamp/denoise.hpp"
#include "opamp/errors.hpp"
#include "opamp/models.hpp"
#include "opamp/schedules.hpp"
#include "opamp/state_evolution.hpp"

namespace opamp {

/// Pi M v for Pi = diag(mask): rows outside the mask are zero. Costs
/// (active rows) x n.
inline Vector masked_multiply(const SymmetricMatrix &M, const Vector &v, const UpdateMask &mask) {
  if (static_cast<std::size_t>(v.size()) != M.n() || mask.size() != M.n())
    throw ShapeError("masked_multiply: dimensions of M, v and mask disagree");
  Vector out = Vector::Zero(v.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.active(i)) out(static_cast<Eigen::Index>(i)) = M.row(i).dot(v);
  return out;
}

enum class DebiasMode { empirical, se_analytic };

/// Coefficients b_{ts}, s < t, for one time step.
struct DebiasRow {
  std::size_t t = 0;
  std::map<std::size_t, double> b;
};

struct DebiasPlan {
  DebiasMode mode = DebiasMode::empirical;
  std::map<std::pair<std::size_t, std::size_t>, double> coefficients;

  void add(const DebiasRow &row) {
    for (const auto &[s, value] : row.b) {
      if (s >= row.t) throw IndexError("DebiasPlan: b_ts requires s < t");
      coefficients[{row.t, s}] = value;
    }
  }

  /// b_{ts}; zero for classes that were empty at t.
  double at(std::size_t t, std::size_t s) const {
    auto it = coefficients.find({t, s});
    return it == coefficients.end() ? 0.0 : it->second;
  }
};

namespace detail {

inline const OverlapPoint &overlap_at(std::span<const OverlapPoint> se, std::size_t s) {
  if (s >= se.size()) throw MissingState("no SE overlaps for class s = " + std::to_string(s));
  return se[s];
}

} // namespace detail

/// b_ts = (1/n) sum_i 1{tau(t,i) = s} eta'(x_{t-1,i}; q_s, lambda r_s), with
/// the derivative evaluated on the realized iterate.
inline DebiasRow debias_empirical(const SeparableDenoiser &denoiser, const Vector &x_prev,
                                  const ScheduleState &state, std::span<const OverlapPoint> se,
                                  double lambda) {
  if (static_cast<std::size_t>(x_prev.size()) != state.n())
    throw ShapeError("debias_empirical: iterate length does not match the schedule");
  DebiasRow row{state.t(), {}};
  const double n = static_cast<double>(state.n());
  for (std::size_t i = 0; i < state.n(); ++i) {
    const auto s = static_cast<std::size_t>(state.tau(i));
    const auto &pt = detail::overlap_at(se, s);
    row.b[s] += denoiser.derivative(x_prev(static_cast<Eigen::Index>(i)), pt.q, lambda * pt.r);
  }
  for (auto &[s, value] : row.b) value /= n;
  return row;
}

/// Same coefficients with the derivative averaged over the SE law of y_{t-1}:
/// coordinate i of class s is N(lambda r_s theta_i, q_s).
inline DebiasRow debias_se_analytic(const SeparableDenoiser &denoiser, const Vector &theta,
                                    const ScheduleState &state, std::span<const OverlapPoint> se,
                                    double lambda, int quad = kDefaultQuadOrder) {
  DebiasRow row{state.t(), {}};
  const double n = static_cast<double>(state.n());
  std::map<std::pair<std::size_t, double>, std::size_t> groups;
  for (std::size_t i = 0; i < state.n(); ++i)
    ++groups[{static_cast<std::size_t>(state.tau(i)), theta(static_cast<Eigen::Index>(i))}];
  const auto rule = gaussian_rule(quad);
  for (const auto &[key, count] : groups) {
    const auto [s, u] = key;
    const auto &pt = detail::overlap_at(se, s);
    const double centre = lambda * pt.r * u;
    const double sd = std::sqrt(pt.q);
    const double mean_slope =
        rule->expect([&](double z) { return denoiser.derivative(centre + sd * z, pt.q, lambda * pt.r); });
    row.b[s] += static_cast<double>(count) * mean_slope / n;
  }
  return row;
}

/// Sphere denoiser: b_ts = w_ts / (sqrt(n) ||x_{t-1}||) empirically, or
/// w_ts / (n sqrt(alpha_t)) with alpha_t = (1/n) sum_s w_ts (lambda^2 r_s^2 + q_s)
/// from the SE.
inline DebiasRow debias_sphere(const Vector &x_prev, const ScheduleState &state, DebiasMode mode,
                               std::span<const OverlapPoint> se, double lambda) {
  DebiasRow row{state.t(), {}};
  const double n = static_cast<double>(state.n());
  double scale = 0.0;
  if (mode == DebiasMode::empirical) {
    const double norm = x_prev.norm();
    if (!(norm > 1e-12 * std::sqrt(n))) throw DegenerateInput("debias_sphere: iterate norm vanished");
    scale = 1.0 / (std::sqrt(n) * norm);
  } else {
    double alpha = 0.0;
    for (const auto &[s, count] : state.class_counts()) {
      const auto &pt = detail::overlap_at(se, s);
      alpha += static_cast<double>(count) * (lambda * lambda * pt.r * pt.r + pt.q) / n;
    }
    scale = 1.0 / (n * std::sqrt(alpha));
  }
  for (const auto &[s, count] : state.class_counts()) row.b[s] = static_cast<double>(count) * scale;
  return row;
}

/// Where the engine reads the per-class overlaps (q_s, r_s) that
/// parameterize the denoiser and the analytic debiasing.
enum class SESource { asymptotic, finite_n };

struct AmpOptions {
  DebiasMode debias = DebiasMode::empirical;
  SESource se_source = SESource::asymptotic;
  int quad = kDefaultQuadOrder;
};

struct IterateHistory {
  std::vector<Vector> iterates;                  // x_0 .. x_{T-1}
  std::vector<Vector> estimates;                 // hat-theta_0 .. hat-theta_T
  std::vector<OverlapPoint> overlaps;            // (hat-q_t, hat-r_t), t = 0..T
  std::vector<double> effective_multiplications; // cost spent before hat-theta_t
  DebiasPlan plan;
};

/// Projection AMP engine for one trial. Holds references to the instance;
/// the instance must outlive the engine.
class ProjectionAmp {
public:
  /// `se_trajectory` provides (q_s, r_s) for asymptotic parameterization and
  /// must cover every class that will be referenced (T + 1 entries for a
  /// T-step run). Ignored for SESource::finite_n.
  ProjectionAmp(const SpikedInstance &instance, Denoiser denoiser, Vector f0,
                std::vector<OverlapPoint> se_trajectory = {}, AmpOptions options = {})
      : instance_(&instance), denoiser_(std::move(denoiser)), options_(options),
        schedule_(instance.n), se_(std::move(se_trajectory)) {
    if (static_cast<std::size_t>(f0.size()) != instance.n)
      throw ShapeError("ProjectionAmp: f0 length does not match the instance");
    history_.plan.mode = options.debias;
    if (options_.se_source == SESource::finite_n) {
      finite_se_ = finite_n_se_init(f0, instance.theta);
      se_ = finite_se_.overlaps;
    }
    record(std::move(f0), 0.0);
  }

  std::size_t t() const noexcept { return schedule_.t(); }
  const IterateHistory &history() const noexcept { return history_; }
  const ScheduleState &schedule_state() const noexcept { return schedule_; }
  std::span<const OverlapPoint> se() const noexcept { return se_; }

  /// x_t from delta_t, then hat-theta_{t+1}.
  void step(const UpdateMask &mask) {
    const std::size_t t = schedule_.t();
    if (mask.t != t)
      throw InvalidParameter("ProjectionAmp::step: mask for t = " + std::to_string(mask.t) +
                             " given at t = " + std::to_string(t));
    const auto &M = instance_->M;
    const Vector &current = history_.estimates.back();
    Vector x = t == 0 ? Vector::Zero(current.size()) : history_.iterates.back();

    DebiasRow row{t, {}};
    if (t > 0) {
      row = debias_row(history_.iterates.back());
      history_.plan.add(row);
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.active(i)) continue;
      const auto ii = static_cast<Eigen::Index>(i);
      double value = M.row(i).dot(current);
      for (const auto &[s, b] : row.b) value -= b * history_.estimates[s](ii);
      x(ii) = value;
    }
    schedule_.apply(mask);
    if (options_.se_source == SESource::finite_n) {
      finite_n_se_step(finite_se_, mask, denoiser_, instance_->theta, instance_->lambda, {}, options_.quad);
      se_ = finite_se_.overlaps;
    }
    const double cost = static_cast<double>(mask.active_count()) / static_cast<double>(mask.size());
    Vector next = denoise(x);
    history_.iterates.push_back(std::move(x));
    record(std::move(next), history_.effective_multiplications.back() + cost);
  }

private:
  DebiasRow debias_row(const Vector &x_prev) const {
    if (std::holds_alternative<SphereDenoiser>(denoiser_))
      return debias_sphere(x_prev, schedule_, options_.debias, se_, instance_->lambda);
    const auto &eta = std::get<SeparableDenoiser>(denoiser_);
    if (options_.debias == DebiasMode::empirical)
      return debias_empirical(eta, x_prev, schedule_, se_, instance_->lambda);
    return debias_se_analytic(eta, instance_->theta, schedule_, se_, instance_->lambda, options_.quad);
  }

  /// f_{t+1}(x_t) with t + 1 == schedule_.t().
  Vector denoise(const Vector &x) const {
    if (std::holds_alternative<SphereDenoiser>(denoiser_)) return sphere_project(x);
    const auto &eta = std::get<SeparableDenoiser>(denoiser_);
    const double lambda = instance_->lambda;
    Vector out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const auto s = static_cast<std::size_t>(schedule_.tau(static_cast<std::size_t>(i)));
      const auto &pt = detail::overlap_at(se_, s);
      out(i) = eta(x(i), pt.q, lambda * pt.r);
    }
    return out;
  }

  void record(Vector estimate, double cost) {
    const double n = static_cast<double>(estimate.size());
    history_.overlaps.push_back({estimate.squaredNorm() / n, instance_->theta.dot(estimate) / n});
    history_.effective_multiplications.push_back(cost);
    history_.estimates.push_back(std::move(estimate));
  }

  const SpikedInstance *instance_;
  Denoiser denoiser_;
  AmpOptions options_;
  ScheduleState schedule_;
  std::vector<OverlapPoint> se_;
  SEState finite_se_;
  IterateHistory history_;
};

inline void projection_amp_step(ProjectionAmp &engine, const UpdateMask &mask) { engine.step(mask); }

/// T steps of projection AMP.
inline IterateHistory run(const SpikedInstance &instance, const Schedule &schedule, const Denoiser &denoiser,
                          const Vector &f0, std::size_t T, std::vector<OverlapPoint> se_trajectory = {},
                          AmpOptions options = {}) {
  if (T == 0) throw InvalidParameter("run: horizon T must be at least 1");
  if (schedule.n() != instance.n) throw ShapeError("run: schedule and instance dimensions differ");
  ProjectionAmp engine(instance, denoiser, f0, std::move(se_trajectory), options);
  for (std::size_t t = 0; t < T; ++t) engine.step(schedule.mask(t));
  return engine.history();
}

/// Power iteration with partial updates, unit-sphere convention:
///   x_{t+1} = Pi_t (M x_t - (1/n) sum_{s<t} w_s x_s / ||x_s||) / ||x_t|| + Pi_t^perp x_t
/// where w_s = w_{ts} are the class counts before delta_t is applied.
class PartialPowerIteration {
public:
  PartialPowerIteration(const SymmetricMatrix &M, Vector x0) : M_(&M), schedule_(M.n()) {
    if (static_cast<std::size_t>(x0.size()) != M.n())
      throw ShapeError("PartialPowerIteration: x0 length does not match M");
    push(std::move(x0));
  }

  std::size_t t() const noexcept { return schedule_.t(); }
  const std::vector<Vector> &iterates() const noexcept { return x_; }
  const ScheduleState &schedule_state() const noexcept { return schedule_; }

  /// x_{t+1} from x_t and delta_t.
  const Vector &step(const UpdateMask &mask) {
    const std::size_t t = schedule_.t();
    if (mask.t != t) throw InvalidParameter("PartialPowerIteration::step: mask/time mismatch");
    if (mask.size() != M_->n()) throw ShapeError("PartialPowerIteration::step: mask length mismatch");
    const double n = static_cast<double>(M_->n());
    const Vector &xt = x_.back();
    const double rt = norms_.back();
    Vector next = xt;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.active(i)) continue;
      const auto ii = static_cast<Eigen::Index>(i);
      double correction = 0.0;
      for (const auto &[s, w] : schedule_.class_counts())
        correction += static_cast<double>(w) / norms_[s] * x_[s](ii);
      next(ii) = (M_->row(i).dot(xt) - correction / n) / rt;
    }
    schedule_.apply(mask);
    push(std::move(next));
    return x_.back();
  }

private:
  void push(Vector x) {
    const double norm = x.norm();
    if (!(norm > 1e-12 * std::sqrt(static_cast<double>(x.size()))))
      throw DegenerateInput("PartialPowerIteration: iterate norm vanished");
    norms_.push_back(norm);
    x_.push_back(std::move(x));
  }

  const SymmetricMatrix *M_;
  ScheduleState schedule_;
  std::vector<Vector> x_;
  std::vector<double> norms_;
};

inline const Vector &power_partial_step(PartialPowerIteration &engine, const UpdateMask &mask) {
  return engine.step(mask);
}

/// Sphere-denoiser recursion with the random normalizations sqrt(n)/||x||
/// replaced by the deterministic 1/sqrt(alpha_t),
///   alpha_t = (1/n) sum_s w_ts (lambda^2 r_s^2 + q_s),
/// with (q_s, r_s) from the finite-n SE of this same recursion. A separable
/// linear projection AMP whose debiasing is exact. Returns x~_0 .. x~_{T-1}.
inline std::vector<Vector> alpha_scaled_recursion(const SpikedInstance &instance, const Schedule &schedule,
                                                  const Vector &f0, std::size_t T) {
  const double n = static_cast<double>(instance.n);
  SEState se = finite_n_se_init(f0, instance.theta);
  ScheduleState state(instance.n);
  std::vector<Vector> estimates{f0};
  std::vector<Vector> xs;
  const Denoiser sphere = SphereDenoiser{};
  for (std::size_t t = 0; t < T; ++t) {
    const auto mask = schedule.mask(t);
    Vector x = t == 0 ? Vector::Zero(f0.size()) : xs.back();
    DebiasRow row{t, {}};
    if (t > 0) {
      double alpha = (se.mean.squaredNorm() + se.var.sum()) / n;
      for (const auto &[s, count] : state.class_counts())
        row.b[s] = static_cast<double>(count) / (n * std::sqrt(alpha));
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.active(i)) continue;
      const auto ii = static_cast<Eigen::Index>(i);
      double value = instance.M.row(i).dot(estimates.back());
      for (const auto &[s, b] : row.b) value -= b * estimates[s](ii);
      x(ii) = value;
    }
    state.apply(mask);
    finite_n_se_step(se, mask, sphere, instance.theta, instance.lambda);
    const double alpha = (se.mean.squaredNorm() + se.var.sum()) / n;
    estimates.push_back(x / std::sqrt(alpha));
    xs.push_back(std::move(x));
  }
  return xs;
}

} // namespace opamp
