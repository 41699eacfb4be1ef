#pragma once

// State evolution for projection AMP on the spiked model.
//
// Finite-n SE tracks y_t coordinatewise: a coordinate last updated at s is
// N(lambda r_s theta_i, q_s), so (q_t, r_t) follow from one-dimensional
// Gaussian expectations grouped by (last-update time, theta_i).
//
// Asymptotic SE replaces the realized class fractions with the protocol's
// limiting measure p_t(s):
//   sigma2_t = sum_s psi(sigma2_s, lambda rho_s) p_t(s)
//   rho_t    = sum_s phi(sigma2_s, lambda rho_s) p_t(s)
// with closed forms for the sphere (power) and Bayes kernels.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "opamp/denoise.hpp"
#include "opamp/errors.hpp"
#include "opamp/quadrature.hpp"
#include "opamp/schedules.hpp"

namespace opamp {

/// (q_t, r_t) at finite n, or (sigma2_t, rho_t) in the limit.
struct OverlapPoint {
  double q = 1.0;
  double r = 0.0;
};

/// Finite-n SE. overlaps[s] = (q_s, r_s) of the estimate hat-theta_s;
/// mean/var describe y_{t-1} once at least one mask has been applied.
struct SEState {
  std::vector<OverlapPoint> overlaps;
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
  ScheduleState classes;

  std::size_t t() const noexcept { return classes.t(); }
};

/// q_0 = ||f0||^2 / n, r_0 = <theta, f0> / n.
inline SEState finite_n_se_init(const Eigen::VectorXd &f0, const Eigen::VectorXd &theta) {
  if (f0.size() != theta.size()) throw ShapeError("finite_n_se_init: f0 and theta differ in length");
  const double n = static_cast<double>(f0.size());
  SEState se;
  se.overlaps.push_back({f0.squaredNorm() / n, theta.dot(f0) / n});
  se.mean = Eigen::VectorXd::Zero(f0.size());
  se.var = Eigen::VectorXd::Zero(f0.size());
  se.classes = ScheduleState(static_cast<std::size_t>(f0.size()));
  return se;
}

/// Parameters of class s: the caller-supplied table when given, otherwise
/// the SE's own (q_s, lambda r_s).
inline ChannelParams class_params(const SEState &se, std::span<const ChannelParams> params,
                                  std::size_t s, double lambda) {
  if (!params.empty()) {
    if (s >= params.size())
      throw MissingState("no denoiser parameters for class s = " + std::to_string(s));
    return params[s];
  }
  if (s >= se.overlaps.size()) throw MissingState("no SE overlaps for class s = " + std::to_string(s));
  return {se.overlaps[s].q, lambda * se.overlaps[s].r};
}

/// Consumes delta_t: updates the law of y_t, then appends (q_{t+1}, r_{t+1})
/// for hat-theta_{t+1} = f_{t+1}(y_t). `params` may be empty, in which case
/// the denoiser is parameterized by the SE's own overlaps.
inline void finite_n_se_step(SEState &se, const UpdateMask &mask, const Denoiser &denoiser,
                             const Eigen::VectorXd &theta, double lambda,
                             std::span<const ChannelParams> params = {},
                             int quad = kDefaultQuadOrder) {
  const std::size_t t = se.t();
  if (se.overlaps.size() != t + 1)
    throw MissingState("finite_n_se_step: SE has " + std::to_string(se.overlaps.size()) +
                       " overlaps at t = " + std::to_string(t));
  if (static_cast<Eigen::Index>(mask.size()) != theta.size())
    throw ShapeError("finite_n_se_step: mask length does not match theta");
  const auto [q_t, r_t] = se.overlaps[t];
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask.active(i)) continue;
    const auto ii = static_cast<Eigen::Index>(i);
    se.mean(ii) = lambda * r_t * theta(ii);
    se.var(ii) = q_t;
  }
  se.classes.apply(mask);

  const double n = static_cast<double>(theta.size());
  if (std::holds_alternative<SphereDenoiser>(denoiser)) {
    // f(y) = sqrt(n) y / ||y|| concentrates on y / sqrt(alpha) with
    // alpha = E||y||^2 / n.
    const double alpha = (se.mean.squaredNorm() + se.var.sum()) / n;
    if (!(alpha > 0.0)) throw DegenerateInput("finite_n_se_step: iterate has zero second moment");
    se.overlaps.push_back({1.0, theta.dot(se.mean) / (n * std::sqrt(alpha))});
    return;
  }

  const auto &eta = std::get<SeparableDenoiser>(denoiser);
  // Coordinates sharing (tau, theta_i) share the same scalar Gaussian channel.
  std::map<std::pair<std::ptrdiff_t, double>, std::size_t> groups;
  for (Eigen::Index i = 0; i < theta.size(); ++i)
    ++groups[{se.classes.tau(static_cast<std::size_t>(i)), theta(i)}];
  const auto rule = gaussian_rule(quad);
  double q_next = 0.0, r_next = 0.0;
  for (const auto &[key, count] : groups) {
    const auto [s, u] = key;
    const auto su = static_cast<std::size_t>(s);
    const auto [v, w] = class_params(se, params, su, lambda);
    const double centre = lambda * se.overlaps[su].r * u;
    const double sd = std::sqrt(se.overlaps[su].q);
    double e1 = 0.0, e2 = 0.0;
    const auto &nodes = rule->nodes();
    const auto &weights = rule->weights();
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const double val = eta(centre + sd * nodes[k], v, w);
      e1 += weights[k] * val;
      e2 += weights[k] * val * val;
    }
    q_next += static_cast<double>(count) * e2;
    r_next += static_cast<double>(count) * u * e1;
  }
  se.overlaps.push_back({q_next / n, r_next / n});
}

namespace detail {

inline void check_measure(std::span<const double> p, std::size_t history) {
  if (p.size() != history)
    throw InvalidMeasure("measure has " + std::to_string(p.size()) + " entries but the history has " +
                         std::to_string(history));
  double total = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw InvalidMeasure("measure has a negative entry");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidMeasure("measure does not sum to 1");
}

/// lambda^2 rho^2 / sigma2; zero signal means zero SNR even when sigma2 = 0
/// (a constant estimator).
inline double bayes_snr(const OverlapPoint &pt, double lambda, const char *who) {
  const double w = lambda * pt.r;
  if (w == 0.0) return 0.0;
  check_variance(pt.q, who);
  return w * w / pt.q;
}

} // namespace detail

using PsiPhiKernel = std::function<PsiPhi(double v, double w)>;

/// One step of the asymptotic SE for a separable denoiser.
inline OverlapPoint asymptotic_se_step(std::span<const OverlapPoint> history, std::span<const double> p,
                                       const PsiPhiKernel &kernel, double lambda) {
  detail::check_measure(p, history.size());
  OverlapPoint out{0.0, 0.0};
  for (std::size_t s = 0; s < history.size(); ++s) {
    if (p[s] == 0.0) continue;
    const auto k = kernel(history[s].q, lambda * history[s].r);
    out.q += k.psi * p[s];
    out.r += k.phi * p[s];
  }
  return out;
}

/// Bayes SE: rho_t = sum_s Psi(lambda^2 rho_s^2 / sigma2_s) p_t(s). For s >= 1
/// sigma2_s = rho_s and the argument reduces to lambda^2 rho_s; the general
/// form also covers an initialization with sigma2_0 != rho_0.
inline OverlapPoint bayes_se_step(std::span<const OverlapPoint> history, std::span<const double> p,
                                  double lambda, const PriorSpec &prior, int quad = kDefaultQuadOrder) {
  detail::check_measure(p, history.size());
  double rho = 0.0;
  for (std::size_t s = 0; s < history.size(); ++s) {
    if (p[s] == 0.0) continue;
    rho += big_psi(prior, detail::bayes_snr(history[s], lambda, "bayes_se_step"), quad) * p[s];
  }
  return {rho, rho};
}

/// Sphere-projection SE:
///   rho_t = lambda sum_s rho_s p_t(s) / sqrt(sum_s (lambda^2 rho_s^2 + q_s) p_t(s)),
/// with q_s = 1 on the sphere. The second moment stays 1.
inline OverlapPoint power_se_step(std::span<const OverlapPoint> history, std::span<const double> p,
                                  double lambda) {
  detail::check_measure(p, history.size());
  double num = 0.0, den = 0.0;
  for (std::size_t s = 0; s < history.size(); ++s) {
    num += history[s].r * p[s];
    den += (lambda * lambda * history[s].r * history[s].r + history[s].q) * p[s];
  }
  return {1.0, lambda * num / std::sqrt(den)};
}

struct FixedPointResult {
  double rho = 0.0;
  int iterations = 0;
};

/// Plain iteration rho <- map(rho) until successive iterates differ by less
/// than tol.
inline FixedPointResult fixed_point(const std::function<double(double)> &map, double rho0, double tol,
                                    int max_iter) {
  if (!(tol > 0.0)) throw InvalidParameter("fixed_point: tol must be positive");
  double rho = rho0;
  for (int k = 1; k <= max_iter; ++k) {
    const double next = map(rho);
    if (std::abs(next - rho) < tol) return {next, k};
    rho = next;
  }
  throw NonConvergence("fixed_point: no convergence within " + std::to_string(max_iter) + " iterations",
                       rho, max_iter);
}

struct PowerKernel {};
struct BayesKernel {
  PriorSpec prior;
  int quad = kDefaultQuadOrder;
};
struct SeparableKernel {
  PriorSpec prior;
  SeparableDenoiser denoiser;
  int quad = kDefaultQuadOrder;
};
using SEKernel = std::variant<PowerKernel, BayesKernel, SeparableKernel>;

/// Asymptotic trajectory (sigma2_t, rho_t), t = 0..T, under the protocol's
/// limiting measure. rho0 is the initialization overlap and sigma2_0 its
/// second moment.
inline std::vector<OverlapPoint> predict_trajectory(const ScheduleSpec &protocol, const SEKernel &kernel,
                                                    double lambda, double rho0, std::size_t T,
                                                    double sigma2_0 = 1.0) {
  std::vector<OverlapPoint> traj{{sigma2_0, rho0}};
  traj.reserve(T + 1);
  // psi/phi and Psi depend on s only through the state at s, so cache them.
  std::vector<PsiPhi> cache;
  auto kernel_at = [&](std::size_t s) -> const PsiPhi & {
    while (cache.size() <= s) {
      const auto &pt = traj[cache.size()];
      PsiPhi k;
      if (const auto *b = std::get_if<BayesKernel>(&kernel)) {
        k.psi = k.phi = big_psi(b->prior, detail::bayes_snr(pt, lambda, "predict_trajectory"), b->quad);
      } else if (const auto *c = std::get_if<SeparableKernel>(&kernel)) {
        k = psi_phi(c->prior, c->denoiser, pt.q, lambda * pt.r, c->quad);
      }
      cache.push_back(k);
    }
    return cache[s];
  };
  for (std::size_t t = 1; t <= T; ++t) {
    const auto p = limiting_measure(protocol, t);
    if (std::holds_alternative<PowerKernel>(kernel)) {
      traj.push_back(power_se_step(traj, p, lambda));
      continue;
    }
    OverlapPoint next{0.0, 0.0};
    for (std::size_t s = 0; s < t; ++s) {
      if (p[s] == 0.0) continue;
      const auto &k = kernel_at(s);
      next.q += k.psi * p[s];
      next.r += k.phi * p[s];
    }
    traj.push_back(next);
  }
  return traj;
}

/// Denoiser parameters (sigma2_s, lambda rho_s) read off a trajectory.
inline std::vector<ChannelParams> channel_params(std::span<const OverlapPoint> traj, double lambda) {
  std::vector<ChannelParams> out;
  out.reserve(traj.size());
  for (const auto &pt : traj) out.push_back({pt.q, lambda * pt.r});
  return out;
}

} // namespace opamp
