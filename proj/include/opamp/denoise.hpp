#pragma once

// Denoisers and the scalar expectation kernels that drive state evolution.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "opamp/errors.hpp"
#include "opamp/quadrature.hpp"

namespace opamp {

/// Finite discrete prior with unit second moment. Rademacher is kept as its
/// own kind so the conditional mean can use the closed form tanh(w y / v).
struct PriorSpec {
  enum class Kind { rademacher, discrete };

  Kind kind = Kind::rademacher;
  std::vector<double> atoms{-1.0, 1.0};
  std::vector<double> weights{0.5, 0.5};
  double second_moment = 1.0;

  static PriorSpec rademacher() { return {}; }

  static PriorSpec discrete(std::vector<double> atoms, std::vector<double> weights) {
    if (atoms.empty() || atoms.size() != weights.size())
      throw InvalidParameter("PriorSpec: atoms and weights must be nonempty and of equal length");
    double total = 0.0, m2 = 0.0;
    for (std::size_t k = 0; k < atoms.size(); ++k) {
      if (!(weights[k] >= 0.0)) throw InvalidParameter("PriorSpec: weights must be nonnegative");
      total += weights[k];
      m2 += weights[k] * atoms[k] * atoms[k];
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidParameter("PriorSpec: weights must sum to 1");
    if (std::abs(m2 - 1.0) > 1e-9) throw InvalidParameter("PriorSpec: second moment must be 1");
    PriorSpec p;
    p.kind = Kind::discrete;
    p.atoms = std::move(atoms);
    p.weights = std::move(weights);
    p.second_moment = m2;
    return p;
  }

  double mean() const {
    double m = 0.0;
    for (std::size_t k = 0; k < atoms.size(); ++k) m += weights[k] * atoms[k];
    return m;
  }

  double max_abs_atom() const {
    double m = 0.0;
    for (double a : atoms) m = std::max(m, std::abs(a));
    return m;
  }
};

inline void to_json(nlohmann::json &j, const PriorSpec &p) {
  j = nlohmann::json{{"kind", p.kind == PriorSpec::Kind::rademacher ? "rademacher" : "discrete"},
                     {"atoms", p.atoms},
                     {"weights", p.weights}};
}

inline void from_json(const nlohmann::json &j, PriorSpec &p) {
  const auto kind = j.value("kind", std::string("rademacher"));
  if (kind == "rademacher") {
    p = PriorSpec::rademacher();
  } else if (kind == "discrete") {
    p = PriorSpec::discrete(j.at("atoms").get<std::vector<double>>(),
                            j.at("weights").get<std::vector<double>>());
  } else {
    throw InvalidParameter("PriorSpec: unknown kind '" + kind + "'");
  }
}

namespace detail {

inline void check_variance(double v, const char *who) {
  if (!(v > 0.0)) throw InvalidVariance(std::string(who) + ": variance must be positive");
}

/// Posterior first and second moments of U given y = w U + sqrt(v) Z,
/// stabilized by subtracting the largest exponent.
inline std::pair<double, double> posterior_moments(const PriorSpec &prior, double y, double v, double w) {
  double top = -std::numeric_limits<double>::infinity();
  const std::size_t k = prior.atoms.size();
  std::vector<double> expo(k, -std::numeric_limits<double>::infinity());
  for (std::size_t a = 0; a < k; ++a) {
    if (prior.weights[a] <= 0.0) continue;
    const double u = prior.atoms[a];
    expo[a] = std::log(prior.weights[a]) + (w * u * y) / v - (w * w * u * u) / (2.0 * v);
    top = std::max(top, expo[a]);
  }
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    if (prior.weights[a] <= 0.0) continue;
    const double e = std::exp(expo[a] - top);
    const double u = prior.atoms[a];
    z += e;
    m1 += u * e;
    m2 += u * u * e;
  }
  return {m1 / z, m2 / z};
}

} // namespace detail

/// Conditional mean E[U | w U + sqrt(v) Z = y] under the prior.
inline double cond_mean(const PriorSpec &prior, double y, double v, double w) {
  detail::check_variance(v, "cond_mean");
  if (prior.kind == PriorSpec::Kind::rademacher) return std::tanh(w * y / v);
  return detail::posterior_moments(prior, y, v, w).first;
}

/// d/dy of cond_mean, equal to (w / v) Var(U | y).
inline double cond_mean_derivative(const PriorSpec &prior, double y, double v, double w) {
  detail::check_variance(v, "cond_mean_derivative");
  if (prior.kind == PriorSpec::Kind::rademacher) {
    const double th = std::tanh(w * y / v);
    return (w / v) * (1.0 - th * th);
  }
  const auto [m1, m2] = detail::posterior_moments(prior, y, v, w);
  return (w / v) * std::max(0.0, m2 - m1 * m1);
}

/// Scalar map eta(y; v, w) together with its derivative in y. The building
/// block of separable denoisers f_{ti}(x) = eta(x_i; q_{tau(t,i)}, lambda r_{tau(t,i)}).
struct SeparableDenoiser {
  using Scalar3 = std::function<double(double, double, double)>;

  std::string name;
  Scalar3 eta;
  Scalar3 deta_dy;

  double operator()(double y, double v, double w) const { return eta(y, v, w); }
  double derivative(double y, double v, double w) const { return deta_dy(y, v, w); }
};

inline SeparableDenoiser identity_denoiser() {
  return {"identity", [](double y, double, double) { return y; },
          [](double, double, double) { return 1.0; }};
}

/// eta(y) = gain * y.
inline SeparableDenoiser linear_denoiser(double gain) {
  return {"linear", [gain](double y, double, double) { return gain * y; },
          [gain](double, double, double) { return gain; }};
}

inline SeparableDenoiser bayes_denoiser(PriorSpec prior) {
  return {"bayes",
          [prior](double y, double v, double w) { return cond_mean(prior, y, v, w); },
          [prior](double y, double v, double w) { return cond_mean_derivative(prior, y, v, w); }};
}

/// Projection onto the sphere of radius sqrt(n). Not separable; engines
/// special-case it.
struct SphereDenoiser {};

using Denoiser = std::variant<SphereDenoiser, SeparableDenoiser>;

/// Per-class denoiser parameters (v, w) = (q_s, lambda r_s) for the class of
/// coordinates last updated at s.
struct ChannelParams {
  double v = 1.0;
  double w = 0.0;
};

/// sqrt(n) x / ||x||.
inline Eigen::VectorXd sphere_project(const Eigen::VectorXd &x) {
  const double n = static_cast<double>(x.size());
  const double norm = x.norm();
  if (x.size() == 0 || !(norm > 1e-12 * std::sqrt(n)))
    throw DegenerateInput("sphere_project: input norm is numerically zero");
  return (std::sqrt(n) / norm) * x;
}

struct PsiPhi {
  double psi = 0.0;
  double phi = 0.0;
};

/// psi(v, w) = E[eta(w U + sqrt(v) Z; v, w)^2] and phi(v, w) = E[U eta(...)],
/// with U from the prior and Z standard normal.
inline PsiPhi psi_phi(const PriorSpec &prior, const SeparableDenoiser &denoiser, double v, double w,
                      int quad = kDefaultQuadOrder) {
  detail::check_variance(v, "psi_phi");
  const auto rule = gaussian_rule(quad);
  const double sd = std::sqrt(v);
  PsiPhi out;
  for (std::size_t a = 0; a < prior.atoms.size(); ++a) {
    const double u = prior.atoms[a];
    const double pa = prior.weights[a];
    if (pa <= 0.0) continue;
    double e1 = 0.0, e2 = 0.0;
    const auto &nodes = rule->nodes();
    const auto &weights = rule->weights();
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const double val = denoiser(w * u + sd * nodes[k], v, w);
      e1 += weights[k] * val;
      e2 += weights[k] * val * val;
    }
    out.psi += pa * e2;
    out.phi += pa * u * e1;
  }
  return out;
}

/// Overlap of the Bayes-optimal estimate in the scalar channel
/// Y = sqrt(gamma) U + Z, i.e. E[U E[U | Y]].
inline double big_psi(const PriorSpec &prior, double gamma, int quad = kDefaultQuadOrder) {
  if (!(gamma >= 0.0)) throw InvalidParameter("big_psi: gamma must be nonnegative");
  const auto rule = gaussian_rule(quad);
  if (gamma == 0.0) {
    const double m = prior.mean();
    return m * m;
  }
  const double root = std::sqrt(gamma);
  double acc = 0.0;
  for (std::size_t a = 0; a < prior.atoms.size(); ++a) {
    const double u = prior.atoms[a];
    if (prior.weights[a] <= 0.0 || u == 0.0) continue;
    acc += prior.weights[a] * u *
           rule->expect([&](double z) { return cond_mean(prior, root * u + z, 1.0, root); });
  }
  return acc;
}

} // namespace opamp
