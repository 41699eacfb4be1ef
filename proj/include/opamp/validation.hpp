#pragma once

// Property suites with pinned sizes and seeds. Each returns a report of
// named checks that serializes to JSON; the CLI `validate` command and the
// acceptance binary both drive them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "opamp/amp.hpp"
#include "opamp/denoise.hpp"
#include "opamp/experiment.hpp"
#include "opamp/general.hpp"
#include "opamp/models.hpp"
#include "opamp/rng.hpp"
#include "opamp/schedules.hpp"
#include "opamp/state_evolution.hpp"

namespace opamp {

struct Check {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;
  /// Fraction of checks that must pass; 1 means all of them.
  double required_fraction = 1.0;

  std::size_t passed_count() const {
    return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const Check &c) { return c.passed; }));
  }
  bool passed() const {
    if (checks.empty()) return false;
    return static_cast<double>(passed_count()) >= required_fraction * static_cast<double>(checks.size()) - 1e-12;
  }
};

inline void to_json(nlohmann::json &j, const Check &c) {
  j = nlohmann::json{{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"tolerance", c.tolerance}};
  if (!c.detail.empty()) j["detail"] = c.detail;
}

inline void to_json(nlohmann::json &j, const SuiteReport &r) {
  j = nlohmann::json{{"suite", r.suite},
                     {"passed", r.passed()},
                     {"checks_passed", r.passed_count()},
                     {"checks_total", r.checks.size()},
                     {"required_fraction", r.required_fraction},
                     {"checks", r.checks}};
}

/// Diagonal matrix of a mask.
inline Matrix projector_matrix(const UpdateMask &mask) {
  Vector d(static_cast<Eigen::Index>(mask.size()));
  for (std::size_t i = 0; i < mask.size(); ++i) d(static_cast<Eigen::Index>(i)) = mask.active(i) ? 1.0 : 0.0;
  return d.asDiagonal();
}

/// Random masks with delta_0 = 1 and a per-case density.
inline std::vector<UpdateMask> random_masks(std::size_t n, std::size_t T, Rng &rng) {
  const double density = 0.15 + 0.7 * rng.uniform();
  std::vector<UpdateMask> masks;
  for (std::size_t t = 0; t < T; ++t) {
    UpdateMask m{t, std::vector<std::uint8_t>(n, 1)};
    if (t > 0)
      for (auto &d : m.delta) d = rng.bernoulli(density) ? 1 : 0;
    masks.push_back(std::move(m));
  }
  return masks;
}

/// Class counts against tr(Pi_{t-1}^perp ... Pi_{s+1}^perp Pi_s) by dense
/// products, exact integer equality.
inline SuiteReport validate_traces(std::size_t cases = 50, Seed seed = 20240501) {
  SuiteReport report{"traces", {}, 1.0};
  Rng rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 16.0);
    const std::size_t T = 1 + static_cast<std::size_t>(rng.uniform() * 8.0);
    const auto masks = random_masks(n, T, rng);
    ScheduleState state(n);
    const auto N = static_cast<Eigen::Index>(n);
    std::size_t mismatches = 0, compared = 0;
    for (std::size_t t = 1; t <= T; ++t) {
      state.apply(masks[t - 1]);
      for (std::size_t s = 0; s < t; ++s) {
        Matrix P = projector_matrix(masks[s]);
        for (std::size_t r = s + 1; r < t; ++r) P = (Matrix::Identity(N, N) - projector_matrix(masks[r])) * P;
        const auto dense = static_cast<long long>(std::llround(P.trace()));
        ++compared;
        if (dense != static_cast<long long>(state.trace_weight(s))) ++mismatches;
      }
    }
    report.checks.push_back({"case " + std::to_string(c) + " (n=" + std::to_string(n) + ", T=" + std::to_string(T) + ")",
                             mismatches == 0, static_cast<double>(mismatches), 0.0,
                             std::to_string(compared) + " traces compared"});
  }
  return report;
}

/// Block unitriangular identity for random autoregressive weights.
inline SuiteReport validate_inverse(std::size_t cases = 20, Seed seed = 20240502) {
  SuiteReport report{"inverse", {}, 1.0};
  Rng rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 8.0);
    const std::size_t T = 1 + static_cast<std::size_t>(rng.uniform() * 6.0);
    MemoryMatrices memory(n, T);
    const auto N = static_cast<Eigen::Index>(n);
    const double scale = 0.5 / std::sqrt(static_cast<double>(n));
    for (std::size_t t = 1; t <= T; ++t)
      for (std::size_t s = 0; s < t; ++s) {
        if (rng.uniform() < 0.25) continue;
        Matrix A(N, N);
        for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = scale * rng.gaussian();
        memory.set_A(t, s, std::move(A));
      }
    const double residual = memory.inverse_residual();
    report.checks.push_back({"case " + std::to_string(c) + " (n=" + std::to_string(n) + ", T=" + std::to_string(T) + ")",
                             residual <= 1e-12, residual, 1e-12, ""});
  }
  return report;
}

struct DerivativeGrid {
  std::vector<double> y{-3.0, -1.0, -0.3, 0.0, 0.3, 1.0, 3.0};
  std::vector<double> v{0.5, 1.0, 2.0};
  std::vector<double> w{0.0, 0.5, 1.2, 2.0};
  double step = 1e-5;
  double tolerance = 1e-6;
};

/// Analytic derivative against the central difference, with error measured
/// relative to max(|derivative|, 1).
inline SuiteReport validate_derivatives(const DerivativeGrid &grid = {}) {
  SuiteReport report{"derivatives", {}, 1.0};
  const std::vector<std::pair<std::string, SeparableDenoiser>> denoisers = {
      {"bayes/rademacher", bayes_denoiser(PriorSpec::rademacher())},
      {"bayes/three-point",
       bayes_denoiser(PriorSpec::discrete({-std::numbers::sqrt2, 0.0, std::numbers::sqrt2}, {0.25, 0.5, 0.25}))},
      {"bayes/asymmetric", bayes_denoiser(PriorSpec::discrete({-0.5, 2.0}, {0.8, 0.2}))},
      {"identity", identity_denoiser()},
      {"linear", linear_denoiser(0.7)},
  };
  for (const auto &[name, eta] : denoisers) {
    double worst = 0.0;
    std::string where;
    for (double y : grid.y)
      for (double v : grid.v)
        for (double w : grid.w) {
          const double fd = (eta(y + grid.step, v, w) - eta(y - grid.step, v, w)) / (2.0 * grid.step);
          const double an = eta.derivative(y, v, w);
          const double err = std::abs(an - fd) / std::max(std::abs(an), 1.0);
          if (err > worst) {
            worst = err;
            where = "y=" + format_number(y) + " v=" + format_number(v) + " w=" + format_number(w);
          }
        }
    report.checks.push_back({name, worst <= grid.tolerance, worst, grid.tolerance, "worst at " + where});
  }
  return report;
}

struct GaussianityOptions {
  std::size_t n = 500;
  std::size_t T = 5;
  std::size_t trials = 200;
  double lambda = 1.5;
  double rho0 = 0.3;
  double gamma = 0.4;
  double z_limit = 3.0;
  double required_fraction = 0.95;
  Seed seed = 20240503;
  std::size_t workers = 0;
};

/// Per-class moments of x_t against the coordinatewise Gaussian model
/// x_{t,i} ~ N(lambda r_s theta_i, q_s) for the class s = tau(t+1, i).
/// theta, f0 and the masks are fixed; Z is redrawn per trial. Predictions
/// come from the finite-n SE of the realized masks, which also parameterizes
/// the Bayes denoiser.
inline SuiteReport validate_gaussianity(const GaussianityOptions &o = {}) {
  SuiteReport report{"gaussianity", {}, o.required_fraction};
  const SharedDraws shared = shared_draws(o.n, o.seed, o.rho0);
  const Schedule schedule = random_update(o.n, o.gamma, derive_seed(o.seed, 7));
  const Denoiser denoiser = bayes_denoiser(PriorSpec::rademacher());

  // Deterministic SE and the class structure shared by every trial.
  SEState se = finite_n_se_init(shared.f0, shared.theta);
  std::vector<std::vector<std::ptrdiff_t>> classes; // classes[t][i] = tau(t+1, i)
  for (std::size_t t = 0; t < o.T; ++t) {
    finite_n_se_step(se, schedule.mask(t), denoiser, shared.theta, o.lambda);
    classes.push_back(se.classes.last_update());
  }

  // cells keyed by (t, s): per-trial first and second moments.
  using Cell = std::pair<std::size_t, std::size_t>;
  std::vector<std::map<Cell, std::pair<double, double>>> per_trial(o.trials);
  AmpOptions amp;
  amp.se_source = SESource::finite_n;
  parallel_for(o.trials, o.workers ? o.workers : worker_count(), [&](std::size_t k) {
    const auto instance =
        build_spiked(o.lambda, shared.theta, sample_goe(o.n, noise_seed(trial_seed(o.seed, k))));
    const auto history = run(instance, schedule, denoiser, shared.f0, o.T, {}, amp);
    auto &cells = per_trial[k];
    std::map<Cell, std::size_t> sizes;
    for (std::size_t t = 0; t < o.T; ++t)
      for (std::size_t i = 0; i < o.n; ++i) {
        const Cell key{t, static_cast<std::size_t>(classes[t][i])};
        const double x = history.iterates[t](static_cast<Eigen::Index>(i));
        auto &acc = cells[key];
        acc.first += shared.theta(static_cast<Eigen::Index>(i)) * x;
        acc.second += x * x;
        ++sizes[key];
      }
    for (auto &[key, acc] : cells) {
      acc.first /= static_cast<double>(sizes[key]);
      acc.second /= static_cast<double>(sizes[key]);
    }
  });

  const double K = static_cast<double>(o.trials);
  for (const auto &[key, unused] : per_trial.front()) {
    const auto [t, s] = key;
    const auto &pt = se.overlaps[s];
    const double pred_mean = o.lambda * pt.r;
    const double pred_m2 = o.lambda * o.lambda * pt.r * pt.r + pt.q;
    for (int which = 0; which < 2; ++which) {
      double sum = 0.0;
      for (const auto &cells : per_trial) sum += which == 0 ? cells.at(key).first : cells.at(key).second;
      const double mean = sum / K;
      double ss = 0.0;
      for (const auto &cells : per_trial) {
        const double v = which == 0 ? cells.at(key).first : cells.at(key).second;
        ss += (v - mean) * (v - mean);
      }
      const double se_mean = std::sqrt(ss / (K - 1.0) / K);
      const double pred = which == 0 ? pred_mean : pred_m2;
      const double z = se_mean > 0.0 ? std::abs(mean - pred) / se_mean : (mean == pred ? 0.0 : INFINITY);
      report.checks.push_back({std::string(which == 0 ? "mean" : "second moment") + " t=" + std::to_string(t) +
                                   " s=" + std::to_string(s),
                               z <= o.z_limit, z, o.z_limit,
                               "empirical " + format_number(mean) + " predicted " + format_number(pred)});
    }
  }
  return report;
}

struct ScaleEquivalenceOptions {
  std::size_t n = 5000;
  std::size_t T = 21; // x_0 .. x_20
  double lambda = std::numbers::sqrt2;
  double rho0 = 0.1;
  double tolerance = 0.05;
  Seed seed = 20240504;
  std::size_t workers = 0;
};

/// Sphere-normalized projection AMP against the alpha-scaled recursion from
/// the same initialization, for the three protocols.
inline SuiteReport validate_scale_equivalence(const ScaleEquivalenceOptions &o = {}) {
  SuiteReport report{"appendixF", {}, 1.0};
  const SharedDraws shared = shared_draws(o.n, o.seed, o.rho0);
  const SpikedInstance instance =
      build_spiked(o.lambda, shared.theta, sample_goe(o.n, noise_seed(trial_seed(o.seed, 0))));
  const std::vector<std::pair<std::string, Schedule>> schedules = {
      {"full", full_matrix(o.n)},
      {"random", random_update(o.n, 0.1, derive_seed(o.seed, 9))},
      {"round_robin", round_robin(o.n, 10)},
  };
  std::vector<Check> checks(schedules.size());
  parallel_for(schedules.size(), o.workers ? o.workers : worker_count(), [&](std::size_t p) {
    const auto &[name, schedule] = schedules[p];
    const auto target = run(instance, schedule, SphereDenoiser{}, shared.f0, o.T);
    const auto comparison = alpha_scaled_recursion(instance, schedule, shared.f0, o.T);
    double worst = 0.0, worst_angle = 0.0;
    std::size_t at = 0;
    for (std::size_t t = 0; t < o.T; ++t) {
      const auto &a = target.iterates[t];
      const auto &b = comparison[t];
      const double d = (a - b).norm() / std::sqrt(static_cast<double>(o.n));
      if (d > worst) {
        worst = d;
        at = t;
      }
      // Direction-only gap: separates a global scale drift from a change of direction.
      worst_angle = std::max(worst_angle, 1.0 - std::abs(a.dot(b)) / (a.norm() * b.norm()));
    }
    std::ostringstream detail;
    detail << "largest at t=" << at << ", scale ratio there " << std::setprecision(6)
           << comparison[at].norm() / target.iterates[at].norm() << ", max 1-|cos| " << worst_angle;
    checks[p] = {name, worst <= o.tolerance, worst, o.tolerance, detail.str()};
  });
  report.checks = std::move(checks);
  return report;
}

inline const std::vector<std::string> &suite_names() {
  static const std::vector<std::string> names{"traces", "inverse", "gaussianity", "appendixF", "derivatives"};
  return names;
}

inline SuiteReport run_suite(const std::string &name) {
  if (name == "traces") return validate_traces();
  if (name == "inverse") return validate_inverse();
  if (name == "gaussianity") return validate_gaussianity();
  if (name == "appendixF") return validate_scale_equivalence();
  if (name == "derivatives") return validate_derivatives();
  throw InvalidParameter("unknown suite '" + name + "'");
}

} // namespace opamp
