#pragma once

// Monte Carlo experiments on the spiked model: configuration, seeding,
// trial fan-out and the CSV tables behind the correlation curves.
//
// Seeding. theta and the direction used to build f0 come from two reserved
// streams of the master seed and are shared by every trial. Trial i uses
// trial_seed = derive_seed(master_seed, i); its noise matrix is drawn from
// derive_seed(trial_seed, 1) and the schedule of protocol p from
// derive_seed(trial_seed, 16 + p). All protocols of a trial see the same Z.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "opamp/amp.hpp"
#include "opamp/denoise.hpp"
#include "opamp/errors.hpp"
#include "opamp/models.hpp"
#include "opamp/rng.hpp"
#include "opamp/schedules.hpp"
#include "opamp/state_evolution.hpp"

namespace opamp {

struct DenoiserSpec {
  enum class Kind { sphere, bayes };
  Kind kind = Kind::sphere;
  PriorSpec prior;
};

struct ProtocolEntry {
  ScheduleSpec spec;
  std::string label;
};

struct ExperimentConfig {
  std::size_t n = 0;
  double lambda = 0.0;
  std::vector<ProtocolEntry> protocols;
  DenoiserSpec denoiser;
  std::size_t T = 0;
  std::size_t trials = 1;
  Seed master_seed = 0;
  double rho0 = 0.0;
  std::string output_path;
  AmpOptions amp;
  /// Report |<theta, hat-theta_t>| / n. The sign of the estimate is not
  /// identifiable from M, so trials that lock onto -theta count as successes.
  bool absolute_correlation = true;
  /// Report r / sqrt(q) (the cosine between theta and hat-theta_t) instead
  /// of r. Identical for the sphere denoiser; makes estimates of different
  /// norms comparable.
  bool cosine = false;
};

/// Correlation statistic of an overlap point under the config's metric.
inline double correlation(const ExperimentConfig &c, const OverlapPoint &o) {
  double v = o.r;
  if (c.cosine) v = o.q > 0.0 ? o.r / std::sqrt(o.q) : 0.0;
  return c.absolute_correlation ? std::abs(v) : v;
}

inline std::string default_label(const ScheduleSpec &s) { return to_string(s.protocol); }

inline void validate(const ExperimentConfig &c) {
  if (c.n == 0) throw InvalidDimension("config: n must be at least 1");
  if (!(c.lambda >= 0.0)) throw InvalidParameter("config: lambda must be nonnegative");
  if (c.protocols.empty()) throw InvalidParameter("config: at least one protocol is required");
  if (c.T == 0) throw InvalidParameter("config: T must be at least 1");
  if (c.trials == 0) throw InvalidParameter("config: trials must be at least 1");
  if (!(c.rho0 >= 0.0 && c.rho0 <= 1.0)) throw InvalidParameter("config: rho0 must lie in [0, 1]");
  for (const auto &p : c.protocols) {
    if (p.spec.n != c.n) throw ShapeError("config: protocol dimension differs from n");
    make_schedule(p.spec); // surfaces invalid gamma / J
  }
  std::map<std::string, int> seen;
  for (const auto &p : c.protocols)
    if (++seen[p.label] > 1) throw InvalidParameter("config: duplicate protocol label '" + p.label + "'");
}

inline void from_json(const nlohmann::json &j, DenoiserSpec &d) {
  const auto kind = j.is_string() ? j.get<std::string>() : j.value("kind", std::string("sphere"));
  if (kind == "sphere") {
    d.kind = DenoiserSpec::Kind::sphere;
  } else if (kind == "bayes") {
    d.kind = DenoiserSpec::Kind::bayes;
    d.prior = j.is_object() && j.contains("prior") ? j.at("prior").get<PriorSpec>() : PriorSpec::rademacher();
  } else {
    throw InvalidParameter("config: unknown denoiser '" + kind + "'");
  }
}

inline void to_json(nlohmann::json &j, const DenoiserSpec &d) {
  if (d.kind == DenoiserSpec::Kind::sphere) {
    j = nlohmann::json{{"kind", "sphere"}};
  } else {
    j = nlohmann::json{{"kind", "bayes"}, {"prior", d.prior}};
  }
}

inline void from_json(const nlohmann::json &j, ExperimentConfig &c) {
  c.n = j.at("n").get<std::size_t>();
  c.lambda = j.at("lambda").get<double>();
  c.T = j.at("T").get<std::size_t>();
  c.trials = j.value("trials", std::size_t{1});
  c.master_seed = j.value("master_seed", Seed{0});
  c.rho0 = j.at("rho0").get<double>();
  c.output_path = j.value("output_path", std::string());
  c.denoiser = j.contains("denoiser") ? j.at("denoiser").get<DenoiserSpec>() : DenoiserSpec{};
  const auto sign = j.value("correlation", std::string("absolute"));
  if (sign != "absolute" && sign != "signed") throw InvalidParameter("config: correlation must be absolute or signed");
  c.absolute_correlation = sign == "absolute";
  const auto metric = j.value("metric", std::string("overlap"));
  if (metric != "overlap" && metric != "cosine") throw InvalidParameter("config: metric must be overlap or cosine");
  c.cosine = metric == "cosine";

  const auto debias = j.value("debias", std::string("empirical"));
  if (debias == "empirical") c.amp.debias = DebiasMode::empirical;
  else if (debias == "se_analytic") c.amp.debias = DebiasMode::se_analytic;
  else throw InvalidParameter("config: unknown debias mode '" + debias + "'");
  const auto source = j.value("se_source", std::string("asymptotic"));
  if (source == "asymptotic") c.amp.se_source = SESource::asymptotic;
  else if (source == "finite_n") c.amp.se_source = SESource::finite_n;
  else throw InvalidParameter("config: unknown se_source '" + source + "'");
  c.amp.quad = j.value("quad_order", kDefaultQuadOrder);

  std::vector<nlohmann::json> entries;
  if (j.contains("protocols")) {
    for (const auto &e : j.at("protocols")) entries.push_back(e);
  } else if (j.contains("protocol")) {
    entries.push_back(j.at("protocol"));
  }
  c.protocols.clear();
  for (auto e : entries) {
    if (e.is_string()) e = nlohmann::json{{"protocol", e}};
    ProtocolEntry p;
    p.spec = e.get<ScheduleSpec>();
    p.spec.n = c.n;
    p.label = e.value("label", default_label(p.spec));
    c.protocols.push_back(std::move(p));
  }
  validate(c);
}

inline ExperimentConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw InvalidParameter("config '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    return j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception &e) {
    throw InvalidParameter("config '" + path + "': " + e.what());
  }
}

inline constexpr std::uint64_t kSharedStream = ~std::uint64_t{0};

/// f0 = a theta + b g with g a seeded Gaussian direction orthogonalized
/// against theta and scaled to ||g||^2 = n, so <theta, f0>/n = rho0 and
/// ||f0||^2/n = 1.
inline Vector make_initialization(const Vector &theta, double rho0, Seed seed) {
  const double n = static_cast<double>(theta.size());
  const double tt = theta.squaredNorm();
  if (!(tt > 0.0)) throw DegenerateInput("make_initialization: theta is zero");
  Rng rng(seed);
  Vector g(theta.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = rng.gaussian();
  g -= (theta.dot(g) / tt) * theta;
  g *= std::sqrt(n) / g.norm();
  const double a = rho0 * n / tt;
  const double b2 = 1.0 - a * a * tt / n;
  if (b2 < 0.0) throw InvalidParameter("make_initialization: rho0 too large for this theta");
  return a * theta + std::sqrt(b2) * g;
}

struct SharedDraws {
  Vector theta;
  Vector f0;
};

inline SharedDraws shared_draws(std::size_t n, Seed master_seed, double rho0) {
  const Seed shared = derive_seed(master_seed, kSharedStream);
  SharedDraws d;
  d.theta = sample_rademacher_signal(n, derive_seed(shared, 0));
  d.f0 = make_initialization(d.theta, rho0, derive_seed(shared, 1));
  return d;
}

inline Seed trial_seed(Seed master_seed, std::size_t trial) { return derive_seed(master_seed, trial); }
inline Seed noise_seed(Seed trial) { return derive_seed(trial, 1); }
inline Seed schedule_seed(Seed trial, std::size_t protocol_index) { return derive_seed(trial, 16 + protocol_index); }

inline SEKernel se_kernel(const DenoiserSpec &d, int quad = kDefaultQuadOrder) {
  if (d.kind == DenoiserSpec::Kind::sphere) return PowerKernel{};
  return BayesKernel{d.prior, quad};
}

inline Denoiser make_denoiser(const DenoiserSpec &d) {
  if (d.kind == DenoiserSpec::Kind::sphere) return SphereDenoiser{};
  return bayes_denoiser(d.prior);
}

/// Asymptotic trajectory (sigma2_t, rho_t), t = 0..T, for one protocol.
inline std::vector<OverlapPoint> se_trajectory(const ExperimentConfig &c, const ScheduleSpec &spec) {
  return predict_trajectory(spec, se_kernel(c.denoiser, c.amp.quad), c.lambda, c.rho0, c.T);
}

/// Number of worker threads: OPAMP_WORKERS when set to a positive integer,
/// otherwise the hardware concurrency.
inline std::size_t worker_count() {
  if (const char *env = std::getenv("OPAMP_WORKERS")) {
    char *end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, count) on `workers` threads. The first exception
/// is rethrown after all threads finish.
template <class Job> void parallel_for(std::size_t count, std::size_t workers, Job &&job) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto body = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = count;
      }
    }
  };
  if (workers == 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto &th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
}

/// Per-protocol trajectories of one trial: r-hat_t and cumulative cost,
/// t = 0..T.
struct TrialResult {
  std::vector<std::vector<double>> corr;
  std::vector<std::vector<double>> eff_mults;
};

inline TrialResult run_trial(const ExperimentConfig &c, const SharedDraws &shared,
                             const std::vector<std::vector<OverlapPoint>> &trajectories, std::size_t trial) {
  const Seed ts = trial_seed(c.master_seed, trial);
  const SpikedInstance instance = build_spiked(c.lambda, shared.theta, sample_goe(c.n, noise_seed(ts)));
  const Denoiser denoiser = make_denoiser(c.denoiser);
  TrialResult out;
  for (std::size_t p = 0; p < c.protocols.size(); ++p) {
    ScheduleSpec spec = c.protocols[p].spec;
    spec.seed = schedule_seed(ts, p);
    const auto history = run(instance, make_schedule(spec), denoiser, shared.f0, c.T, trajectories[p], c.amp);
    std::vector<double> corr;
    corr.reserve(history.overlaps.size());
    for (const auto &o : history.overlaps) corr.push_back(correlation(c, o));
    out.corr.push_back(std::move(corr));
    out.eff_mults.push_back(history.effective_multiplications);
  }
  return out;
}

struct ResultRow {
  std::size_t iter = 0;
  std::string protocol;
  double se_corr = 0.0;
  double emp_corr_mean = 0.0;
  double emp_corr_sd = 0.0;
  double eff_mults = 0.0;
};

using ResultTable = std::vector<ResultRow>;

/// SE-only rows (emp columns left at zero).
inline ResultTable se_table(const ExperimentConfig &c) {
  ResultTable rows;
  for (const auto &p : c.protocols) {
    const auto traj = se_trajectory(c, p.spec);
    for (std::size_t t = 0; t <= c.T; ++t) rows.push_back({t, p.label, correlation(c, traj[t]), 0.0, 0.0, 0.0});
  }
  return rows;
}

/// Full Monte Carlo experiment. Rows are ordered by protocol, then t.
/// Per-trial results are reduced in trial order, so the table does not
/// depend on the number of workers.
inline ResultTable run_experiment(const ExperimentConfig &c, std::size_t workers = worker_count()) {
  validate(c);
  const SharedDraws shared = shared_draws(c.n, c.master_seed, c.rho0);
  std::vector<std::vector<OverlapPoint>> trajectories;
  for (const auto &p : c.protocols) trajectories.push_back(se_trajectory(c, p.spec));

  std::vector<TrialResult> results(c.trials);
  parallel_for(c.trials, workers, [&](std::size_t i) { results[i] = run_trial(c, shared, trajectories, i); });

  ResultTable rows;
  const double k = static_cast<double>(c.trials);
  for (std::size_t p = 0; p < c.protocols.size(); ++p) {
    for (std::size_t t = 0; t <= c.T; ++t) {
      double sum = 0.0, cost = 0.0;
      for (const auto &r : results) {
        sum += r.corr[p][t];
        cost += r.eff_mults[p][t];
      }
      const double mean = sum / k;
      double ss = 0.0;
      for (const auto &r : results) ss += (r.corr[p][t] - mean) * (r.corr[p][t] - mean);
      const double sd = c.trials > 1 ? std::sqrt(ss / (k - 1.0)) : 0.0;
      rows.push_back({t, c.protocols[p].label, correlation(c, trajectories[p][t]), mean, sd, cost / k});
    }
  }
  return rows;
}

/// printf("%.9g").
inline std::string format_number(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline constexpr const char *kRunHeader = "iter,protocol,se_corr,emp_corr_mean,emp_corr_sd,eff_mults";
inline constexpr const char *kSeHeader = "iter,protocol,se_corr";
inline constexpr const char *kMultsHeader = "eff_mults,protocol,iter,se_corr,emp_corr_mean,emp_corr_sd";

inline void write_run_csv(std::ostream &out, const ResultTable &rows) {
  out << kRunHeader << '\n';
  for (const auto &r : rows)
    out << r.iter << ',' << r.protocol << ',' << format_number(r.se_corr) << ',' << format_number(r.emp_corr_mean)
        << ',' << format_number(r.emp_corr_sd) << ',' << format_number(r.eff_mults) << '\n';
}

inline void write_se_csv(std::ostream &out, const ResultTable &rows) {
  out << kSeHeader << '\n';
  for (const auto &r : rows) out << r.iter << ',' << r.protocol << ',' << format_number(r.se_corr) << '\n';
}

/// Same data keyed by effective multiplications, sorted by protocol and cost.
inline void write_multiplications_csv(std::ostream &out, ResultTable rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow &a, const ResultRow &b) {
    if (a.protocol != b.protocol) return a.protocol < b.protocol;
    return a.eff_mults < b.eff_mults;
  });
  out << kMultsHeader << '\n';
  for (const auto &r : rows)
    out << format_number(r.eff_mults) << ',' << r.protocol << ',' << r.iter << ',' << format_number(r.se_corr) << ','
        << format_number(r.emp_corr_mean) << ',' << format_number(r.emp_corr_sd) << '\n';
}

/// Cost at which a protocol's mean correlation first reaches `level`,
/// linearly interpolated between iterations; negative if never reached.
inline double multiplications_to_reach(const ResultTable &rows, const std::string &protocol, double level) {
  const ResultRow *prev = nullptr;
  for (const auto &r : rows) {
    if (r.protocol != protocol) continue;
    if (r.emp_corr_mean >= level) {
      if (!prev) return r.eff_mults;
      const double frac = (level - prev->emp_corr_mean) / (r.emp_corr_mean - prev->emp_corr_mean);
      return prev->eff_mults + frac * (r.eff_mults - prev->eff_mults);
    }
    prev = &r;
  }
  return -1.0;
}

} // namespace opamp
