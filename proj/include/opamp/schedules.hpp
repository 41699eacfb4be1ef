#pragma once

// Row-update protocols and the bookkeeping of which coordinate was last
// updated when.
//
// A schedule produces masks delta_t in {0,1}^n. Every generator forces
// delta_0 to all-ones. ScheduleState tracks tau(t, i), the last time before t
// at which row i was updated, together with the class counts
//   w_{ts} = #{ i : tau(t, i) = s },
// which are exactly the traces tr(Pi_{t-1}^perp ... Pi_{s+1}^perp Pi_s) used by
// the correction terms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "opamp/errors.hpp"
#include "opamp/rng.hpp"

namespace opamp {

enum class Protocol { full, random, round_robin, explicit_masks };

inline std::string to_string(Protocol p) {
  switch (p) {
  case Protocol::full: return "full";
  case Protocol::random: return "random";
  case Protocol::round_robin: return "round_robin";
  case Protocol::explicit_masks: return "explicit";
  }
  return "unknown";
}

struct UpdateMask {
  std::size_t t = 0;
  std::vector<std::uint8_t> delta;

  std::size_t size() const noexcept { return delta.size(); }
  std::size_t active_count() const noexcept {
    return static_cast<std::size_t>(std::count(delta.begin(), delta.end(), std::uint8_t{1}));
  }
  bool active(std::size_t i) const { return delta[i] != 0; }
};

/// Serializable description of a protocol: {protocol, n, gamma | J, seed}.
struct ScheduleSpec {
  Protocol protocol = Protocol::full;
  std::size_t n = 0;
  double gamma = 1.0;
  std::size_t J = 1;
  Seed seed = 0;
};

class Schedule {
public:
  const ScheduleSpec &spec() const noexcept { return spec_; }
  std::size_t n() const noexcept { return spec_.n; }
  Protocol protocol() const noexcept { return spec_.protocol; }

  /// Mask applied at iteration t. Random masks for t >= 1 are drawn from the
  /// stream derive_seed(seed, t), so masks can be requested in any order.
  UpdateMask mask(std::size_t t) const {
    UpdateMask m{t, std::vector<std::uint8_t>(spec_.n, 1)};
    if (t == 0) return m;
    switch (spec_.protocol) {
    case Protocol::full:
      break;
    case Protocol::random: {
      Rng rng(derive_seed(spec_.seed, t));
      for (auto &d : m.delta) d = rng.bernoulli(spec_.gamma) ? 1 : 0;
      break;
    }
    case Protocol::round_robin: {
      // Contiguous blocks S_1, ..., S_J; S_1 is applied at t = 1.
      const std::size_t block = (t - 1) % spec_.J;
      const std::size_t width = spec_.n / spec_.J;
      std::fill(m.delta.begin(), m.delta.end(), std::uint8_t{0});
      std::fill(m.delta.begin() + static_cast<std::ptrdiff_t>(block * width),
                m.delta.begin() + static_cast<std::ptrdiff_t>((block + 1) * width), std::uint8_t{1});
      break;
    }
    case Protocol::explicit_masks: {
      if (t >= masks_.size())
        throw IndexError("Schedule: explicit schedule has no mask for t = " + std::to_string(t));
      m.delta = masks_[t];
      break;
    }
    }
    return m;
  }

  friend Schedule full_matrix(std::size_t n);
  friend Schedule random_update(std::size_t n, double gamma, Seed seed);
  friend Schedule round_robin(std::size_t n, std::size_t J);
  friend Schedule explicit_schedule(std::vector<std::vector<std::uint8_t>> masks);

private:
  ScheduleSpec spec_;
  std::vector<std::vector<std::uint8_t>> masks_;
};

inline Schedule full_matrix(std::size_t n) {
  if (n == 0) throw InvalidDimension("full_matrix: n must be at least 1");
  Schedule s;
  s.spec_ = {Protocol::full, n, 1.0, 1, 0};
  return s;
}

inline Schedule random_update(std::size_t n, double gamma, Seed seed) {
  if (n == 0) throw InvalidDimension("random_update: n must be at least 1");
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw InvalidParameter("random_update: gamma must lie in (0, 1]");
  Schedule s;
  s.spec_ = {Protocol::random, n, gamma, 1, seed};
  return s;
}

inline Schedule round_robin(std::size_t n, std::size_t J) {
  if (n == 0) throw InvalidDimension("round_robin: n must be at least 1");
  if (J == 0 || n % J != 0)
    throw InvalidPartition("round_robin: J = " + std::to_string(J) + " does not divide n = " +
                           std::to_string(n));
  Schedule s;
  s.spec_ = {Protocol::round_robin, n, 1.0, J, 0};
  return s;
}

/// Schedule from a fixed list of masks (masks[0] is overwritten with ones).
inline Schedule explicit_schedule(std::vector<std::vector<std::uint8_t>> masks) {
  if (masks.empty() || masks.front().empty())
    throw InvalidDimension("explicit_schedule: need at least one nonempty mask");
  const std::size_t n = masks.front().size();
  for (const auto &m : masks) {
    if (m.size() != n) throw ShapeError("explicit_schedule: masks differ in length");
    for (auto d : m)
      if (d > 1) throw InvalidParameter("explicit_schedule: mask entries must be 0 or 1");
  }
  std::fill(masks.front().begin(), masks.front().end(), std::uint8_t{1});
  Schedule s;
  s.spec_ = {Protocol::explicit_masks, n, 1.0, 1, 0};
  s.masks_ = std::move(masks);
  return s;
}

inline Schedule make_schedule(const ScheduleSpec &spec) {
  switch (spec.protocol) {
  case Protocol::full: return full_matrix(spec.n);
  case Protocol::random: return random_update(spec.n, spec.gamma, spec.seed);
  case Protocol::round_robin: return round_robin(spec.n, spec.J);
  case Protocol::explicit_masks: break;
  }
  throw UnsupportedProtocol("make_schedule: explicit schedules carry their masks and cannot be rebuilt from a spec");
}

/// tau(t, .) and the class counts w_{t,.} after the masks 0..t-1 were applied.
class ScheduleState {
public:
  static constexpr std::ptrdiff_t never = -1;

  ScheduleState() = default;
  explicit ScheduleState(std::size_t n) : last_update_(n, never) {}

  std::size_t t() const noexcept { return t_; }
  std::size_t n() const noexcept { return last_update_.size(); }
  const std::vector<std::ptrdiff_t> &last_update() const noexcept { return last_update_; }
  const std::map<std::size_t, std::size_t> &class_counts() const noexcept { return class_counts_; }

  /// tau(t, i), or `never` before the first mask.
  std::ptrdiff_t tau(std::size_t i) const { return last_update_.at(i); }

  /// Applies delta_t in place: w_s <- w_s - delta_{ti} delta_{si} for each
  /// updated row, then w_t <- sum_i delta_{ti}.
  void apply(const UpdateMask &mask) {
    if (mask.size() != n())
      throw ShapeError("ScheduleState::apply: mask length " + std::to_string(mask.size()) +
                       " does not match n = " + std::to_string(n()));
    if (mask.t != t_)
      throw InvalidParameter("ScheduleState::apply: mask is for t = " + std::to_string(mask.t) +
                             " but the state is at t = " + std::to_string(t_));
    std::size_t fresh = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.active(i)) continue;
      const auto old = last_update_[i];
      if (old != never) {
        auto it = class_counts_.find(static_cast<std::size_t>(old));
        if (--(it->second) == 0) class_counts_.erase(it);
      }
      last_update_[i] = static_cast<std::ptrdiff_t>(t_);
      ++fresh;
    }
    if (fresh > 0) class_counts_[t_] = fresh;
    ++t_;
  }

  /// w_{ts}: number of rows whose last update before t happened at s.
  std::size_t trace_weight(std::size_t s) const {
    if (s >= t_)
      throw IndexError("trace_weight: s = " + std::to_string(s) + " is not below t = " +
                       std::to_string(t_));
    auto it = class_counts_.find(s);
    return it == class_counts_.end() ? 0 : it->second;
  }

private:
  std::size_t t_ = 0;
  std::vector<std::ptrdiff_t> last_update_;
  std::map<std::size_t, std::size_t> class_counts_;
};

inline ScheduleState advance(ScheduleState state, const UpdateMask &mask) {
  state.apply(mask);
  return state;
}

inline std::size_t trace_weight(const ScheduleState &state, std::size_t s) {
  return state.trace_weight(s);
}

/// Limiting fraction p_t(s), s = 0..t-1, of rows last updated at s.
inline std::vector<double> limiting_measure(const ScheduleSpec &spec, std::size_t t) {
  if (t == 0) throw InvalidParameter("limiting_measure: t must be at least 1");
  std::vector<double> p(t, 0.0);
  switch (spec.protocol) {
  case Protocol::full:
    p[t - 1] = 1.0;
    return p;
  case Protocol::random: {
    const double g = spec.gamma;
    if (!(g > 0.0 && g <= 1.0)) throw InvalidParameter("limiting_measure: gamma must lie in (0, 1]");
    p[0] = std::pow(1.0 - g, static_cast<double>(t - 1));
    for (std::size_t s = 1; s < t; ++s) p[s] = g * std::pow(1.0 - g, static_cast<double>(t - s - 1));
    return p;
  }
  case Protocol::round_robin: {
    const std::size_t J = spec.J;
    if (J == 0) throw InvalidParameter("limiting_measure: J must be positive");
    const double share = 1.0 / static_cast<double>(J);
    if (t < J) {
      // Rows of S_1..S_{t-1} were refreshed at 1..t-1; the rest still date from t = 0.
      p[0] = 1.0 - static_cast<double>(t - 1) * share;
      for (std::size_t s = 1; s < t; ++s) p[s] = share;
    } else {
      for (std::size_t s = t - J; s < t; ++s) p[s] = share;
    }
    return p;
  }
  case Protocol::explicit_masks: break;
  }
  throw UnsupportedProtocol("limiting_measure: no closed form for protocol '" +
                            to_string(spec.protocol) + "'");
}

// JSON: {"protocol": "random", "n": 100, "gamma": 0.1, "seed": 7}

inline void to_json(nlohmann::json &j, const ScheduleSpec &s) {
  j = nlohmann::json{{"protocol", to_string(s.protocol)}, {"n", s.n}};
  if (s.protocol == Protocol::random) {
    j["gamma"] = s.gamma;
    j["seed"] = s.seed;
  }
  if (s.protocol == Protocol::round_robin) j["J"] = s.J;
}

inline Protocol protocol_from_string(const std::string &name) {
  if (name == "full" || name == "full_matrix") return Protocol::full;
  if (name == "random" || name == "random_update") return Protocol::random;
  if (name == "round_robin" || name == "round-robin") return Protocol::round_robin;
  throw UnsupportedProtocol("unknown protocol '" + name + "'");
}

inline void from_json(const nlohmann::json &j, ScheduleSpec &s) {
  s.protocol = protocol_from_string(j.at("protocol").get<std::string>());
  s.n = j.value("n", std::size_t{0});
  s.gamma = j.value("gamma", 1.0);
  s.J = j.value("J", std::size_t{1});
  s.seed = j.value("seed", Seed{0});
}

} // namespace opamp
