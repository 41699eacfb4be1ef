#pragma once

// Expectations against the standard normal density.
//
// The rule is composite Gauss-Legendre: [-12, 12] is split into `order` equal
// panels with 8 Legendre nodes each, and every node weight is multiplied by
// the N(0,1) density. The neglected tail mass is below 1e-32. Plain
// Gauss-Hermite converges slowly for the denoisers used here (tanh of a
// scaled Gaussian has complex poles close to the real axis once the SNR is
// large), while the panelled rule resolves those transitions at every order
// used in practice.

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "opamp/errors.hpp"

namespace opamp {

inline constexpr int kDefaultQuadOrder = 61;
inline constexpr int kMinQuadOrder = 4;

namespace detail {

inline constexpr std::size_t kLegendreNodes = 8;

/// Nodes and weights of the 8-point Gauss-Legendre rule on [-1, 1].
inline const std::array<std::pair<double, double>, kLegendreNodes> &legendre8() {
  static const auto table = [] {
    std::array<std::pair<double, double>, kLegendreNodes> out{};
    constexpr int k = static_cast<int>(kLegendreNodes);
    for (int i = 0; i < k; ++i) {
      double x = std::cos(std::numbers::pi * (i + 0.75) / (k + 0.5));
      double dp = 0.0;
      for (int iter = 0; iter < 100; ++iter) {
        double p0 = 1.0, p1 = x;
        for (int m = 2; m <= k; ++m) {
          const double p2 = ((2.0 * m - 1.0) * x * p1 - (m - 1.0) * p0) / m;
          p0 = p1;
          p1 = p2;
        }
        dp = k * (x * p1 - p0) / (x * x - 1.0);
        const double dx = p1 / dp;
        x -= dx;
        if (std::abs(dx) < 1e-16) break;
      }
      out[static_cast<std::size_t>(i)] = {x, 2.0 / ((1.0 - x * x) * dp * dp)};
    }
    return out;
  }();
  return table;
}

} // namespace detail

class GaussianRule {
public:
  explicit GaussianRule(int order) : order_(order) {
    if (order < kMinQuadOrder)
      throw InsufficientOrder("quadrature order " + std::to_string(order) + " is below the minimum of " +
                              std::to_string(kMinQuadOrder));
    constexpr double half_width = 12.0;
    const double panel = 2.0 * half_width / order;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    nodes_.reserve(static_cast<std::size_t>(order) * detail::kLegendreNodes);
    weights_.reserve(nodes_.capacity());
    for (int p = 0; p < order; ++p) {
      const double mid = -half_width + (p + 0.5) * panel;
      for (const auto &[x, w] : detail::legendre8()) {
        const double z = mid + 0.5 * panel * x;
        nodes_.push_back(z);
        weights_.push_back(0.5 * panel * w * inv_sqrt_2pi * std::exp(-0.5 * z * z));
      }
    }
  }

  int order() const noexcept { return order_; }
  const std::vector<double> &nodes() const noexcept { return nodes_; }
  const std::vector<double> &weights() const noexcept { return weights_; }

  /// E[f(z)] for z ~ N(0, 1).
  template <class F> double expect(F &&f) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < nodes_.size(); ++k) acc += weights_[k] * f(nodes_[k]);
    return acc;
  }

private:
  int order_;
  std::vector<double> nodes_;
  std::vector<double> weights_;
};

/// Shared, lazily built rule for a given order.
inline std::shared_ptr<const GaussianRule> gaussian_rule(int order) {
  static std::mutex mutex;
  static std::map<int, std::shared_ptr<const GaussianRule>> cache;
  std::lock_guard lock(mutex);
  auto &slot = cache[order];
  if (!slot) {
    try {
      slot = std::make_shared<const GaussianRule>(order);
    } catch (...) {
      cache.erase(order);
      throw;
    }
  }
  return slot;
}

} // namespace opamp
