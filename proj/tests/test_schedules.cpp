#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <numeric>

#include "opamp/schedules.hpp"

using namespace opamp;

namespace {

// Dense trace oracle: C_{t-1,s} = Pi_{t-1}^perp ... Pi_{s+1}^perp and
// w_ts = tr(C_{t-1,s} Pi_s).
double trace_oracle(const std::vector<UpdateMask> &masks, std::size_t t, std::size_t s) {
  const auto n = static_cast<Eigen::Index>(masks.front().size());
  Eigen::MatrixXd C = Eigen::MatrixXd::Identity(n, n);
  for (std::size_t r = s + 1; r < t; ++r) {
    Eigen::VectorXd perp(n);
    for (Eigen::Index i = 0; i < n; ++i) perp(i) = masks[r].active(static_cast<std::size_t>(i)) ? 0.0 : 1.0;
    C = perp.asDiagonal() * C;
  }
  Eigen::VectorXd pi(n);
  for (Eigen::Index i = 0; i < n; ++i) pi(i) = masks[s].active(static_cast<std::size_t>(i)) ? 1.0 : 0.0;
  return (C * pi.asDiagonal()).trace();
}

} // namespace

TEST(Schedules, FullMatrixIsAllOnes) {
  const auto m = full_matrix(9).mask(7);
  EXPECT_EQ(m.active_count(), 9u);
  EXPECT_EQ(m.t, 7u);
}

TEST(Schedules, RandomWithGammaOneIsFull) {
  const auto s = random_update(20, 1.0, 3);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(s.mask(t).delta, full_matrix(20).mask(t).delta);
}

TEST(Schedules, RandomDensity) {
  const double density = static_cast<double>(random_update(100000, 0.1, 8).mask(1).active_count()) / 1e5;
  EXPECT_GE(density, 0.097);
  EXPECT_LE(density, 0.103);
}

TEST(Schedules, FirstMaskIsAllOnes) {
  EXPECT_EQ(random_update(50, 0.01, 1).mask(0).active_count(), 50u);
  EXPECT_EQ(round_robin(50, 10).mask(0).active_count(), 50u);
}

TEST(Schedules, RandomIsDeterministic) {
  EXPECT_EQ(random_update(64, 0.3, 5).mask(4).delta, random_update(64, 0.3, 5).mask(4).delta);
  EXPECT_NE(random_update(64, 0.3, 5).mask(4).delta, random_update(64, 0.3, 6).mask(4).delta);
}

TEST(Schedules, RandomRejectsBadGamma) {
  EXPECT_THROW(random_update(10, 0.0, 1), InvalidParameter);
  EXPECT_THROW(random_update(10, 1.5, 1), InvalidParameter);
}

TEST(Schedules, RoundRobinSingleSubsetIsFull) {
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(round_robin(12, 1).mask(t).delta, full_matrix(12).mask(t).delta);
}

TEST(Schedules, RoundRobinBlockOfOne) { EXPECT_EQ(round_robin(10, 10).mask(3).active_count(), 1u); }

TEST(Schedules, RoundRobinRejectsNonDivisor) { EXPECT_THROW(round_robin(10, 3), InvalidPartition); }

TEST(Schedules, RoundRobinStalenessBounded) {
  const std::size_t n = 20, J = 4, T = 12;
  const auto s = round_robin(n, J);
  ScheduleState st(n);
  for (std::size_t t = 0; t < T; ++t) {
    st.apply(s.mask(t));
    const std::size_t now = t + 1;
    if (now < J + 1) continue;
    for (std::size_t i = 0; i < n; ++i) EXPECT_LE(static_cast<std::ptrdiff_t>(now) - st.tau(i), static_cast<std::ptrdiff_t>(J));
  }
}

TEST(ScheduleState, FullRefresh) {
  ScheduleState st(5);
  st.apply(full_matrix(5).mask(0));
  st.apply(full_matrix(5).mask(1));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(st.tau(i), 1);
  EXPECT_EQ(st.class_counts(), (std::map<std::size_t, std::size_t>{{1, 5}}));
}

TEST(ScheduleState, ZeroMaskOnlyAdvancesTime) {
  ScheduleState st(4);
  st.apply(full_matrix(4).mask(0));
  const auto before = st;
  const auto after = advance(st, UpdateMask{1, {0, 0, 0, 0}});
  EXPECT_EQ(after.t(), 2u);
  EXPECT_EQ(after.last_update(), before.last_update());
  EXPECT_EQ(after.class_counts(), before.class_counts());
}

TEST(ScheduleState, HandSimulation) {
  ScheduleState st(3);
  st.apply({0, {1, 1, 1}});
  st.apply({1, {1, 0, 0}});
  EXPECT_EQ(st.class_counts(), (std::map<std::size_t, std::size_t>{{0, 2}, {1, 1}}));
  EXPECT_EQ(trace_weight(st, 0), 2u);
  EXPECT_EQ(trace_weight(st, 1), 1u);
  EXPECT_THROW(trace_weight(st, 2), IndexError);
}

TEST(ScheduleState, ShapeAndTimeChecks) {
  ScheduleState st(3);
  EXPECT_THROW(st.apply({0, {1, 1}}), ShapeError);
  EXPECT_THROW(st.apply({1, {1, 1, 1}}), InvalidParameter);
}

TEST(ScheduleState, WeightsEqualTraceOracle) {
  Rng rng(2024);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 2 + rng.next_u64() % 15, T = 2 + rng.next_u64() % 7;
    std::vector<UpdateMask> masks{full_matrix(n).mask(0)};
    for (std::size_t t = 1; t < T; ++t) {
      UpdateMask m{t, std::vector<std::uint8_t>(n)};
      for (auto &d : m.delta) d = rng.bernoulli(0.4) ? 1 : 0;
      masks.push_back(m);
    }
    ScheduleState st(n);
    for (std::size_t t = 1; t <= T; ++t) {
      st.apply(masks[t - 1]);
      std::size_t total = 0;
      for (std::size_t s = 0; s < t; ++s) {
        EXPECT_EQ(static_cast<double>(st.trace_weight(s)), trace_oracle(masks, t, s));
        total += st.trace_weight(s);
      }
      EXPECT_EQ(total, n);
      EXPECT_EQ(st.trace_weight(t - 1), masks[t - 1].active_count());
    }
  }
}

TEST(LimitingMeasure, RoundRobinBeforeFullCycle) {
  // Rows of S_1..S_4 were refreshed at t = 1..4; the other 60% date from t = 0.
  const auto p = limiting_measure({Protocol::round_robin, 100, 1.0, 10, 0}, 5);
  const std::vector<double> expected{0.6, 0.1, 0.1, 0.1, 0.1};
  ASSERT_EQ(p.size(), expected.size());
  for (std::size_t s = 0; s < p.size(); ++s) EXPECT_NEAR(p[s], expected[s], 1e-15);
}

TEST(LimitingMeasure, RoundRobinMatchesClassFractions) {
  const std::size_t n = 1000, J = 10;
  const auto sched = round_robin(n, J);
  ScheduleState st(n);
  for (std::size_t t = 1; t <= 25; ++t) {
    st.apply(sched.mask(t - 1));
    const auto p = limiting_measure(sched.spec(), t);
    for (std::size_t s = 0; s < t; ++s)
      EXPECT_NEAR(p[s], static_cast<double>(st.trace_weight(s)) / static_cast<double>(n), 1e-12);
  }
}

TEST(LimitingMeasure, Random) {
  const auto p = limiting_measure({Protocol::random, 100, 0.1, 1, 0}, 3);
  EXPECT_NEAR(p[0], 0.81, 1e-15);
  EXPECT_NEAR(p[1], 0.09, 1e-15);
  EXPECT_NEAR(p[2], 0.1, 1e-15);
}

TEST(LimitingMeasure, FullIsPointMass) {
  const auto p = limiting_measure({Protocol::full, 10, 1.0, 1, 0}, 9);
  for (std::size_t s = 0; s < 9; ++s) EXPECT_EQ(p[s], s == 8 ? 1.0 : 0.0);
}

TEST(LimitingMeasure, SumsToOne) {
  for (std::size_t t = 1; t < 40; ++t) {
    for (const ScheduleSpec spec : {ScheduleSpec{Protocol::random, 10, 0.23, 1, 0},
                                    ScheduleSpec{Protocol::round_robin, 10, 1.0, 7, 0}}) {
      const auto p = limiting_measure(spec, t);
      EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
      for (double x : p) EXPECT_GE(x, 0.0);
    }
  }
}

TEST(LimitingMeasure, Errors) {
  EXPECT_THROW(limiting_measure({Protocol::explicit_masks, 3, 1.0, 1, 0}, 2), UnsupportedProtocol);
  EXPECT_THROW(limiting_measure({Protocol::full, 3, 1.0, 1, 0}, 0), InvalidParameter);
}

TEST(Schedules, JsonRoundTrip) {
  const ScheduleSpec spec{Protocol::random, 100, 0.25, 1, 9};
  const nlohmann::json j = spec;
  const auto back = j.get<ScheduleSpec>();
  EXPECT_EQ(back.protocol, spec.protocol);
  EXPECT_EQ(back.gamma, spec.gamma);
  EXPECT_EQ(back.seed, spec.seed);
}
