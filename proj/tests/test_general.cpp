#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "opamp/amp.hpp"
#include "opamp/general.hpp"
#include "opamp/validation.hpp"

using namespace opamp;

namespace {

std::vector<UpdateMask> draw_masks(std::size_t n, std::size_t T, double p, Rng &rng) {
  std::vector<UpdateMask> masks{full_matrix(n).mask(0)};
  for (std::size_t t = 1; t <= T; ++t) {
    UpdateMask m{t, std::vector<std::uint8_t>(n)};
    for (auto &d : m.delta) d = rng.bernoulli(p) ? 1 : 0;
    masks.push_back(m);
  }
  return masks;
}

Vector gaussian_vector(std::size_t n, Seed seed) {
  Rng rng(seed);
  Vector v(static_cast<Eigen::Index>(n));
  for (auto &x : v) x = rng.gaussian();
  return v;
}

// E[g(sqrt(q) Z)] by the trapezoid rule on [-12, 12].
template <class G> double gauss_mean(G g, double q) {
  const double h = 1e-3;
  double acc = 0.0;
  for (int k = -12000; k <= 12000; ++k) {
    const double z = k * h;
    acc += (k == -12000 || k == 12000 ? 0.5 : 1.0) * std::exp(-0.5 * z * z) * g(std::sqrt(q) * z);
  }
  return acc * h / std::sqrt(2.0 * std::numbers::pi);
}

double tanh_d(double x) {
  const double c = std::cosh(x);
  return 1.0 / (c * c);
}

} // namespace

TEST(OperatorDecomposition, Validation) {
  EXPECT_THROW(OperatorDecomposition({}, {}), ShapeError);
  EXPECT_THROW(OperatorDecomposition({Matrix::Identity(2, 2)}, {Matrix::Identity(3, 3)}), ShapeError);
  EXPECT_THROW(OperatorDecomposition({2.0 * Matrix::Identity(2, 2)}, {Matrix::Identity(2, 2)}, 1.5), InvalidParameter);
  EXPECT_NEAR(OperatorDecomposition::identity(4).op_norm_bound(), 1.0, 1e-15);
  const auto Z = sample_goe(4, 1).entries();
  EXPECT_THROW(OperatorDecomposition::identity(3).apply(Z), ShapeError);
  const auto P = OperatorDecomposition::projector({1, {1, 0, 1, 0}});
  EXPECT_LE((P.apply(Z) - P.L(0) * Z).norm(), 0.0);
}

TEST(OpampStep, FirstStepHasNoCorrection) {
  const auto Z = sample_goe(10, 2).entries();
  const auto dec = OperatorDecomposition::projector({0, {1, 1, 0, 1, 0, 1, 1, 1, 0, 1}});
  const Vector f0 = gaussian_vector(10, 3);
  const Vector x0 = opamp_step(Z, dec, constant_function(f0), {}, {}, {});
  EXPECT_EQ(x0, dec.apply(Z, f0));
}

TEST(OpampStep, IdentityOperatorIsClassicAmp) {
  const std::size_t n = 40, T = 8;
  const auto Z = sample_goe(n, 5).entries();
  const Vector f0 = gaussian_vector(n, 6);
  const std::vector<OperatorDecomposition> decs(T, OperatorDecomposition::identity(n));
  std::vector<MemoryFunction> fs{constant_function(f0)};
  for (std::size_t t = 1; t < T; ++t) fs.push_back(separable_function([](double x) { return std::tanh(x); }, tanh_d));

  std::vector<Vector> xs, fvals;
  std::vector<Vector> ref;
  Vector ref_prev_f = Vector::Zero(n), ref_f = f0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto B = debias_opamp_empirical(decs, fs[t], xs);
    fvals.push_back(fs[t](xs));
    xs.push_back(opamp_step(Z, decs[t], fs[t], B, std::span<const Vector>(xs), std::span<const Vector>(fvals).first(t)));
    // x_t = Z tanh(x_{t-1}) - <tanh'(x_{t-1})> tanh(x_{t-2})
    Vector x = Z * ref_f;
    if (t > 0) x -= ref.back().unaryExpr(&tanh_d).mean() * ref_prev_f;
    ref.push_back(x);
    ref_prev_f = ref_f;
    ref_f = x.unaryExpr([](double v) { return std::tanh(v); });
    EXPECT_LE((xs.back() - ref.back()).cwiseAbs().maxCoeff(), 1e-12) << t;
    for (std::size_t s = 0; s + 1 < t; ++s) EXPECT_EQ(B[s].cwiseAbs().maxCoeff(), 0.0);
    if (t > 0) {
      const double b = B[t - 1](0, 0);
      EXPECT_LE((B[t - 1] - b * Matrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
}

TEST(OpampStep, ShapeMismatch) {
  const auto Z = sample_goe(4, 1).entries();
  const std::vector<Vector> xs{Vector::Ones(4)};
  EXPECT_THROW(opamp_step(Z, OperatorDecomposition::identity(4), constant_function(Vector::Ones(4)), {}, xs, {}),
               ShapeError);
}

TEST(Autoregressive, ZeroMemoryIsOneStepOpamp) {
  const std::size_t n = 12, T = 5;
  const auto Z = sample_goe(n, 7).entries();
  const Vector f0 = gaussian_vector(n, 8);
  const std::vector<OperatorDecomposition> decs(T, OperatorDecomposition::identity(n));
  const MemoryMatrices memory(n, T);
  std::vector<MemoryFunction> fs{constant_function(f0)};
  for (std::size_t t = 1; t < T; ++t) fs.push_back(separable_function([](double x) { return std::sin(x); }, [](double x) { return std::cos(x); }));
  std::vector<Vector> xa, fa, xo, fo;
  for (std::size_t t = 0; t < T; ++t) {
    const auto Ba = debias_opamp_empirical(decs, fs[t], xa, &memory);
    fa.push_back(t == 0 ? fs[0](xa) : fs[t](std::span<const Vector>(xa).subspan(t - 1)));
    xa.push_back(autoregressive_step(Z, decs[t], fs[t], memory, Ba, xa, std::span<const Vector>(fa).first(t)));
    const auto Bo = debias_opamp_empirical(decs, fs[t], xo);
    fo.push_back(fs[t](xo));
    xo.push_back(opamp_step(Z, decs[t], fs[t], Bo, xo, std::span<const Vector>(fo).first(t)));
    EXPECT_LE((xa.back() - xo.back()).cwiseAbs().maxCoeff(), 1e-14) << t;
  }
}

TEST(Autoregressive, ProjectionMemoryProductForm) {
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 1 + rng.next_u64() % 8, T = 1 + rng.next_u64() % 6;
    const auto masks = draw_masks(n, T, 0.5, rng);
    const auto memory = MemoryMatrices::projection(masks);
    for (std::size_t t = 0; t <= T; ++t)
      for (std::size_t s = 0; s <= t; ++s) {
        Matrix prod = Matrix::Identity(n, n);
        for (std::size_t r = s + 1; r <= t; ++r) prod = (Matrix::Identity(n, n) - projector_matrix(masks[r])) * prod;
        EXPECT_EQ(memory.C(t, s), prod) << "t=" << t << " s=" << s;
      }
    EXPECT_LE(memory.inverse_residual(), 1e-12);
  }
}

TEST(Autoregressive, ProjectorSpecializationMatchesAmpCore) {
  const std::size_t n = 30, T = 10;
  const double lambda = 1.5;
  const auto inst = build_spiked(lambda, sample_rademacher_signal(n, 10), sample_goe(n, 11));
  Rng rng(12);
  const auto masks = draw_masks(n, T - 1, 0.4, rng);
  std::vector<std::vector<std::uint8_t>> raw;
  for (const auto &m : masks) raw.push_back(m.delta);
  const auto schedule = explicit_schedule(raw);
  const Vector f0 = make_initialization(inst.theta, 0.3, 13);
  // One channel (v, w) for every class, so f_t is the same separable map.
  const OverlapPoint pt{0.8, 0.5};
  const std::vector<OverlapPoint> se(T + 1, pt);
  const auto eta = bayes_denoiser(PriorSpec::rademacher());
  const auto core = run(inst, schedule, eta, f0, T, se);

  const double v = pt.q, w = lambda * pt.r;
  std::vector<OperatorDecomposition> decs;
  for (const auto &m : masks) decs.push_back(OperatorDecomposition::projector(m));
  const auto memory = MemoryMatrices::projection(masks);
  std::vector<MemoryFunction> fs{constant_function(f0)};
  for (std::size_t t = 1; t < T; ++t)
    fs.push_back(separable_function([&](double y) { return eta(y, v, w); }, [&](double y) { return eta.derivative(y, v, w); }));

  std::vector<Vector> xs, fvals;
  ScheduleState state(n);
  for (std::size_t t = 0; t < T; ++t) {
    const auto B = debias_opamp_empirical(decs, fs[t], xs, &memory);
    if (t > 0) {
      // B_ts = Pi_t b_ts with the amp-core coefficients.
      const auto row = debias_empirical(eta, xs.back(), state, se, lambda);
      for (std::size_t s = 0; s < t; ++s) {
        const double b = row.b.count(s) ? row.b.at(s) : 0.0;
        EXPECT_LE((B[s] - b * projector_matrix(masks[t])).cwiseAbs().maxCoeff(), 1e-14) << t << "," << s;
      }
    }
    fvals.push_back(t == 0 ? fs[0](xs) : fs[t](std::span<const Vector>(xs).subspan(t - 1)));
    xs.push_back(autoregressive_step(inst.M.entries(), decs[t], fs[t], memory, B, xs, std::span<const Vector>(fvals).first(t)));
    state.apply(masks[t]);
    EXPECT_LE((xs.back() - core.iterates[t]).cwiseAbs().maxCoeff(), 1e-10) << t;
  }
}

TEST(SeOpamp, ConstantFunctionGivesConstantCovariance) {
  const std::size_t n = 6, T = 4;
  const Vector f0 = gaussian_vector(n, 14);
  const std::vector<OperatorDecomposition> decs(T + 1, OperatorDecomposition::identity(n));
  const std::vector<MemoryFunction> fs(T + 1, constant_function(f0));
  const auto se = se_opamp(decs, fs, T, 50, 15);
  const Matrix want = (f0.squaredNorm() / n) * Matrix::Identity(n, n);
  for (std::size_t t = 0; t <= T; ++t) EXPECT_LE((se.block(t, t) - want).cwiseAbs().maxCoeff(), 1e-12) << t;
}

TEST(SeOpamp, SeparableMatchesScalarSe) {
  const std::size_t n = 20, T = 3, mc = 10000;
  const Vector f0 = gaussian_vector(n, 16);
  const std::vector<OperatorDecomposition> decs(T + 1, OperatorDecomposition::identity(n));
  std::vector<MemoryFunction> fs{constant_function(f0)};
  for (std::size_t t = 1; t <= T; ++t) fs.push_back(separable_function([](double x) { return std::tanh(2.0 * x); }, [](double x) { return 2.0 * tanh_d(2.0 * x); }));
  const auto se = se_opamp(decs, fs, T, mc, 17);
  double q = f0.squaredNorm() / n;
  EXPECT_NEAR(se.block(0, 0)(0, 0), q, 1e-12);
  for (std::size_t t = 1; t <= T; ++t) {
    // Scalar oracle driven by the engine's own previous q, so each check
    // sees a single step of Monte Carlo error.
    const double prev = se.block(t - 1, t - 1).diagonal().mean();
    const double m2 = gauss_mean([](double y) { return std::pow(std::tanh(2.0 * y), 2); }, prev);
    const double m4 = gauss_mean([](double y) { return std::pow(std::tanh(2.0 * y), 4); }, prev);
    const double sigma = std::sqrt((m4 - m2 * m2) / static_cast<double>(mc * n));
    EXPECT_NEAR(se.block(t, t).diagonal().mean(), m2, 3.0 * sigma) << t;
    EXPECT_LE((se.block(t, t) - se.block(t, t).diagonal().mean() * Matrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-12);
    q = m2;
  }
}

TEST(SeOpamp, DoublingSamplesIsConsistent) {
  const std::size_t n = 10, T = 2;
  const Vector f0 = gaussian_vector(n, 18);
  const std::vector<OperatorDecomposition> decs(T + 1, OperatorDecomposition::identity(n));
  std::vector<MemoryFunction> fs{constant_function(f0)};
  for (std::size_t t = 1; t <= T; ++t) fs.push_back(separable_function([](double x) { return std::tanh(x); }, tanh_d));
  const auto a = se_opamp(decs, fs, T, 4000, 19);
  const auto b = se_opamp(decs, fs, T, 8000, 20);
  const double q = a.block(0, 0)(0, 0);
  const double m2 = gauss_mean([](double y) { return std::pow(std::tanh(y), 2); }, q);
  const double m4 = gauss_mean([](double y) { return std::pow(std::tanh(y), 4); }, q);
  const double pooled = std::sqrt((m4 - m2 * m2) / n * (1.0 / 4000 + 1.0 / 8000));
  EXPECT_LE(std::abs(a.block(1, 1).diagonal().mean() - b.block(1, 1).diagonal().mean()), 3.0 * pooled);
}

TEST(SeOpamp, Errors) {
  const std::vector<OperatorDecomposition> decs(2, OperatorDecomposition::identity(3));
  const std::vector<MemoryFunction> fs(2, constant_function(Vector::Ones(3)));
  EXPECT_THROW(se_opamp(decs, fs, 2, 10, 1), ShapeError);
  EXPECT_THROW(se_opamp(decs, fs, 1, 0, 1), InvalidParameter);
  Matrix bad = Matrix::Identity(2, 2);
  bad(1, 1) = -0.5;
  EXPECT_THROW(covariance_factor(bad), NumericalInstability);
  Matrix tiny = Matrix::Identity(2, 2);
  tiny(1, 1) = -1e-4;
  EXPECT_NO_THROW(covariance_factor(tiny));
}

TEST(DebiasOpamp, LinearFunctionIgnoresCovariance) {
  const std::size_t n = 5, T = 2;
  Matrix G = Matrix::Random(n, n);
  MemoryFunction lin;
  lin.f = [G](std::span<const Vector> xs) -> Vector { return G * xs.back(); };
  lin.jacobian = [G, n](std::span<const Vector> xs, std::size_t s) -> Matrix {
    return s + 1 == xs.size() ? G : Matrix::Zero(n, n);
  };
  const std::vector<OperatorDecomposition> decs(T + 1, OperatorDecomposition::identity(n));
  const std::vector<MemoryFunction> fa{constant_function(Vector::Ones(n)), lin, lin};
  const std::vector<MemoryFunction> fb{constant_function(3.0 * Vector::Ones(n)), lin, lin};
  const auto sa = se_opamp(decs, fa, T - 1, 100, 1);
  const auto sb = se_opamp(decs, fb, T - 1, 100, 2);
  const auto Ba = debias_opamp(decs, lin, sa, T, 50, 3);
  const auto Bb = debias_opamp(decs, lin, sb, T, 50, 4);
  ASSERT_EQ(Ba.size(), T);
  for (std::size_t s = 0; s < T; ++s) EXPECT_LE((Ba[s] - Bb[s]).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(Ba[1](0, 0), G.trace() / n, 1e-14);
}

TEST(DebiasOpamp, ProjectorStructure) {
  const std::size_t n = 8, T = 3;
  Rng rng(21);
  const auto masks = draw_masks(n, T, 0.5, rng);
  std::vector<OperatorDecomposition> decs;
  for (const auto &m : masks) decs.push_back(OperatorDecomposition::projector(m));
  const auto memory = MemoryMatrices::projection(masks);
  std::vector<MemoryFunction> fs{constant_function(gaussian_vector(n, 22))};
  for (std::size_t t = 1; t <= T; ++t) fs.push_back(separable_function([](double x) { return std::tanh(x); }, tanh_d));
  const auto se = se_opamp(decs, fs, T - 1, 2000, 23, &memory);
  const auto B = debias_opamp(decs, fs[T], se, T, 2000, 24, &memory);
  const Matrix P = projector_matrix(masks[T]);
  for (std::size_t s = 0; s < T; ++s) {
    // A multiple of Pi_t.
    const double b = (B[s] * P).trace() / std::max(1.0, P.trace());
    EXPECT_LE((B[s] - b * P).cwiseAbs().maxCoeff(), 1e-12) << s;
  }
}

TEST(DebiasOpamp, MissingState) {
  const std::vector<OperatorDecomposition> decs(3, OperatorDecomposition::identity(2));
  GaussianSE empty;
  empty.n = 2;
  EXPECT_THROW(debias_opamp(decs, constant_function(Vector::Ones(2)), empty, 2, 10, 1), MissingState);
  EXPECT_TRUE(debias_opamp(decs, constant_function(Vector::Ones(2)), empty, 0, 10, 1).empty());
}

TEST(Jacobian, FiniteDifferenceFallback) {
  MemoryFunction f;
  f.f = [](std::span<const Vector> xs) -> Vector { return xs[0].array().square().matrix() + xs[1]; };
  const std::vector<Vector> xs{Vector::LinSpaced(3, 1.0, 3.0), Vector::Ones(3)};
  const Matrix J0 = jacobian(f, xs, 0), J1 = jacobian(f, xs, 1);
  EXPECT_LE((J0 - Matrix(Vector::LinSpaced(3, 2.0, 6.0).asDiagonal())).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LE((J1 - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(jacobian(f, xs, 2), IndexError);
}

TEST(SeProjCommuting, SphereFunctionsKeepUnitCovariance) {
  const std::size_t T = 25;
  const std::vector<double> ones(T + 1, 1.0);
  for (const auto &s : {full_matrix(50), random_update(50, 0.1, 3), round_robin(50, 10)}) {
    const auto cov = se_proj_commuting(s, ones, T);
    for (const auto &c : cov) EXPECT_LE((c.array() - 1.0).abs().maxCoeff(), 1e-10);
  }
}

TEST(SeProjCommuting, ZeroMaskRetains) {
  const auto s = explicit_schedule({{1, 1, 1}, {1, 0, 0}, {0, 0, 0}});
  const std::vector<double> m{1.0, 2.0, 5.0};
  const auto cov = se_proj_commuting(s, m, 2);
  EXPECT_EQ(cov[2], cov[1]);
  EXPECT_EQ(cov[1](0), 2.0);
  EXPECT_EQ(cov[1](1), 1.0);
  EXPECT_THROW(se_proj_commuting(s, std::vector<double>{1.0}, 2), ShapeError);
}
