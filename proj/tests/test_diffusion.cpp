#include <gtest/gtest.h>

#include <cmath>

#include "opama/diffusion.hpp"
#include "opama/error.hpp"
#include "opama/nn.hpp"

using namespace opama;

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(1, 0.02, 0.02);
  ASSERT_EQ(s.alpha_bars.size(), 1u);
  EXPECT_NEAR(s.alpha_bars[0], 0.98, 1e-15);
}

TEST(Schedule, ThousandStepTerminalValueAndMonotone) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  // product of (1 - beta) over the linear grid, evaluated independently
  EXPECT_NEAR(s.alpha_bar(1000), 4.035829765375676e-05, 1e-12);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= s.alpha(t);
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
    if (t > 1) {
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
  EXPECT_LT(s.betas.front(), s.betas.back());
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, RangeViolations) {
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), ContractError);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), ContractError);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), ContractError);
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), ContractError);
}

TEST(QSample, Limits) {
  Rng rng(1);
  const Tensor z0 = randn({4, 3}, rng), eps = randn({4, 3}, rng);
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const Tensor same = q_sample(z0, 0, eps, s);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_EQ(same[i], z0[i]);
  const Tensor noisy = q_sample(z0, 1000, eps, s);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_NEAR(noisy[i], eps[i], 2e-2);
  EXPECT_THROW(q_sample(z0, 1, Tensor({3, 4}), s), DimensionError);
}

TEST(QSample, MarginalVarianceMonteCarlo) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(2);
  const std::int64_t n = 100000;
  const Tensor z0(Shape{n});
  for (int t : {1, 500, 1000}) {
    const Tensor zt = q_sample(z0, t, randn({n}, rng), s);
    double m = 0, v = 0;
    for (double x : zt.data()) m += x;
    m /= n;
    for (double x : zt.data()) v += (x - m) * (x - m);
    v /= n - 1;
    EXPECT_NEAR(v / (1.0 - s.alpha_bar(t)), 1.0, 0.02) << "t=" << t;
  }
}

TEST(QSample, ComposedForwardStepsMatchClosedForm) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(3);
  const std::int64_t n = 100000;
  Tensor z(Shape{n}, 1.0);
  const int t = 20;
  for (int k = 1; k <= t; ++k) {
    const Tensor e = randn({n}, rng);
    auto d = z.data();
    for (std::int64_t i = 0; i < n; ++i) d[i] = std::sqrt(s.alpha(k)) * d[i] + std::sqrt(s.beta(k)) * e[i];
  }
  double m = 0, v = 0;
  for (double x : z.data()) m += x;
  m /= n;
  for (double x : z.data()) v += (x - m) * (x - m);
  v /= n - 1;
  EXPECT_NEAR(m / std::sqrt(s.alpha_bar(t)), 1.0, 0.02);
  EXPECT_NEAR(v / (1.0 - s.alpha_bar(t)), 1.0, 0.02);
}

TEST(EpsLoss, OracleAndZeroModels) {
  const auto s = make_schedule(100, 1e-4, 0.02);
  Rng rng(4);
  const Tensor z0 = randn({5, 2}, rng), eps = randn({5, 2}, rng);
  EXPECT_EQ(eps_loss([&](const Tensor&, int) { return eps; }, z0, 30, eps, s).item(), 0.0);
  double ms = 0;
  for (double e : eps.data()) ms += e * e;
  EXPECT_NEAR(eps_loss([&](const Tensor& z, int) { return Tensor(z.shape()); }, z0, 30, eps, s).item(),
              ms / 10.0, 1e-15);
}

namespace {

// Two-layer noise predictor on [B, dim] rows with a scalar time feature.
struct ToyEps {
  Linear l1, l2;
  ToyEps(std::int64_t dim, std::int64_t hidden, Rng& rng)
      : l1(dim + 2, hidden, true, rng), l2(hidden, dim, true, rng) {}
  Tensor operator()(const Tensor& z, int t, int T) const {
    const double phase = static_cast<double>(t) / T;
    Tensor tf(Shape{z.dim(0), 2});
    for (std::int64_t i = 0; i < z.dim(0); ++i) {
      tf.data()[i * 2] = std::sin(3.0 * phase);
      tf.data()[i * 2 + 1] = std::cos(3.0 * phase);
    }
    return l2(silu(l1(concat_last({z, tf}))));
  }
  ParamList params() const {
    ParamList p;
    l1.collect(p, "l1");
    l2.collect(p, "l2");
    return p;
  }
};

}  // namespace

TEST(EpsLoss, GradcheckThroughTwoLayerModel) {
  const auto s = make_schedule(50, 1e-4, 0.02);
  Rng rng(5);
  ToyEps model(3, 6, rng);
  const Tensor z0 = randn({4, 3}, rng), eps = randn({4, 3}, rng);
  const auto ps = model.params();
  const double err = gradcheck_params(
      [&] { return eps_loss([&](const Tensor& z, int t) { return model(z, t, 50); }, z0, 17, eps, s); },
      ps.tensors(), 1e-5);
  EXPECT_LE(err, 1e-4);
}

namespace {

// Trains ToyEps on a single Gaussian mode; returns (first, last) mean losses.
std::pair<double, double> train_one_mode(ToyEps& model, const NoiseSchedule& s, int steps,
                                         const std::vector<double>& mode, double spread, Rng& rng) {
  auto ps = model.params();
  AdamW opt({.lr = 3e-3, .weight_decay = 0.0});
  const auto dim = static_cast<std::int64_t>(mode.size());
  double first = 0, last = 0;
  for (int step = 0; step < steps; ++step) {
    const int t = static_cast<int>(rng.uniform_int(1, s.T));
    Tensor z0(Shape{32, dim});
    for (std::int64_t i = 0; i < 32; ++i)
      for (std::int64_t j = 0; j < dim; ++j) z0.data()[i * dim + j] = mode[j] + spread * rng.normal();
    const Tensor eps = randn({32, dim}, rng);
    ps.zero_grad();
    Tape tape;
    TapeScope scope(&tape);
    Tensor loss = eps_loss([&](const Tensor& z, int tt) { return model(z, tt, s.T); }, z0, t, eps, s);
    tape.backward(loss);
    opt.step(ps);
    if (step < 50) first += loss.item() / 50;
    if (step >= steps - 50) last += loss.item() / 50;
  }
  return {first, last};
}

}  // namespace

TEST(EpsLoss, DecreasesOnOneModeData) {
  const auto s = make_schedule(100, 1e-4, 0.05);
  Rng rng(6);
  ToyEps model(2, 32, rng);
  const auto [first, last] = train_one_mode(model, s, 200, {1.5, -0.5}, 0.1, rng);
  EXPECT_LT(last, first);
}

TEST(Ddpm, TrueNoiseRecoversPosteriorMean) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(7);
  const Tensor z0 = randn({6}, rng), eps = randn({6}, rng);
  for (int t : {2, 10, 500, 1000}) {
    const Tensor zt = q_sample(z0, t, eps, s);
    const Tensor zero(Shape{6});
    const Tensor mu = ddpm_update(zt, eps, t, t - 1, s, zero);
    const double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), b = s.beta(t), a = s.alpha(t);
    for (std::size_t i = 0; i < 6; ++i) {
      const double post = std::sqrt(abp) * b / (1 - ab) * z0[i] + std::sqrt(a) * (1 - abp) / (1 - ab) * zt[i];
      EXPECT_NEAR(mu[i], post, 1e-10) << "t=" << t;
    }
  }
}

TEST(Ddpm, FinalStepAddsNoNoise) {
  const auto s = make_schedule(100, 1e-4, 0.02);
  Rng rng(8);
  const Tensor z = randn({5}, rng);
  auto model = [](const Tensor& x, int) { return scale(x, 0.3); };
  const Tensor a = ddpm_step(model, z, 1, s, randn({5}, rng));
  const Tensor b = ddpm_step(model, z, 1, s, randn({5}, rng));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_THROW(ddpm_step(model, z, 0, s, z), ContractError);
  EXPECT_THROW(ddpm_step(model, z, 101, s, z), ContractError);
}

TEST(Cfg, ScalesAreExact) {
  Rng rng(9);
  const Tensor c = randn({7}, rng), u = randn({7}, rng);
  const Tensor one = cfg_combine(c, u, 1.0), zero = cfg_combine(c, u, 0.0), g = cfg_combine(c, u, 2.5);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(one[i], c[i]);
    EXPECT_EQ(zero[i], u[i]);
    EXPECT_NEAR(g[i], u[i] + 2.5 * (c[i] - u[i]), 1e-14);
  }
  EXPECT_THROW(cfg_combine(c, Tensor({6}), 1.0), DimensionError);
}

TEST(Sample, DeterministicAndFullScheduleMatchesManualLoop) {
  const auto s = make_schedule(40, 1e-4, 0.05);
  auto model = [](const Tensor& x, int t) { return scale(x, 0.5 + 0.01 * t); };
  SampleOptions opt{.steps = 40, .cfg_scale = 1.0, .seed = 42};
  const Tensor a = sample(model, nullptr, {3, 2}, s, opt);
  const Tensor b = sample(model, nullptr, {3, 2}, s, opt);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  Rng rng(42);
  Tensor z = randn({3, 2}, rng);
  for (int t = 40; t >= 1; --t) z = ddpm_step(model, z, t, s, randn({3, 2}, rng));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], z[i]);
  const auto ts = sample_timesteps(1000, 25);
  EXPECT_EQ(ts.front(), 1000);
  EXPECT_EQ(ts.back(), 40);
  EXPECT_EQ(ts.size(), 25u);
  EXPECT_THROW(sample_timesteps(10, 11), ContractError);
}

TEST(Sample, ShapesSurviveFullLoop) {
  const auto s = make_schedule(30, 1e-4, 0.05);
  int calls = 0;
  SampleOptions opt{.steps = 30, .cfg_scale = 2.5, .seed = 1,
                    .after_step = [&](Tensor& z, int) { ++calls; EXPECT_EQ(z.shape(), (Shape{2, 4, 4})); }};
  auto m = [](const Tensor& x, int) { return scale(x, 0.1); };
  const Tensor z = sample(m, m, {2, 4, 4}, s, opt);
  EXPECT_EQ(z.shape(), (Shape{2, 4, 4}));
  EXPECT_EQ(calls, 30);
}

TEST(Sample, TrainedOneModeModelHitsDataMean) {
  const auto s = make_schedule(100, 1e-4, 0.05);
  Rng rng(10);
  ToyEps model(2, 32, rng);
  const std::vector<double> mode{1.5, -0.5};
  train_one_mode(model, s, 1500, mode, 0.1, rng);
  auto eps = [&](const Tensor& z, int t) { return model(z, t, s.T); };
  const Tensor out = sample(eps, nullptr, {256, 2}, s, {.steps = 100, .cfg_scale = 1.0, .seed = 3});
  for (std::int64_t j = 0; j < 2; ++j) {
    double m = 0;
    for (std::int64_t i = 0; i < 256; ++i) m += out[i * 2 + j] / 256.0;
    EXPECT_NEAR(m, mode[j], 3 * 0.1) << "dim " << j;
  }
}
