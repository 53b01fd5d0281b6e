#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "opama/diffusion.hpp"
#include "opama/error.hpp"
#include "opama/unet.hpp"

using namespace opama;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

UNetConfig tiny(std::int64_t context = 8) {
  UNetConfig c;
  c.base = 8;
  c.context_dim = context;
  return c;
}

std::array<Tensor, 4> random_gma(const UNetConfig& cfg, std::int64_t h, std::int64_t w, Rng& rng) {
  std::array<Tensor, 4> g;
  for (int s = 0; s < 4; ++s) g[s] = random_tensor({h >> s, w >> s, cfg.width(s)}, rng);
  return g;
}

}  // namespace

TEST(TimeEmbed, ZeroPhaseAndWidth) {
  Tensor f = sinusoidal_features(0.0, 16);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(f[i], 0.0);
    EXPECT_EQ(f[8 + i], 1.0);
  }
  EXPECT_THROW(sinusoidal_features(1.0, 7), ContractError);
  Rng rng(1);
  UNet net(tiny(), rng);
  EXPECT_EQ(net.time_embed(5).shape(), (Shape{1, 32}));
}

TEST(TimeEmbed, DistinctBelowTenThousand) {
  Rng rng(2);
  UNet net(tiny(), rng);
  std::set<std::vector<double>> seen;
  for (int t = 0; t < 10000; ++t) {
    Tensor e = net.time_embed(t);
    seen.emplace(e.data().begin(), e.data().end());
  }
  EXPECT_EQ(seen.size(), 10000u);
}

TEST(UNet, ShapePreservedFor32Latents) {
  Rng rng(3);
  UNetConfig cfg;
  cfg.context_dim = 16;
  UNet net(cfg, rng);
  Tensor z = random_tensor({32, 32, 4}, rng);
  Tensor ctx = random_tensor({83, 16}, rng);
  auto g = random_gma(cfg, 32, 32, rng);
  EXPECT_EQ(net.forward(z, 10, ctx, &g).shape(), z.shape());
  Tensor rect = random_tensor({16, 32, 4}, rng);
  EXPECT_EQ(net.forward(rect, 10, ctx, nullptr).shape(), rect.shape());
}

TEST(UNet, ZeroInitInjectionIgnoresAdapter) {
  Rng rng(4);
  UNetConfig cfg = tiny();
  UNet net(cfg, rng);
  Tensor z = random_tensor({8, 8, 4}, rng);
  Tensor ctx = random_tensor({5, 8}, rng);
  auto g1 = random_gma(cfg, 8, 8, rng);
  auto g2 = random_gma(cfg, 8, 8, rng);
  Tensor a = net.forward(z, 3, ctx, &g1);
  EXPECT_EQ(max_abs_diff(a, net.forward(z, 3, ctx, &g2)), 0.0);
  EXPECT_EQ(max_abs_diff(a, net.forward(z, 3, ctx, nullptr)), 0.0);
  // once the injection is nonzero the adapter matters
  for (auto& v : net.encoder[1].inject.weight.data()) v = 0.1;
  EXPECT_GT(max_abs_diff(net.forward(z, 3, ctx, &g1), net.forward(z, 3, ctx, &g2)), 1e-9);
}

TEST(UNet, RejectsMisalignedInputs) {
  Rng rng(5);
  UNetConfig cfg = tiny();
  UNet net(cfg, rng);
  Tensor ctx = random_tensor({5, 8}, rng);
  EXPECT_THROW(net.forward(random_tensor({12, 8, 4}, rng), 1, ctx, nullptr), DimensionError);
  EXPECT_THROW(net.forward(random_tensor({8, 8, 3}, rng), 1, ctx, nullptr), DimensionError);
  EXPECT_THROW(net.forward(random_tensor({8, 8, 4}, rng), 1, random_tensor({5, 7}, rng), nullptr),
               DimensionError);
  auto g = random_gma(cfg, 16, 16, rng);
  EXPECT_THROW(net.forward(random_tensor({8, 8, 4}, rng), 1, ctx, &g), DimensionError);
}

TEST(UNet, ContextSensitivityAndDeterminism) {
  Rng rng(6);
  UNet net(tiny(), rng);
  Tensor z = random_tensor({8, 16, 4}, rng);
  Tensor c1 = random_tensor({5, 8}, rng);
  Tensor c2 = random_tensor({5, 8}, rng);
  Tensor a = net.forward(z, 7, c1, nullptr);
  EXPECT_EQ(max_abs_diff(a, net.forward(z, 7, c1, nullptr)), 0.0);
  EXPECT_GT(max_abs_diff(a, net.forward(z, 7, c2, nullptr)), 1e-9);
  EXPECT_GT(max_abs_diff(a, net.forward(z, 8, c1, nullptr)), 1e-9);
}

TEST(UNet, GradcheckEpsLossWidth8) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    Rng rng(seed);
    UNetConfig cfg = tiny();
    UNet net(cfg, rng);
    // nonzero injection so the adapter path is exercised too
    for (auto& e : net.encoder)
      for (auto& v : e.inject.weight.data()) v = rng.uniform(-0.2, 0.2);
    auto sched = make_schedule(100, 1e-4, 0.02);
    Tensor z0 = random_tensor({8, 8, 4}, rng);
    Tensor eps = random_tensor({8, 8, 4}, rng);
    Tensor ctx = random_tensor({5, 8}, rng);
    auto g = random_gma(cfg, 8, 8, rng);
    ctx.set_requires_grad(true);
    for (auto& t : g) t.set_requires_grad(true);
    ParamList ps;
    net.collect(ps, "unet");
    auto all = ps.tensors();
    all.push_back(ctx);
    for (auto& t : g) all.push_back(t);
    EpsModel model = [&](const Tensor& zt, int t) { return net.forward(zt, t, ctx, &g); };
    double err = gradcheck_params([&] { return eps_loss(model, z0, 40, eps, sched); }, all, 1e-5, 2, seed);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}
