#include "opama/unet.hpp"

#include <cmath>

#include "opama/error.hpp"

namespace opama {

namespace {

// Linear map over the channel axis of [H, W, C].
Tensor linear_spatial(const Linear& l, const Tensor& x) {
  const auto h = x.dim(0), w = x.dim(1);
  return reshape(l(reshape(x, {h * w, x.dim(2)})), {h, w, l.out_features()});
}

Linear zero_linear(std::int64_t in, std::int64_t out) {
  Linear l;
  l.weight = Tensor(Shape{in, out});
  l.weight.set_requires_grad(true);
  l.bias = Tensor(Shape{out});
  l.bias.set_requires_grad(true);
  return l;
}

}  // namespace

Tensor sinusoidal_features(double t, std::int64_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ContractError("sinusoidal_features: dim must be even");
  const auto half = dim / 2;
  Tensor out(Shape{dim});
  auto o = out.data();
  for (std::int64_t i = 0; i < half; ++i) {
    const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    o[i] = std::sin(t * w);
    o[half + i] = std::cos(t * w);
  }
  return out;
}

Conv2d::Conv2d(std::int64_t cin, std::int64_t cout, int k, int s, Rng& rng)
    : weight(init_fan_in({k * k * cin, cout}, k * k * cin, rng)), bias(Shape{cout}), kernel(k), stride(s) {
  bias.set_requires_grad(true);
}

Tensor Conv2d::operator()(const Tensor& x) const {
  return conv2d(x, weight, bias, kernel, stride, kernel / 2);
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "weight"), weight);
  out.add(join_name(prefix, "bias"), bias);
}

GroupNorm::GroupNorm(std::int64_t channels, int g)
    : gamma(Shape{channels}, 1.0), beta(Shape{channels}), groups(g) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

Tensor GroupNorm::operator()(const Tensor& x) const { return group_norm(x, gamma, beta, groups); }

void GroupNorm::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "gamma"), gamma);
  out.add(join_name(prefix, "beta"), beta);
}

ResBlock::ResBlock(std::int64_t cin, std::int64_t cout, std::int64_t time_dim, int groups, Rng& rng)
    : norm1(cin, groups), norm2(cout, groups), conv1(cin, cout, 3, 1, rng), conv2(cout, cout, 3, 1, rng),
      time_proj(time_dim, cout, true, rng) {
  if (cin != cout) skip = Linear(cin, cout, true, rng);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1(silu(norm1(x)));
  h = add(h, reshape(time_proj(silu(temb)), {conv1.bias.dim(0)}));
  h = conv2(silu(norm2(h)));
  return add(skip.weight.defined() ? linear_spatial(skip, x) : x, h);
}

void ResBlock::collect(ParamList& out, const std::string& prefix) const {
  norm1.collect(out, join_name(prefix, "norm1"));
  conv1.collect(out, join_name(prefix, "conv1"));
  time_proj.collect(out, join_name(prefix, "time_proj"));
  norm2.collect(out, join_name(prefix, "norm2"));
  conv2.collect(out, join_name(prefix, "conv2"));
  if (skip.weight.defined()) skip.collect(out, join_name(prefix, "skip"));
}

CrossAttention::CrossAttention(std::int64_t channels, std::int64_t context_dim, int groups, Rng& rng)
    : norm(channels, groups), q(channels, channels, false, rng), k(context_dim, channels, false, rng),
      v(context_dim, channels, false, rng), o(channels, channels, true, rng) {}

Tensor CrossAttention::forward(const Tensor& x, const Tensor& context) const {
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (context.rank() != 2 || context.dim(1) != k.in_features())
    throw DimensionError("cross-attention: context must be [L," + std::to_string(k.in_features()) +
                         "], got " + shape_str(context.shape()));
  Tensor xs = reshape(norm(x), {h * w, c});
  Tensor scores = scale(matmul(q(xs), transpose(k(context))), 1.0 / std::sqrt(static_cast<double>(c)));
  Tensor attended = o(matmul(softmax_last(scores), v(context)));
  return add(x, reshape(attended, {h, w, c}));
}

void CrossAttention::collect(ParamList& out, const std::string& prefix) const {
  norm.collect(out, join_name(prefix, "norm"));
  q.collect(out, join_name(prefix, "q"));
  k.collect(out, join_name(prefix, "k"));
  v.collect(out, join_name(prefix, "v"));
  o.collect(out, join_name(prefix, "o"));
}

UNet::UNet(const UNetConfig& config, Rng& rng) : cfg(config) {
  const auto td = cfg.time_dim();
  time_mlp1 = Linear(cfg.base, td, true, rng);
  time_mlp2 = Linear(td, td, true, rng);
  stem = Conv2d(cfg.latent_channels, cfg.width(0), 3, 1, rng);
  for (int s = 0; s < 4; ++s) {
    const auto c = cfg.width(s);
    auto& e = encoder[static_cast<std::size_t>(s)];
    e.inject = zero_linear(c, c);
    e.res = {ResBlock(c, c, td, cfg.groups, rng), ResBlock(c, c, td, cfg.groups, rng)};
    e.attn = CrossAttention(c, cfg.context_dim, cfg.groups, rng);
    if (s < 3) e.down = Conv2d(c, cfg.width(s + 1), 3, 2, rng);
  }
  mid = ResBlock(cfg.width(3), cfg.width(3), td, cfg.groups, rng);
  for (int s = 3; s >= 0; --s) {
    const auto c = cfg.width(s);
    auto& d = decoder[static_cast<std::size_t>(s)];
    d.res = ResBlock(2 * c, c, td, cfg.groups, rng);
    d.attn = CrossAttention(c, cfg.context_dim, cfg.groups, rng);
    if (s > 0) d.up = Conv2d(c, cfg.width(s - 1), 3, 1, rng);
  }
  out_norm = GroupNorm(cfg.width(0), cfg.groups);
  out_conv = Conv2d(cfg.width(0), cfg.latent_channels, 3, 1, rng);
}

Tensor UNet::time_embed(int t) const {
  Tensor f = reshape(sinusoidal_features(static_cast<double>(t), cfg.base), {1, cfg.base});
  return time_mlp2(silu(time_mlp1(f)));
}

Tensor UNet::forward(const Tensor& z_t, int t, const Tensor& context,
                     const std::array<Tensor, 4>* gma) const {
  if (z_t.rank() != 3 || z_t.dim(2) != cfg.latent_channels || z_t.dim(0) % 8 != 0 ||
      z_t.dim(1) % 8 != 0 || z_t.dim(0) < 8 || z_t.dim(1) < 8)
    throw DimensionError("unet_forward: latent must be [H,W," + std::to_string(cfg.latent_channels) +
                         "] with H, W divisible by 8, got " + shape_str(z_t.shape()));
  if (gma)
    for (int s = 0; s < 4; ++s) {
      const Shape want{z_t.dim(0) >> s, z_t.dim(1) >> s, cfg.width(s)};
      if ((*gma)[static_cast<std::size_t>(s)].shape() != want)
        throw DimensionError("unet_forward: adapter condition " + std::to_string(s + 1) + " is " +
                             shape_str((*gma)[static_cast<std::size_t>(s)].shape()) + ", stage expects " +
                             shape_str(want));
    }
  const Tensor temb = time_embed(t);
  Tensor h = stem(z_t);
  std::array<Tensor, 4> skips;
  for (int s = 0; s < 4; ++s) {
    const auto& e = encoder[static_cast<std::size_t>(s)];
    if (gma) h = add(h, linear_spatial(e.inject, (*gma)[static_cast<std::size_t>(s)]));
    for (const auto& r : e.res) h = r.forward(h, temb);
    h = e.attn.forward(h, context);
    skips[static_cast<std::size_t>(s)] = h;
    if (s < 3) h = e.down(h);
  }
  h = mid.forward(h, temb);
  for (int s = 3; s >= 0; --s) {
    const auto& d = decoder[static_cast<std::size_t>(s)];
    h = d.res.forward(concat_last({h, skips[static_cast<std::size_t>(s)]}), temb);
    h = d.attn.forward(h, context);
    if (s > 0) h = d.up(upsample_nearest2(h));
  }
  return out_conv(silu(out_norm(h)));
}

void UNet::collect(ParamList& out, const std::string& prefix) const {
  time_mlp1.collect(out, join_name(prefix, "time_mlp1"));
  time_mlp2.collect(out, join_name(prefix, "time_mlp2"));
  stem.collect(out, join_name(prefix, "stem"));
  for (int s = 0; s < 4; ++s) {
    const auto& e = encoder[static_cast<std::size_t>(s)];
    const std::string p = join_name(prefix, "enc" + std::to_string(s + 1));
    e.inject.collect(out, join_name(p, "gma_inject"));
    e.res[0].collect(out, join_name(p, "res0"));
    e.res[1].collect(out, join_name(p, "res1"));
    e.attn.collect(out, join_name(p, "attn"));
    if (s < 3) e.down.collect(out, join_name(p, "down"));
  }
  mid.collect(out, join_name(prefix, "mid"));
  for (int s = 3; s >= 0; --s) {
    const auto& d = decoder[static_cast<std::size_t>(s)];
    const std::string p = join_name(prefix, "dec" + std::to_string(s + 1));
    d.res.collect(out, join_name(p, "res"));
    d.attn.collect(out, join_name(p, "attn"));
    if (s > 0) d.up.collect(out, join_name(p, "up"));
  }
  out_norm.collect(out, join_name(prefix, "out_norm"));
  out_conv.collect(out, join_name(prefix, "out_conv"));
}

}  // namespace opama
