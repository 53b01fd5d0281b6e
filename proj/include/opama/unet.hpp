#pragma once

#include <array>
#include <vector>

#include "opama/nn.hpp"

namespace opama {

struct UNetConfig {
  std::int64_t latent_channels = 4;
  std::int64_t base = 32;                      // stage widths base * {1,2,3,4}
  std::array<std::int64_t, 4> mult{1, 2, 3, 4};
  std::int64_t context_dim = 64;               // width of c_vcr rows
  int groups = 8;

  std::int64_t width(int stage) const { return base * mult[static_cast<std::size_t>(stage)]; }
  std::int64_t time_dim() const { return 4 * base; }
  std::array<std::int64_t, 4> widths() const { return {width(0), width(1), width(2), width(3)}; }
};

/// Sinusoidal features of t: [sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. ]
/// with geometric frequencies w_i = 10000^(-i/h), h = dim / 2.
Tensor sinusoidal_features(double t, std::int64_t dim);

/// 3x3 convolution with bias on [H, W, C].
struct Conv2d {
  Tensor weight;  // [k*k*Cin, Cout]
  Tensor bias;    // [Cout]
  int kernel = 3, stride = 1;

  Conv2d() = default;
  Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct GroupNorm {
  Tensor gamma, beta;
  int groups = 8;

  GroupNorm() = default;
  GroupNorm(std::int64_t channels, int groups);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// GN -> SiLU -> conv -> + time -> GN -> SiLU -> conv, plus a 1x1 skip when
/// the width changes.
struct ResBlock {
  GroupNorm norm1, norm2;
  Conv2d conv1, conv2;
  Linear time_proj;
  Linear skip;  // undefined weight when cin == cout

  ResBlock() = default;
  ResBlock(std::int64_t cin, std::int64_t cout, std::int64_t time_dim, int groups, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& temb) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Single-head scaled dot-product attention from image positions to the
/// context rows, residual.
struct CrossAttention {
  GroupNorm norm;
  Linear q, k, v, o;

  CrossAttention() = default;
  CrossAttention(std::int64_t channels, std::int64_t context_dim, int groups, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& context) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Noise predictor over channels-last latents [H, W, C_lat]. Encoder stage s
/// runs at extent H / 2^(s-1); the adapter condition of stage s is added at
/// the stage input through a zero-initialized projection.
struct UNet {
  UNetConfig cfg;
  Linear time_mlp1, time_mlp2;
  Conv2d stem;
  struct EncoderStage {
    Linear inject;
    std::array<ResBlock, 2> res;
    CrossAttention attn;
    Conv2d down;  // to the next stage, absent after the last
  };
  struct DecoderStage {
    ResBlock res;  // consumes concat(h, skip)
    CrossAttention attn;
    Conv2d up;  // after nearest upsampling, absent at stage 1
  };
  std::array<EncoderStage, 4> encoder;
  ResBlock mid;
  std::array<DecoderStage, 4> decoder;  // indexed by stage
  GroupNorm out_norm;
  Conv2d out_conv;

  UNet() = default;
  UNet(const UNetConfig& cfg, Rng& rng);

  Tensor time_embed(int t) const;

  /// gma may be null (no adapter); otherwise four conditions whose extents
  /// and widths match the encoder stages.
  Tensor forward(const Tensor& z_t, int t, const Tensor& context,
                 const std::array<Tensor, 4>* gma = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace opama
