#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "opama/geometry.hpp"
#include "opama/nn.hpp"
#include "opama/ssm.hpp"

namespace opama {

inline constexpr std::int64_t kTextTokens = 77;
inline constexpr std::int64_t kOmniRows = 6;
inline constexpr std::int64_t kClipRows = kOmniRows + kTextTokens;  // 83

/// Word-level tokenizer: lowercases, splits on whitespace and strips
/// punctuation. Id 0 is the pad token and id 1 the unknown-word token.
class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;

  Vocabulary();  // built-in word list covering the synthetic captions
  explicit Vocabulary(const std::vector<std::string>& words);
  static Vocabulary load(const std::filesystem::path& path);

  std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
  std::int64_t id(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }

  /// Exactly kTextTokens ids: truncated, then padded with kPad.
  std::vector<std::int64_t> encode(const std::string& text) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int64_t> index_;
};

/// Shared width settings for the conditioning stack.
struct ConditioningConfig {
  std::int64_t d_model = 64;      // context width d
  std::int64_t ssm_state = 16;    // N of every Mamba block
  std::int64_t vcr_blocks = 8;
  std::int64_t image_size = 64;   // GMA / image-encoder input extent
  std::int64_t gma_width = 32;    // GMA feature width
  std::vector<int> gma_active_scales{2, 3, 4};
  std::array<std::int64_t, 4> unet_widths{32, 64, 96, 128};

  MambaConfig mamba(std::int64_t width) const;
};

/// Stand-in for the frozen CLIP text tower: embedding + two Mamba blocks.
struct ToyTextEncoder {
  Tensor embedding;  // [V, d]
  std::array<MambaBlock, 2> blocks;

  ToyTextEncoder() = default;
  ToyTextEncoder(std::int64_t vocab_size, const ConditioningConfig& cfg, Rng& rng);

  /// ids (kTextTokens) -> [77, d].
  Tensor encode(const std::vector<std::int64_t>& ids) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Stand-in for the frozen CLIP image tower: 8x8 patch embedding, two 2D
/// Mamba blocks and a mean-pool. Input images carry RGB + validity mask.
struct ToyImageEncoder {
  static constexpr int kPatch = 8;
  static constexpr std::int64_t kChannels = 4;
  Linear patch_embed;
  std::array<Mamba2DBlock, 2> blocks;

  ToyImageEncoder() = default;
  ToyImageEncoder(const ConditioningConfig& cfg, Rng& rng);

  /// [S, S, 4] -> [1, d].
  Tensor encode(const Tensor& image) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Appends the mask as a fourth channel and zero-fills unknown pixels.
Tensor with_mask_channel(const Tensor& rgb, const Tensor& mask);

/// c_clip [83, d]: the six face encodings (order F, L, B, R, U, D) followed by
/// the 77 text rows.
Tensor build_clip_condition(const ToyImageEncoder& image_encoder,
                            const ToyTextEncoder& text_encoder, const Vocabulary& vocab,
                            const CubeMap& cube, const std::string& text);

struct VcrOutput {
  Tensor c_vcr;    // [83, d]
  Tensor c_prime;  // [83, d]
  Tensor alpha;    // [83, 1]
};

/// Visual-textual consistency refiner:
///   z = Mamba^8(c_clip + E),  c' = h1(z),  alpha = sigmoid(h2(z)) per row,
///   c_vcr = alpha * c' + (1 - alpha) * c_clip.
struct Vcr {
  Tensor pos_emb;  // [83, d]
  std::vector<MambaBlock> blocks;
  Linear h1;  // d -> d
  Linear h2;  // d -> 1

  Vcr() = default;
  Vcr(const ConditioningConfig& cfg, Rng& rng);

  VcrOutput forward(const Tensor& c_clip) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Inputs to the adapter: the local view plus the six cube faces, each
/// [S, S, 7] = RGB, validity mask and ray direction.
struct GmaInputs {
  Tensor local;
  std::array<Tensor, 6> faces;  // indexed by Face
};

/// Builds the seven [S, S, 7] adapter inputs from a view and a cubemap.
GmaInputs make_gma_inputs(const NFoVView& local, const CubeMap& cube);

/// Global-local Mamba adapter with four scales at 1/8 .. 1/64 of the input.
struct Gma {
  static constexpr int kScales = 4;
  static constexpr int kStemPatch = 8;
  static constexpr std::int64_t kInChannels = 7;

  std::array<Linear, kScales> stems;           // scale 1: patch 8; scales 2-4: 2x2 merge
  std::array<Mamba2DBlock, kScales> shared;    // per-image 2D block
  std::array<MambaBlock, kScales> global_local;
  std::array<Linear, kScales> out_proj;        // to the denoiser stage width
  std::vector<int> active_scales;              // 1-based

  Gma() = default;
  Gma(const ConditioningConfig& cfg, Rng& rng);

  bool is_active(int scale) const;
  /// Four spatial conditions, scale s (1-based) of extent S / 2^(s+2).
  std::array<Tensor, kScales> forward(const GmaInputs& in) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Training-time prompt drop: "" with probability p, else the text.
std::string text_dropout(const std::string& text, Rng& rng, double p = 0.5);

}  // namespace opama
