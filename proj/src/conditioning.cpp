#include "opama/conditioning.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "opama/error.hpp"

namespace opama {

namespace {

const std::vector<std::string>& builtin_words() {
  static const std::vector<std::string> words{
      "<pad>", "<unk>", "a", "an", "the", "scene", "with", "and", "of", "in", "on", "under",
      "box", "boxes", "sky", "ground", "horizon", "room", "outdoor", "indoor", "view",
      "panorama", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "warm", "cool", "desert",
      "forest", "ocean", "sunset", "night", "snowy", "red", "green", "blue", "yellow", "white",
      "black", "bright", "dark", "large", "small"};
  return words;
}

std::string normalize_word(const std::string& raw) {
  std::string w;
  for (unsigned char ch : raw)
    if (std::isalnum(ch) || ch == '<' || ch == '>') w.push_back(static_cast<char>(std::tolower(ch)));
  return w;
}

Tensor ones_row(std::int64_t d) { return Tensor(Shape{1, d}, 1.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(builtin_words()) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  auto push = [&](const std::string& w) {
    if (w.empty() || index_.count(w)) return;
    index_.emplace(w, static_cast<std::int64_t>(words_.size()));
    words_.push_back(w);
  };
  push("<pad>");
  push("<unk>");
  for (const auto& w : words) push(normalize_word(w));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(words);
}

std::int64_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(normalize_word(word));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::int64_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::int64_t> ids;
  std::istringstream ss(text);
  std::string raw;
  while (ss >> raw && static_cast<std::int64_t>(ids.size()) < kTextTokens) {
    const std::string w = normalize_word(raw);
    if (!w.empty()) ids.push_back(id(w));
  }
  ids.resize(static_cast<std::size_t>(kTextTokens), kPad);
  return ids;
}

// ---------------------------------------------------------------------------
// Encoders

MambaConfig ConditioningConfig::mamba(std::int64_t width) const {
  MambaConfig m;
  m.d_model = width;
  m.state = ssm_state;
  return m;
}

ToyTextEncoder::ToyTextEncoder(std::int64_t vocab_size, const ConditioningConfig& cfg, Rng& rng) {
  embedding = init_uniform({vocab_size, cfg.d_model}, 1.0, rng);
  for (auto& b : blocks) b = MambaBlock(cfg.mamba(cfg.d_model), rng);
}

Tensor ToyTextEncoder::encode(const std::vector<std::int64_t>& ids) const {
  if (static_cast<std::int64_t>(ids.size()) != kTextTokens)
    throw DimensionError("ToyTextEncoder: expected " + std::to_string(kTextTokens) + " ids");
  Tensor h = opama::embedding(embedding, ids);
  for (const auto& b : blocks) h = b.forward(h);
  return h;
}

void ToyTextEncoder::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "embedding"), embedding);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(out, join_name(prefix, "block" + std::to_string(i)));
}

ToyImageEncoder::ToyImageEncoder(const ConditioningConfig& cfg, Rng& rng) {
  patch_embed = Linear(kPatch * kPatch * kChannels, cfg.d_model, true, rng);
  for (auto& b : blocks) b = Mamba2DBlock(cfg.mamba(cfg.d_model), rng);
}

Tensor ToyImageEncoder::encode(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != kChannels || image.dim(0) % kPatch != 0 ||
      image.dim(1) % kPatch != 0)
    throw DimensionError("ToyImageEncoder: expected [S,S,4] with S divisible by 8, got " +
                         shape_str(image.shape()));
  const auto gh = image.dim(0) / kPatch, gw = image.dim(1) / kPatch;
  const auto d = patch_embed.out_features();
  Tensor h = reshape(patch_embed(patchify(image, kPatch)), {gh, gw, d});
  for (const auto& b : blocks) h = b.forward(h);
  return reduce(reshape(h, {1, gh * gw, d}), ReduceOp::mean, {1});
}

void ToyImageEncoder::collect(ParamList& out, const std::string& prefix) const {
  patch_embed.collect(out, join_name(prefix, "patch_embed"));
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(out, join_name(prefix, "block" + std::to_string(i)));
}

Tensor with_mask_channel(const Tensor& rgb, const Tensor& mask) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3 || mask.shape() != Shape{rgb.dim(0), rgb.dim(1)})
    throw DimensionError("with_mask_channel: rgb " + shape_str(rgb.shape()) + " mask " +
                         shape_str(mask.shape()));
  const auto n = rgb.dim(0) * rgb.dim(1);
  Tensor out(Shape{rgb.dim(0), rgb.dim(1), 4});
  auto o = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double m = mask[static_cast<std::size_t>(i)] >= 0.5 ? 1.0 : 0.0;
    for (int k = 0; k < 3; ++k) o[i * 4 + k] = rgb[static_cast<std::size_t>(i * 3 + k)] * m;
    o[i * 4 + 3] = m;
  }
  return out;
}

Tensor build_clip_condition(const ToyImageEncoder& image_encoder,
                            const ToyTextEncoder& text_encoder, const Vocabulary& vocab,
                            const CubeMap& cube, const std::string& text) {
  std::vector<Tensor> rows;
  for (Face f : kFaceOrder)
    rows.push_back(image_encoder.encode(with_mask_channel(cube.face(f), cube.mask(f))));
  rows.push_back(text_encoder.encode(vocab.encode(text)));
  return concat_rows(rows);
}

// ---------------------------------------------------------------------------
// VCR

Vcr::Vcr(const ConditioningConfig& cfg, Rng& rng) {
  pos_emb = init_uniform({kClipRows, cfg.d_model}, 0.02, rng);
  for (std::int64_t i = 0; i < cfg.vcr_blocks; ++i) blocks.emplace_back(cfg.mamba(cfg.d_model), rng);
  h1 = Linear(cfg.d_model, cfg.d_model, true, rng);
  h2 = Linear(cfg.d_model, 1, true, rng);
}

VcrOutput Vcr::forward(const Tensor& c_clip) const {
  if (c_clip.shape() != pos_emb.shape())
    throw DimensionError("vcr_forward: c_clip must be " + shape_str(pos_emb.shape()) + ", got " +
                         shape_str(c_clip.shape()));
  Tensor z = add(c_clip, pos_emb);
  for (const auto& b : blocks) z = b.forward(z);
  VcrOutput out;
  out.c_prime = h1(z);
  out.alpha = sigmoid(h2(z));
  const Tensor a = matmul(out.alpha, ones_row(c_clip.dim(1)));
  out.c_vcr = add(mul(a, out.c_prime), mul(add_scalar(neg(a), 1.0), c_clip));
  return out;
}

void Vcr::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "pos_emb"), pos_emb);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(out, join_name(prefix, "block" + std::to_string(i)));
  h1.collect(out, join_name(prefix, "h1"));
  h2.collect(out, join_name(prefix, "h2"));
}

// ---------------------------------------------------------------------------
// GMA

GmaInputs make_gma_inputs(const NFoVView& local, const CubeMap& cube) {
  const auto s = local.image.dim(0);
  if (cube.face_size != s)
    throw DimensionError("gma_forward: local view extent " + std::to_string(s) +
                         " differs from face size " + std::to_string(cube.face_size));
  auto build = [&](const Tensor& rgb, const Tensor& mask, const Tensor& dirs) {
    return concat_last({with_mask_channel(rgb, mask), dirs});
  };
  GmaInputs in;
  in.local = build(local.image, local.mask, coord_channels(local.coords, s));
  for (Face f : kFaceOrder)
    in.faces[static_cast<int>(f)] = build(cube.face(f), cube.mask(f), coord_channels(f, s));
  return in;
}

Gma::Gma(const ConditioningConfig& cfg, Rng& rng) : active_scales(cfg.gma_active_scales) {
  for (int s : active_scales)
    if (s < 1 || s > kScales) throw ContractError("gma_active_scales entries must be in 1..4");
  const auto g = cfg.gma_width;
  for (int s = 0; s < kScales; ++s) {
    const std::int64_t in = s == 0 ? kStemPatch * kStemPatch * kInChannels : 4 * g;
    stems[s] = Linear(in, g, true, rng);
    shared[s] = Mamba2DBlock(cfg.mamba(g), rng);
    global_local[s] = MambaBlock(cfg.mamba(g), rng);
    out_proj[s] = Linear(g, cfg.unet_widths[static_cast<std::size_t>(s)], true, rng);
  }
}

bool Gma::is_active(int scale) const {
  return std::find(active_scales.begin(), active_scales.end(), scale) != active_scales.end();
}

std::array<Tensor, Gma::kScales> Gma::forward(const GmaInputs& in) const {
  // chain order: faces in listing order, then the local view
  std::vector<Tensor> imgs;
  for (Face f : kFaceOrder) imgs.push_back(in.faces[static_cast<int>(f)]);
  imgs.push_back(in.local);
  const auto s0 = in.local.dim(0);
  for (const auto& im : imgs)
    if (im.shape() != Shape{s0, s0, kInChannels})
      throw DimensionError("gma_forward: every input must be [" + std::to_string(s0) + "," +
                           std::to_string(s0) + ",7], got " + shape_str(im.shape()));
  if (s0 % 64 != 0) throw DimensionError("gma_forward: input extent must be divisible by 64");

  const auto g = stems[0].out_features();
  std::array<Tensor, kScales> outs;
  std::vector<Tensor> grids(imgs.size());
  for (int s = 0; s < kScales; ++s) {
    const std::int64_t ext = s0 >> (s + 3);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      Tensor tokens = s == 0 ? patchify(imgs[i], kStemPatch) : patchify(grids[i], 2);
      grids[i] = shared[s].forward(reshape(stems[s](tokens), {ext, ext, g}));
    }
    Tensor local;
    if (is_active(s + 1)) {
      std::vector<Tensor> segs;
      for (const auto& gr : grids) segs.push_back(reshape(gr, {ext * ext, g}));
      local = global_local_scan(global_local[s], segs).outputs.back();
    } else {
      local = reshape(grids.back(), {ext * ext, g});
    }
    outs[s] = reshape(out_proj[s](local), {ext, ext, out_proj[s].out_features()});
  }
  return outs;
}

void Gma::collect(ParamList& out, const std::string& prefix) const {
  for (int s = 0; s < kScales; ++s) {
    const std::string p = join_name(prefix, "scale" + std::to_string(s + 1));
    stems[s].collect(out, join_name(p, "stem"));
    shared[s].collect(out, join_name(p, "shared"));
    if (is_active(s + 1)) global_local[s].collect(out, join_name(p, "global_local"));
    out_proj[s].collect(out, join_name(p, "out_proj"));
  }
}

std::string text_dropout(const std::string& text, Rng& rng, double p) {
  return rng.bernoulli(p) ? std::string() : text;
}

}  // namespace opama
