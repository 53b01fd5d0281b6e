#include "opama/pipeline.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "opama/checkpoint.hpp"
#include "opama/error.hpp"
#include "opama/image_io.hpp"

namespace opama {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = kPi / 180.0;

using Rgb = std::array<double, 3>;

struct Palette {
  const char* name;
  Rgb sky_top, sky_low, ground_high, ground_low;
  std::array<Rgb, 3> boxes;
};

const std::array<Palette, 8>& palettes() {
  static const std::array<Palette, 8> p{{
      {"warm", {0.55, 0.45, 0.60}, {0.95, 0.78, 0.55}, {0.55, 0.40, 0.30}, {0.30, 0.20, 0.15},
       {{{0.90, 0.15, 0.10}, {0.95, 0.85, 0.10}, {0.20, 0.55, 0.90}}}},
      {"cool", {0.20, 0.35, 0.70}, {0.65, 0.80, 0.95}, {0.35, 0.50, 0.45}, {0.15, 0.25, 0.25},
       {{{0.95, 0.95, 0.95}, {0.90, 0.30, 0.60}, {0.10, 0.10, 0.10}}}},
      {"desert", {0.35, 0.55, 0.85}, {0.85, 0.90, 0.95}, {0.90, 0.75, 0.50}, {0.70, 0.50, 0.30},
       {{{0.20, 0.45, 0.20}, {0.60, 0.10, 0.10}, {0.10, 0.20, 0.60}}}},
      {"forest", {0.40, 0.60, 0.80}, {0.80, 0.88, 0.85}, {0.25, 0.45, 0.20}, {0.10, 0.25, 0.10},
       {{{0.85, 0.55, 0.10}, {0.95, 0.95, 0.30}, {0.60, 0.20, 0.70}}}},
      {"ocean", {0.10, 0.30, 0.65}, {0.60, 0.80, 0.95}, {0.05, 0.35, 0.55}, {0.02, 0.15, 0.30},
       {{{0.95, 0.50, 0.10}, {0.95, 0.95, 0.95}, {0.90, 0.20, 0.20}}}},
      {"sunset", {0.30, 0.15, 0.40}, {0.98, 0.55, 0.25}, {0.30, 0.20, 0.25}, {0.10, 0.05, 0.10},
       {{{0.10, 0.80, 0.80}, {0.95, 0.90, 0.40}, {0.30, 0.90, 0.30}}}},
      {"night", {0.02, 0.02, 0.10}, {0.15, 0.15, 0.35}, {0.10, 0.10, 0.12}, {0.03, 0.03, 0.05},
       {{{0.95, 0.85, 0.30}, {0.30, 0.85, 0.95}, {0.90, 0.30, 0.30}}}},
      {"snowy", {0.60, 0.70, 0.85}, {0.90, 0.92, 0.95}, {0.95, 0.95, 0.97}, {0.80, 0.82, 0.88},
       {{{0.70, 0.10, 0.10}, {0.10, 0.30, 0.10}, {0.20, 0.20, 0.50}}}},
  }};
  return p;
}

const Palette& find_palette(const std::string& name) {
  for (const auto& p : palettes())
    if (name == p.name) return p;
  throw ContractError("synth_panorama: unknown palette '" + name + "'");
}

Rgb lerp(const Rgb& a, const Rgb& b, double s) {
  return {a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s};
}

double lon_of(const Vec3& d) { return std::atan2(d[0], d[2]); }
double lat_of(const Vec3& d) { return std::asin(std::clamp(d[1], -1.0, 1.0)); }

double angle_between(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(a[0] * b[0] + a[1] * b[1] + a[2] * b[2], -1.0, 1.0));
}

Vec3 normalize(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// point at angular distance rho from c along bearing theta
Vec3 offset_direction(const Vec3& c, double rho, double theta) {
  const Vec3 helper = std::abs(c[1]) < 0.9 ? Vec3{0, 1, 0} : Vec3{1, 0, 0};
  const Vec3 e1 = normalize(cross(c, helper));
  const Vec3 e2 = cross(c, e1);
  Vec3 p;
  for (int k = 0; k < 3; ++k)
    p[static_cast<std::size_t>(k)] = std::cos(rho) * c[static_cast<std::size_t>(k)] +
                                     std::sin(rho) * (std::cos(theta) * e1[static_cast<std::size_t>(k)] +
                                                      std::sin(theta) * e2[static_cast<std::size_t>(k)]);
  return normalize(p);
}

EquirectImage zero_unknown(const EquirectImage& img) {
  EquirectImage out;
  out.pixels = img.pixels.detach();
  out.mask = img.mask;
  auto pd = out.pixels.data();
  const auto ch = static_cast<std::size_t>(img.channels());
  for (std::size_t i = 0; i < img.mask.size(); ++i)
    if (img.mask[i] < 0.5)
      for (std::size_t k = 0; k < ch; ++k) pd[i * ch + k] = 0.0;
  return out;
}

std::size_t unknown_in_frustum(const EquirectImage& img, const ViewCoords& coords) {
  std::size_t n = 0;
  const auto w = img.width(), h = img.height();
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u)
      if (img.mask[static_cast<std::size_t>(v * w + u)] < 0.5 && in_frustum(coords, u, v, w, h)) ++n;
  return n;
}

std::string fmt_coords(const ViewCoords& c) {
  std::ostringstream os;
  os << "lon=" << c.lon << " lat=" << c.lat << " fov=" << c.fov;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic scenes

const std::vector<std::string>& palette_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& p : palettes()) n.emplace_back(p.name);
    return n;
  }();
  return names;
}

SynthSceneSpec random_scene_spec(std::uint64_t seed) {
  Rng rng = Rng(seed).split("scene");
  SynthSceneSpec spec;
  spec.seed = seed;
  spec.palette = palette_names()[static_cast<std::size_t>(rng.uniform_int(0, 7))];
  spec.horizon = rng.uniform(-15.0, 15.0);
  spec.boxes = static_cast<int>(rng.uniform_int(1, 5));
  return spec;
}

std::string scene_caption(const SynthSceneSpec& spec) {
  return "a " + spec.palette + " scene with " + std::to_string(spec.boxes) + " boxes";
}

SynthScene synth_panorama(const SynthSceneSpec& spec, int width, int height) {
  if (height < 2 || width != 2 * height) throw ContractError("synth_panorama: need W == 2H");
  if (spec.boxes < 1 || spec.boxes > 5) throw ContractError("synth_panorama: boxes must be in 1..5");
  if (std::abs(spec.horizon) > 60.0) throw ContractError("synth_panorama: horizon must be in [-60, 60]");
  const Palette& pal = find_palette(spec.palette);

  struct Box {
    double lon, lat, half_w, half_h;
    Rgb color;
  };
  // one box per longitude sector; sectors start at the seam so no box crosses it
  Rng rng = Rng(spec.seed).split("boxes");
  const double sector = 360.0 / spec.boxes;
  std::vector<Box> boxes;
  for (int i = 0; i < spec.boxes; ++i) {
    Box b;
    b.half_w = rng.uniform(6.0, std::min(15.0, sector / 2.0 - 6.0));
    const double slack = sector / 2.0 - 6.0 - b.half_w;
    b.lon = -180.0 + (i + 0.5) * sector + rng.uniform(-slack, slack);
    b.lat = rng.uniform(-35.0, 35.0);
    b.half_h = rng.uniform(6.0, 14.0);
    b.color = pal.boxes[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    boxes.push_back(b);
  }

  Tensor px(Shape{height, width, 3});
  auto pd = px.data();
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) {
      const Vec3 d = dir_from_equirect(u, v, width, height);
      const double lon = lon_of(d) / kDeg, lat = lat_of(d) / kDeg;
      Rgb c = lat >= spec.horizon
                  ? lerp(pal.sky_low, pal.sky_top, (lat - spec.horizon) / (90.0 - spec.horizon))
                  : lerp(pal.ground_high, pal.ground_low, (spec.horizon - lat) / (90.0 + spec.horizon));
      for (const auto& b : boxes) {
        double dl = std::fmod(lon - b.lon + 540.0, 360.0) - 180.0;
        if (std::abs(dl) <= b.half_w && std::abs(lat - b.lat) <= b.half_h) c = b.color;
      }
      std::copy(c.begin(), c.end(), pd.begin() + (static_cast<std::size_t>(v) * width + u) * 3);
    }
  return {EquirectImage(px), scene_caption(spec)};
}

// ---------------------------------------------------------------------------
// Latent codec

namespace {

Tensor avg_pool(const Tensor& rgb, int f) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3 || rgb.dim(0) % f != 0 || rgb.dim(1) % f != 0)
    throw DimensionError("latent encode: expected [H,W,3] with H, W divisible by " + std::to_string(f) +
                         ", got " + shape_str(rgb.shape()));
  const auto h = rgb.dim(0) / f, w = rgb.dim(1) / f, W = rgb.dim(1);
  Tensor out(Shape{h, w, 3});
  auto o = out.data();
  const double inv = 1.0 / (f * f);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (int k = 0; k < 3; ++k) {
        double s = 0;
        for (int a = 0; a < f; ++a)
          for (int b = 0; b < f; ++b) s += rgb[static_cast<std::size_t>(((i * f + a) * W + j * f + b) * 3 + k)];
        o[static_cast<std::size_t>((i * w + j) * 3 + k)] = s * inv;
      }
  return out;
}

}  // namespace

LatentCodec LatentCodec::fit(const std::vector<Tensor>& images) {
  if (images.empty()) throw ContractError("LatentCodec::fit: no images");
  Eigen::Vector3d mu = Eigen::Vector3d::Zero();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  std::size_t n = 0;
  std::vector<Tensor> pooled;
  for (const auto& img : images) pooled.push_back(avg_pool(img, kFactor));
  for (const auto& p : pooled)
    for (std::size_t i = 0; i < p.size() / 3; ++i, ++n) mu += Eigen::Vector3d(p[i * 3], p[i * 3 + 1], p[i * 3 + 2]);
  mu /= static_cast<double>(n);
  for (const auto& p : pooled)
    for (std::size_t i = 0; i < p.size() / 3; ++i) {
      Eigen::Vector3d x = Eigen::Vector3d(p[i * 3], p[i * 3 + 1], p[i * 3 + 2]) - mu;
      cov += x * x.transpose();
    }
  cov /= static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Matrix3d white;  // rows: principal axes scaled to unit variance
  for (int r = 0; r < 3; ++r)
    white.row(r) = eig.eigenvectors().col(r).transpose() / std::sqrt(std::max(eig.eigenvalues()(r), 1e-8));
  Eigen::Matrix<double, 4, 3> enc;
  enc.topRows<3>() = white;
  enc.row(3) = white.colwise().sum() / std::sqrt(3.0);
  const Eigen::Matrix<double, 3, 4> dec = (enc.transpose() * enc).inverse() * enc.transpose();

  LatentCodec c;
  c.mean = Tensor(Shape{3}, std::vector<double>{mu(0), mu(1), mu(2)});
  c.encoder = Tensor(Shape{3, 4});
  c.decoder = Tensor(Shape{4, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      c.encoder.data()[static_cast<std::size_t>(i * 4 + j)] = enc(j, i);
      c.decoder.data()[static_cast<std::size_t>(j * 3 + i)] = dec(i, j);
    }
  return c;
}

Tensor LatentCodec::encode(const Tensor& rgb) const {
  if (!fitted()) throw ContractError("latent codec is not fitted");
  Tensor p = avg_pool(rgb, kFactor);
  const auto cells = p.size() / 3;
  Tensor out(Shape{p.dim(0), p.dim(1), 4});
  auto o = out.data();
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += (p[i * 3 + k] - mean[k]) * encoder[k * 4 + j];
      o[i * 4 + j] = s;
    }
  return out;
}

Tensor LatentCodec::decode(const Tensor& z) const {
  if (!fitted()) throw ContractError("latent codec is not fitted");
  if (z.rank() != 3 || z.dim(2) != 4) throw DimensionError("latent decode: expected [h,w,4], got " + shape_str(z.shape()));
  const auto h = z.dim(0), w = z.dim(1);
  std::vector<double> small(static_cast<std::size_t>(h * w * 3));
  for (std::size_t i = 0; i < static_cast<std::size_t>(h * w); ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = mean[k];
      for (std::size_t j = 0; j < 4; ++j) s += z[i * 4 + j] * decoder[j * 3 + k];
      small[i * 3 + k] = s;
    }
  const auto H = h * kFactor, W = w * kFactor;
  Tensor out(Shape{H, W, 3});
  auto o = out.data();
  for (std::int64_t r = 0; r < H; ++r) {
    const double y = std::clamp((r + 0.5) / kFactor - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::int64_t>(y);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::int64_t c = 0; c < W; ++c) {
      const double x = std::clamp((c + 0.5) / kFactor - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::int64_t>(x);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double fx = x - static_cast<double>(x0);
      for (std::int64_t k = 0; k < 3; ++k) {
        auto at = [&](std::int64_t yy, std::int64_t xx) { return small[static_cast<std::size_t>((yy * w + xx) * 3 + k)]; };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        o[static_cast<std::size_t>((r * W + c) * 3 + k)] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

void LatentCodec::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "mean"), mean);
  out.add(join_name(prefix, "encoder"), encoder);
  out.add(join_name(prefix, "decoder"), decoder);
}

Tensor latent_mask(const Tensor& pixel_mask) {
  constexpr int f = LatentCodec::kFactor;
  if (pixel_mask.rank() != 2 || pixel_mask.dim(0) % f != 0 || pixel_mask.dim(1) % f != 0)
    throw DimensionError("latent_mask: expected [H,W] divisible by 4, got " + shape_str(pixel_mask.shape()));
  const auto h = pixel_mask.dim(0) / f, w = pixel_mask.dim(1) / f, W = pixel_mask.dim(1);
  Tensor out(Shape{h, w});
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) {
      bool all = true;
      for (int a = 0; a < f && all; ++a)
        for (int b = 0; b < f && all; ++b)
          all = pixel_mask[static_cast<std::size_t>((i * f + a) * W + j * f + b)] >= 0.5;
      out.data()[static_cast<std::size_t>(i * w + j)] = all ? 1.0 : 0.0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Models

Models::Models(const RunConfig& config) : cfg(config) {
  cfg.validate();
  if (!cfg.vocab.empty()) vocab = Vocabulary::load(cfg.vocab);
  const Rng root = Rng(cfg.seed).split("init");
  const auto cc = conditioning_config();
  Rng r1 = root.split("text_encoder"), r2 = root.split("image_encoder"), r3 = root.split("vcr"),
      r4 = root.split("gma"), r5 = root.split("unet");
  text_encoder = ToyTextEncoder(vocab.size(), cc, r1);
  image_encoder = ToyImageEncoder(cc, r2);
  vcr = Vcr(cc, r3);
  gma = Gma(cc, r4);
  unet = UNet(unet_config(), r5);
}

ConditioningConfig Models::conditioning_config() const {
  ConditioningConfig c;
  c.d_model = cfg.d_model;
  c.ssm_state = cfg.ssm_state;
  c.vcr_blocks = cfg.vcr_blocks;
  c.image_size = cfg.cond_size;
  c.gma_width = cfg.gma_width;
  c.gma_active_scales = cfg.gma_active_scales;
  c.unet_widths = unet_config().widths();
  return c;
}

UNetConfig Models::unet_config() const {
  UNetConfig u;
  u.base = cfg.unet_base;
  u.context_dim = cfg.d_model;
  return u;
}

ParamList Models::encoder_params() const {
  ParamList p;
  text_encoder.collect(p, "text_encoder");
  image_encoder.collect(p, "image_encoder");
  return p;
}

ParamList Models::trainable_params() const {
  ParamList p;
  vcr.collect(p, "vcr");
  gma.collect(p, "gma");
  unet.collect(p, "unet");
  return p;
}

ParamList Models::all_params() const {
  ParamList p = encoder_params();
  p.append(trainable_params());
  return p;
}

Conditions build_conditions(const Models& models, const EquirectImage& panorama,
                            const ViewCoords& coords, const std::string& text) {
  const auto s = models.cfg.cond_size;
  const EquirectImage masked = zero_unknown(panorama);
  const CubeMap cube = equirect_to_cubemap(masked, s);
  const NFoVView local = extract_nfov(masked, coords, s);
  Conditions c;
  c.c_vcr = models.vcr
                .forward(build_clip_condition(models.image_encoder, models.text_encoder, models.vocab, cube, text))
                .c_vcr;
  c.gma = models.gma.forward(make_gma_inputs(local, cube));
  return c;
}

void save_training_checkpoint(const std::filesystem::path& path, const Models& models,
                              const AdamW& opt, std::int64_t step) {
  if (!models.codec.fitted()) throw ContractError("checkpoint: latent codec is not fitted");
  ParamList all = models.all_params();
  models.codec.collect(all, "codec");
  all.append(opt.state());
  all.add("train.step", Tensor(Shape{1}, std::vector<double>{static_cast<double>(step)}));
  save_checkpoint(path.string(), all);
}

std::int64_t load_training_checkpoint(const std::filesystem::path& path, Models& models, AdamW* opt) {
  const ParamList src = load_checkpoint(path.string());
  models.codec.mean = Tensor(Shape{3});
  models.codec.encoder = Tensor(Shape{3, 4});
  models.codec.decoder = Tensor(Shape{4, 3});
  ParamList target = models.all_params();
  models.codec.collect(target, "codec");
  assign_parameters(target, src);
  if (opt) opt->load_state(src);
  const Parameter* step = src.find("train.step");
  return step ? static_cast<std::int64_t>(step->tensor.item()) : 0;
}

// ---------------------------------------------------------------------------
// Training

std::vector<CorpusItem> make_corpus(const RunConfig& cfg) {
  std::vector<CorpusItem> corpus;
  const Rng root = Rng(cfg.seed).split("corpus");
  for (int i = 0; i < cfg.corpus_size; ++i) {
    Rng r = root.split(static_cast<std::uint64_t>(i));
    auto scene = synth_panorama(random_scene_spec(r.engine()()), cfg.pano_w, cfg.pano_h);
    corpus.push_back({std::move(scene.image), std::move(scene.caption)});
  }
  return corpus;
}

TrainingTriplet make_triplet(const CorpusItem& item, const RunConfig& cfg, Rng& rng) {
  const auto w = item.panorama.width(), h = item.panorama.height();
  const Vec3 center = dir_from_lonlat(rng.uniform(-kPi, kPi), std::asin(rng.uniform(-0.7, 0.7)));
  const double radius = rng.uniform(35.0, 110.0) * kDeg;

  TrainingTriplet tr;
  tr.text = item.caption;
  tr.panorama.pixels = item.panorama.pixels;
  tr.panorama.mask = Tensor(Shape{h, w});
  auto md = tr.panorama.mask.data();
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u)
      md[static_cast<std::size_t>(v * w + u)] = angle_between(dir_from_equirect(u, v, w, h), center) < radius ? 1.0 : 0.0;

  // a view straddling the cap edge; the cap center is the fallback
  tr.coords = {lon_of(center) / kDeg, lat_of(center) / kDeg, cfg.view_fov};
  for (int attempt = 0; attempt < 16; ++attempt) {
    const double rho = radius + rng.uniform(-cfg.view_fov / 3.0, cfg.view_fov / 6.0) * kDeg;
    const Vec3 p = offset_direction(center, std::max(rho, 0.0), rng.uniform(0.0, 2.0 * kPi));
    ViewCoords c{wrap_lon(lon_of(p) / kDeg), std::clamp(lat_of(p) / kDeg, -80.0, 80.0), cfg.view_fov};
    const Tensor vm = extract_nfov(tr.panorama, c, cfg.view_size).mask;
    double known = 0;
    for (double m : vm.data()) known += m;
    if (known > 0 && known < static_cast<double>(vm.size())) {
      tr.coords = c;
      break;
    }
  }
  tr.coords.lon = wrap_lon(tr.coords.lon);
  return tr;
}

double train_step(Models& models, AdamW& opt, const TrainingTriplet& triplet,
                  const NoiseSchedule& sched, Rng& rng, bool train_encoders) {
  const auto& cfg = models.cfg;
  const auto& pano = triplet.panorama;
  if (!pano.pixels.defined() || !pano.mask.defined() || pano.pixels.rank() != 3 ||
      pano.mask.shape() != Shape{pano.height(), pano.width()})
    throw ContractError("train_step: triplet panorama must carry pixels [H,W,3] and mask [H,W]");
  validate(triplet.coords);
  const Tensor seen = extract_nfov(pano, triplet.coords, cfg.view_size).mask;
  if (std::none_of(seen.data().begin(), seen.data().end(), [](double m) { return m >= 0.5; }))
    throw ContractError("train_step: the view at " + fmt_coords(triplet.coords) + " has no known pixel");

  const Tensor z0 = models.codec.encode(extract_nfov(EquirectImage(pano.pixels), triplet.coords, cfg.view_size).image);
  const int t = static_cast<int>(rng.uniform_int(1, sched.T));
  const Tensor eps = randn(z0.shape(), rng);
  const std::string text = text_dropout(triplet.text, rng, cfg.text_drop);

  ParamList encoders = models.encoder_params();
  encoders.set_requires_grad(train_encoders);
  ParamList params = models.trainable_params();
  if (train_encoders) params.append(encoders);
  params.zero_grad();

  Tape tape;
  TapeScope scope(&tape);
  const Conditions c = build_conditions(models, pano, triplet.coords, text);
  const EpsModel model = [&](const Tensor& z, int tt) { return models.unet.forward(z, tt, c.c_vcr, &c.gma); };
  const Tensor loss = eps_loss(model, z0, t, eps, sched);
  tape.backward(loss);
  opt.step(params);
  return loss.item();
}

TrainSummary train(Models& models, const std::vector<CorpusItem>& corpus, const TrainOptions& options) {
  if (corpus.empty()) throw ContractError("train: empty corpus");
  if (options.steps < 0) throw ContractError("train: steps must be >= 0");
  const auto started = std::chrono::steady_clock::now();
  const auto& cfg = models.cfg;
  AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  std::int64_t step = 0;
  if (!options.resume.empty()) {
    step = load_training_checkpoint(options.resume, models, &opt);
  } else {
    std::vector<Tensor> images;
    for (const auto& item : corpus) images.push_back(item.panorama.pixels);
    models.codec = LatentCodec::fit(images);
  }
  const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  std::ofstream csv;
  if (!options.loss_csv.empty()) {
    const bool append = !options.resume.empty() && std::filesystem::exists(options.loss_csv) &&
                        std::filesystem::file_size(options.loss_csv) > 0;
    csv.open(options.loss_csv, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + options.loss_csv.string());
    if (!append) csv << "step,loss,lr\n";
    csv << std::setprecision(10);
  }

  TrainSummary summary;
  summary.first_step = step + 1;
  const Rng root = Rng(cfg.seed).split("train");
  for (std::int64_t i = 0; i < options.steps; ++i) {
    ++step;
    Rng rng = root.split(static_cast<std::uint64_t>(step));
    const auto& item = corpus[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))];
    const TrainingTriplet triplet = make_triplet(item, cfg, rng);
    const double loss = train_step(models, opt, triplet, sched, rng, step <= cfg.warmup_steps);
    summary.losses.push_back(loss);
    if (csv.is_open()) csv << step << "," << loss << "," << cfg.lr << "\n";
    if (options.on_step) options.on_step(step, loss);
  }
  models.encoder_params().set_requires_grad(step <= cfg.warmup_steps);
  summary.last_step = step;
  if (!options.checkpoint.empty()) save_training_checkpoint(options.checkpoint, models, opt, step);
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return summary;
}

// ---------------------------------------------------------------------------
// Generation

ViewPlan plan_views(const ViewCoords& start, double fov, int n_yaw, bool include_caps, int width, int height) {
  validate(start);
  validate({0.0, 0.0, fov});
  if (n_yaw < 2) throw ContractError("plan_views: n_yaw must be >= 2");
  const double step = 360.0 / n_yaw;
  ViewPlan plan;
  plan.overlap = (fov - step) / fov;
  if (plan.overlap < 0.25)
    throw ContractError("plan_views: " + std::to_string(n_yaw) + " views of fov " + std::to_string(fov) +
                        " overlap by less than 25%");
  plan.views.push_back(start);
  if (start.lat != 0.0) plan.views.push_back({start.lon, 0.0, fov});
  for (int k = 1; static_cast<int>(plan.views.size()) < n_yaw + (start.lat != 0.0 ? 1 : 0); ++k) {
    plan.views.push_back({wrap_lon(start.lon + k * step), 0.0, fov});
    if (k * step < 180.0 - 1e-9 && static_cast<int>(plan.views.size()) < n_yaw + (start.lat != 0.0 ? 1 : 0))
      plan.views.push_back({wrap_lon(start.lon - k * step), 0.0, fov});
  }
  if (include_caps) {
    const double cap = std::min(120.0, fov * 4.0 / 3.0);
    plan.views.push_back({start.lon, 90.0, cap});
    plan.views.push_back({start.lon, -90.0, cap});
    for (int v = 0; v < height; ++v)
      for (int u = 0; u < width; ++u) {
        const bool covered = std::any_of(plan.views.begin(), plan.views.end(),
                                         [&](const ViewCoords& c) { return in_frustum(c, u, v, width, height); });
        if (!covered)
          throw ContractError("plan_views: pixel (" + std::to_string(u) + "," + std::to_string(v) +
                              ") is not covered by any view");
      }
  }
  return plan;
}

EquirectImage outpaint_step(const Models& models, const EquirectImage& panorama,
                            const ViewCoords& coords, const std::string& text,
                            const NoiseSchedule& sched, double cfg_scale, Rng& rng, bool allow_unknown) {
  TapeScope no_grad(nullptr);
  const auto& cfg = models.cfg;
  const NFoVView view = extract_nfov(panorama, coords, cfg.view_size);
  const bool any_known = std::any_of(view.mask.data().begin(), view.mask.data().end(), [](double m) { return m >= 0.5; });
  if (!any_known && !allow_unknown)
    throw ContractError("outpaint_step: the frustum at " + fmt_coords(coords) + " has no known pixel");

  const Tensor z_known = models.codec.encode(view.image);
  const Tensor cell_known = latent_mask(view.mask);
  const Conditions cond = build_conditions(models, panorama, coords, text);
  const Conditions uncond = text.empty() ? Conditions{} : build_conditions(models, panorama, coords, "");
  const EpsModel f_cond = [&](const Tensor& z, int t) { return models.unet.forward(z, t, cond.c_vcr, &cond.gma); };
  EpsModel f_uncond;
  if (!text.empty())
    f_uncond = [&](const Tensor& z, int t) { return models.unet.forward(z, t, uncond.c_vcr, &uncond.gma); };

  SampleOptions opts;
  opts.steps = cfg.sample_steps;
  opts.cfg_scale = cfg_scale;
  opts.seed = rng.engine()();
  Rng blend = Rng(opts.seed).split("blend");
  opts.after_step = [&](Tensor& z, int t_prev) {
    const Tensor noise = randn(z_known.shape(), blend);
    const Tensor known_t = t_prev > 0 ? q_sample(z_known, t_prev, noise, sched) : z_known;
    auto zd = z.data();
    for (std::size_t i = 0; i < zd.size(); ++i)
      if (cell_known[i / 4] >= 0.5) zd[i] = known_t[i];
  };
  const Tensor z = opama::sample(f_cond, f_uncond, z_known.shape(), sched, opts);

  NFoVView generated{coords, models.codec.decode(z), Tensor(Shape{cfg.view_size, cfg.view_size}, 1.0)};
  return composite_nfov(panorama, generated, {.only_unknown = true});
}

GenerateResult generate_panorama(const Models& models, const NFoVView* seed_view, const std::string& text) {
  if (!seed_view && text.empty()) throw ContractError("generate: need a seed view, a text prompt or both");
  const auto& cfg = models.cfg;
  const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  const Rng root = Rng(cfg.seed).split("generate");

  GenerateResult res;
  res.panorama = EquirectImage(cfg.pano_w, cfg.pano_h, 3);
  ViewCoords start{0.0, 0.0, cfg.view_fov};
  if (seed_view) {
    start = seed_view->coords;
    res.panorama = composite_nfov(res.panorama, *seed_view);
    res.log.push_back("seed " + fmt_coords(start));
  } else {
    Rng r = root.split("init");
    res.panorama = outpaint_step(models, res.panorama, start, text, sched, cfg.cfg_scale, r, true);
    res.log.push_back("init " + fmt_coords(start));
  }

  ViewPlan plan = plan_views(start, cfg.view_fov, cfg.n_yaw, true, cfg.pano_w, cfg.pano_h);
  plan.views.front().fov = cfg.view_fov;
  for (std::size_t i = 0; i < plan.views.size(); ++i) {
    const auto& c = plan.views[i];
    const std::size_t before = res.panorama.unknown_count();
    if (unknown_in_frustum(res.panorama, c) == 0) {
      res.log.push_back("view " + std::to_string(i) + " " + fmt_coords(c) + " skipped");
      continue;
    }
    Rng r = root.split(static_cast<std::uint64_t>(i));
    res.panorama = outpaint_step(models, res.panorama, c, text, sched, cfg.cfg_scale, r);
    res.log.push_back("view " + std::to_string(i) + " " + fmt_coords(c) + " unknown " +
                      std::to_string(before) + " -> " + std::to_string(res.panorama.unknown_count()));
  }
  if (res.panorama.unknown_count() != 0)
    throw ContractError("generate: " + std::to_string(res.panorama.unknown_count()) + " pixels left unknown");
  return res;
}

void write_outputs(const std::filesystem::path& dir, const GenerateResult& result, const RunConfig& cfg,
                   const std::vector<std::string>& extra_meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_image(dir / "panorama.png", result.panorama.pixels);
  write_image(dir / "mask.png", result.panorama.mask);
  std::ofstream meta(dir / "meta.txt");
  if (!meta) throw IoError("cannot write " + (dir / "meta.txt").string());
  meta << "# config\n" << cfg.to_text() << "# run\n";
  for (const auto& line : extra_meta) meta << line << "\n";
  meta << "# steps\n";
  for (const auto& line : result.log) meta << line << "\n";
}

}  // namespace opama
