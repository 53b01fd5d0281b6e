#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "opama/conditioning.hpp"
#include "opama/config.hpp"
#include "opama/diffusion.hpp"
#include "opama/geometry.hpp"
#include "opama/unet.hpp"

namespace opama {

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SynthSceneSpec {
  std::uint64_t seed = 0;
  std::string palette = "warm";
  double horizon = 0.0;  // latitude of the horizon, degrees
  int boxes = 3;         // 1..5
};

const std::vector<std::string>& palette_names();
/// Palette, horizon and box count drawn from the seed.
SynthSceneSpec random_scene_spec(std::uint64_t seed);
/// "a {palette} scene with {n} boxes"
std::string scene_caption(const SynthSceneSpec& spec);

struct SynthScene {
  EquirectImage image;  // fully known
  std::string caption;
};

/// Sky/ground gradient split at the horizon plus solid boxes bounded in
/// longitude and latitude. Every pixel is shaded from its ray direction, so
/// the wrap seam is continuous. Requires W == 2H.
SynthScene synth_panorama(const SynthSceneSpec& spec, int width, int height);

// ---------------------------------------------------------------------------
// Latent codec

/// Frozen surrogate for the image autoencoder: 4x average pooling followed by
/// a whitening map to four channels, decoded by its pseudo-inverse and
/// bilinear upsampling. Not differentiable; it only moves data in and out of
/// latent space.
struct LatentCodec {
  static constexpr int kFactor = 4;
  Tensor mean;     // [3]
  Tensor encoder;  // [3, 4]
  Tensor decoder;  // [4, 3]

  bool fitted() const { return encoder.defined(); }
  /// Fits mean and whitening on pooled pixels of the images ([H, W, 3]).
  static LatentCodec fit(const std::vector<Tensor>& images);
  /// [S, S', 3] -> [S/4, S'/4, 4].
  Tensor encode(const Tensor& rgb) const;
  /// [h, w, 4] -> [4h, 4w, 3], clamped to [0, 1].
  Tensor decode(const Tensor& z) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Pixel mask [S, S'] -> latent mask [S/4, S'/4]; a cell is known only when
/// all of its pixels are known.
Tensor latent_mask(const Tensor& pixel_mask);

// ---------------------------------------------------------------------------
// Models

struct Models {
  RunConfig cfg;
  Vocabulary vocab;
  ToyTextEncoder text_encoder;
  ToyImageEncoder image_encoder;
  Vcr vcr;
  Gma gma;
  UNet unet;
  LatentCodec codec;

  /// Fresh parameters drawn from cfg.seed.
  explicit Models(const RunConfig& cfg);

  ConditioningConfig conditioning_config() const;
  UNetConfig unet_config() const;
  ParamList encoder_params() const;    // text and image encoders
  ParamList trainable_params() const;  // VCR, adapter and denoiser
  ParamList all_params() const;
};

struct Conditions {
  Tensor c_vcr;                // [83, d]
  std::array<Tensor, 4> gma;   // per denoiser stage
};

/// Conditions for the view at `coords`: cube faces and the local view are
/// taken from the panorama with unknown pixels zeroed.
Conditions build_conditions(const Models& models, const EquirectImage& panorama,
                            const ViewCoords& coords, const std::string& text);

/// Saves parameters, codec, optimizer state and the step counter.
void save_training_checkpoint(const std::filesystem::path& path, const Models& models,
                              const AdamW& opt, std::int64_t step);
/// Restores what save_training_checkpoint wrote; returns the step counter.
/// `opt` may be null when only the weights are needed.
std::int64_t load_training_checkpoint(const std::filesystem::path& path, Models& models, AdamW* opt);

// ---------------------------------------------------------------------------
// Training

/// One training sample. `panorama.pixels` is the complete image the target
/// view is cut from; `panorama.mask` marks the part the conditions may see.
struct TrainingTriplet {
  EquirectImage panorama;
  ViewCoords coords;
  std::string text;
};

struct CorpusItem {
  EquirectImage panorama;
  std::string caption;
};

std::vector<CorpusItem> make_corpus(const RunConfig& cfg);

/// Random known cap on the item and a view straddling its edge.
TrainingTriplet make_triplet(const CorpusItem& item, const RunConfig& cfg, Rng& rng);

/// One optimizer step on the noise-prediction loss. Updates VCR, adapter and
/// denoiser, plus the encoders when `train_encoders` is set. Returns the loss.
double train_step(Models& models, AdamW& opt, const TrainingTriplet& triplet,
                  const NoiseSchedule& sched, Rng& rng, bool train_encoders);

struct TrainOptions {
  std::int64_t steps = 0;
  std::filesystem::path resume;      // checkpoint to continue from
  std::filesystem::path checkpoint;  // written at the end
  std::filesystem::path loss_csv;    // "step,loss,lr" rows
  std::function<void(std::int64_t step, double loss)> on_step;
};

struct TrainSummary {
  std::int64_t first_step = 0;
  std::int64_t last_step = 0;
  std::vector<double> losses;
  double seconds = 0.0;
};

/// Runs steps first_step..: each step draws its sample from (seed, step), so
/// a resumed run reproduces an uninterrupted one.
TrainSummary train(Models& models, const std::vector<CorpusItem>& corpus, const TrainOptions& options);

// ---------------------------------------------------------------------------
// Generation

struct ViewPlan {
  std::vector<ViewCoords> views;
  double overlap = 0.0;  // fraction of the view width shared by ring neighbours
};

/// Start view, then a ring at yaw offsets 0, +s, -s, +2s, ... (s = 360 / n_yaw)
/// and, with caps, one view at each pole. Throws ContractError when ring
/// neighbours overlap by less than 25% or some pixel of a width x height
/// panorama stays uncovered.
ViewPlan plan_views(const ViewCoords& start, double fov, int n_yaw, bool include_caps,
                    int width = 256, int height = 128);

/// Out-paints the view at `coords`: samples a latent while re-imposing the
/// known cells after every step, decodes it and fills the unknown pixels of
/// the frustum. Throws ContractError when no pixel of the frustum is known
/// unless `allow_unknown` is set.
EquirectImage outpaint_step(const Models& models, const EquirectImage& panorama,
                            const ViewCoords& coords, const std::string& text,
                            const NoiseSchedule& sched, double cfg_scale, Rng& rng,
                            bool allow_unknown = false);

struct GenerateResult {
  EquirectImage panorama;
  std::vector<std::string> log;  // one line per view
};

/// Grows a panorama from a seed view, a text prompt or both.
GenerateResult generate_panorama(const Models& models, const NFoVView* seed_view,
                                 const std::string& text);

/// panorama.png, mask.png and meta.txt under `dir`.
void write_outputs(const std::filesystem::path& dir, const GenerateResult& result,
                   const RunConfig& cfg, const std::vector<std::string>& extra_meta);

}  // namespace opama
