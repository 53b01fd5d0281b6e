#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace opama {

/// Run configuration shared by training and generation. Text form is one
/// `key = value` pair per line; `#` starts a comment.
struct RunConfig {
  // diffusion
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int sample_steps = 25;
  double cfg_scale = 2.5;
  // panorama and views
  int pano_w = 128;
  int pano_h = 64;
  double view_fov = 90.0;
  int n_yaw = 6;
  int view_size = 32;   // pixels of the denoised view
  int cond_size = 64;   // cube face / adapter input extent
  // model
  std::vector<int> gma_active_scales{2, 3, 4};
  int d_model = 64;
  int ssm_state = 16;
  int vcr_blocks = 8;
  int gma_width = 32;
  int unet_base = 32;
  // training
  std::uint64_t seed = 0;
  double lr = 1e-4;
  double weight_decay = 0.01;
  int warmup_steps = 200;
  int corpus_size = 64;
  double text_drop = 0.5;
  std::string vocab;  // optional vocabulary file; empty uses the built-in list

  /// Sets one key from its text value. Throws ContractError for unknown keys
  /// or unparseable values.
  void set(const std::string& key, const std::string& value);
  /// Throws ContractError when values are inconsistent.
  void validate() const;
  /// Canonical `key = value` text; parse(to_text()) reproduces the config.
  std::string to_text() const;
};

RunConfig parse_config(const std::string& text);
/// Throws IoError when the file cannot be read.
RunConfig load_config(const std::filesystem::path& path);

}  // namespace opama
