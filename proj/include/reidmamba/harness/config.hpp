#pragma once

#include "reidmamba/losses.hpp"
#include "reidmamba/mgfe.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace reidmamba {

struct SynthSpec {
  int num_identities = 80;
  int train_identities = 48;
  int images_per_identity = 8;
  int num_cameras = 4;
  int image_height = 64;
  int image_width = 32;
  double noise = 0.03;
  double camera_shift = 0.12;

  /// Throws std::invalid_argument when the split cannot hold a P x K batch.
  void validate(int batch_p, int batch_k) const;
};

struct AugmentConfig {
  bool flip = true;
  bool pad_crop = true;
  int pad = 10;
  bool erase = true;
  double erase_prob = 0.5;
  double erase_min_area = 0.02;
  double erase_max_area = 0.4;
  double erase_min_aspect = 0.3;
};

struct TrainConfig {
  ModelConfig model;
  SynthSpec data;
  AugmentConfig augment;
  LossConfig loss;
  int epochs = 160;
  int warmup_epochs = 5;
  double base_lr = 0.008;
  double warmup_start_lr = 8e-5;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_p = 16;
  int batch_k = 4;
  std::uint64_t seed = 0;
  int eval_every = 0;  // 0: evaluate once at the end

  void validate() const;
  int batch_size() const { return batch_p * batch_k; }
  int steps_per_epoch() const;
  int total_steps() const { return epochs * steps_per_epoch(); }
  int warmup_steps() const { return warmup_epochs * steps_per_epoch(); }
};

/// The small configuration the test suite trains: D=64, L=6, M=4, r=2, G=2,
/// 64x32 images with 8x8 patches, P=8, K=4 and 300 optimizer steps.
TrainConfig desk_scale_config();

/// Sets one `key = value` setting. Throws std::invalid_argument on an
/// unknown key or a malformed value.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Every supported key.
std::vector<std::string> setting_keys();

/// Line-oriented `key = value` text; '#' starts a comment, blank lines are
/// ignored.
void apply_config_text(TrainConfig& cfg, const std::string& text);
void load_config_file(TrainConfig& cfg, const std::string& path);

/// Current value of every key, in setting_keys() order.
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg);

}  // namespace reidmamba
