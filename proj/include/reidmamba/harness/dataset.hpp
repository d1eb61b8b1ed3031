#pragma once

// Procedural person-like images for end-to-end runs, PK batch sampling and
// training-time augmentation.

#include "reidmamba/harness/config.hpp"
#include "reidmamba/image.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace reidmamba {

struct Sample {
  Image image;
  int identity = 0;  // training split: 0..T-1; test splits: global identity id
  int camera = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> query;    // camera 0 images of the test identities
  std::vector<Sample> gallery;  // remaining cameras of the test identities
  int num_train_identities = 0;
};

/// Each identity gets seeded head/torso/leg colors, a stripe pattern and an
/// accessory block. Every image adds a per-camera color shift and
/// background, a small translation jitter and Gaussian pixel noise. The
/// first train_identities identities form the training split.
Dataset generate_synthetic_dataset(const SynthSpec& spec, std::uint64_t seed);

/// One P x K batch: P distinct identities, K distinct instances each.
/// Throws std::invalid_argument when the labels cannot supply it.
std::vector<int> pk_sample(const std::vector<int>& labels, int p, int k, std::mt19937_64& rng);

/// Epoch-wise PK sampling: each epoch visits a fresh identity permutation in
/// chunks of P, so no identity repeats inside an epoch; identities left over
/// after the last full chunk are skipped for that epoch.
class PkSampler {
 public:
  PkSampler(std::vector<int> labels, int p, int k, std::uint64_t seed);
  std::vector<int> next();
  int steps_per_epoch() const { return static_cast<int>(ids_.size()) / p_; }

 private:
  std::vector<int> labels_;
  std::vector<int> ids_;
  std::vector<std::vector<int>> members_;
  int p_;
  int k_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
};

/// Flip, pad-and-crop and random erasing, each per its toggle.
Image augment(const Image& img, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Deterministic 64-bit mix of up to four counters; used to derive
/// independent streams for (seed, step, sample, block).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0, std::uint64_t d = 0);

/// Uniform in [0, 1) from mix_seed.
double counter_uniform(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d);

}  // namespace reidmamba
