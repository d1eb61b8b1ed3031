#include "reidmamba/harness/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace reidmamba {
namespace {

struct Rgb {
  double v[3];
};

Rgb random_color(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Rgb c;
  for (double& x : c.v) x = u(rng);
  return c;
}

struct Appearance {
  Rgb skin, hair, upper, lower, stripe, accessory;
  double body_half_width = 0.3;  // fraction of image width
  int stripe_region = 0;         // 0 none, 1 torso, 2 legs
  int stripe_period = 4;
  int stripe_width = 2;
  int stripe_phase = 0;
  int accessory_side = 0;  // -1 left, 0 none, +1 right
  double torso_end = 0.55;
};

Appearance make_appearance(std::uint64_t seed, int identity) {
  std::mt19937_64 rng(mix_seed(seed, 1, static_cast<std::uint64_t>(identity)));
  Appearance a;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  a.skin = {{0.55 + 0.3 * u(rng), 0.4 + 0.25 * u(rng), 0.3 + 0.25 * u(rng)}};
  a.hair = random_color(rng, 0.0, 0.35);
  a.upper = random_color(rng, 0.05, 0.95);
  a.lower = random_color(rng, 0.05, 0.95);
  a.stripe = random_color(rng, 0.05, 0.95);
  a.accessory = random_color(rng, 0.05, 0.95);
  a.body_half_width = 0.22 + 0.12 * u(rng);
  a.stripe_region = std::uniform_int_distribution<int>(0, 2)(rng);
  a.stripe_period = std::uniform_int_distribution<int>(3, 7)(rng);
  a.stripe_width = std::uniform_int_distribution<int>(1, a.stripe_period - 1)(rng);
  a.stripe_phase = std::uniform_int_distribution<int>(0, a.stripe_period - 1)(rng);
  a.accessory_side = std::uniform_int_distribution<int>(-1, 1)(rng);
  a.torso_end = 0.5 + 0.1 * u(rng);
  return a;
}

struct CameraLook {
  Rgb background;
  Rgb gain;
  Rgb offset;
};

CameraLook make_camera(std::uint64_t seed, int camera, double shift) {
  std::mt19937_64 rng(mix_seed(seed, 2, static_cast<std::uint64_t>(camera)));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  CameraLook c;
  c.background = random_color(rng, 0.2, 0.8);
  for (int i = 0; i < 3; ++i) {
    c.gain.v[i] = 1.0 + shift * u(rng);
    c.offset.v[i] = shift * u(rng);
  }
  return c;
}

const double* body_color(const Appearance& a, int h, int w, int y, int x) {
  const double fy = (y + 0.5) / h;
  const double dx = std::abs((x + 0.5) / w - 0.5);
  const double hw = a.body_half_width;
  if (fy >= 0.03 && fy < 0.07 && dx < 0.5 * hw) return a.hair.v;
  if (fy >= 0.07 && fy < 0.18 && dx < 0.45 * hw) return a.skin.v;
  if (fy >= 0.18 && fy < a.torso_end) {
    if (a.accessory_side != 0 && fy >= 0.25 && fy < 0.5) {
      const double ax = 0.5 + a.accessory_side * (hw + 0.06);
      if (std::abs((x + 0.5) / w - ax) < 0.08) return a.accessory.v;
    }
    if (dx < hw) {
      if (a.stripe_region == 1 && (y + a.stripe_phase) % a.stripe_period < a.stripe_width) return a.stripe.v;
      return a.upper.v;
    }
  }
  if (fy >= a.torso_end && fy < 0.96 && dx < 0.85 * hw && dx >= 0.1 * hw) {
    if (a.stripe_region == 2 && (y + a.stripe_phase) % a.stripe_period < a.stripe_width) return a.stripe.v;
    return a.lower.v;
  }
  return nullptr;
}

Image render(const Appearance& a, const CameraLook& cam, const SynthSpec& spec, int dy, int dx, double noise,
             std::mt19937_64& rng) {
  Image img(spec.image_height, spec.image_width);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double* body = body_color(a, img.height, img.width, y - dy, x - dx);
      for (int c = 0; c < 3; ++c) {
        double v = body ? cam.gain.v[c] * body[c] + cam.offset.v[c] : cam.background.v[c];
        if (noise > 0.0) v += noise * gauss(rng);
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = splitmix(a);
  h = splitmix(h ^ b);
  h = splitmix(h ^ c);
  return splitmix(h ^ d);
}

double counter_uniform(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  return static_cast<double>(mix_seed(a, b, c, d) >> 11) * 0x1.0p-53;
}

Dataset generate_synthetic_dataset(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate(1, 1);
  std::vector<CameraLook> cameras;
  for (int c = 0; c < spec.num_cameras; ++c) cameras.push_back(make_camera(seed, c, spec.camera_shift));
  Dataset ds;
  ds.num_train_identities = spec.train_identities;
  for (int id = 0; id < spec.num_identities; ++id) {
    const Appearance look = make_appearance(seed, id);
    // The viewpoint offset is fixed per (identity, camera); only noise varies
    // between images from the same camera.
    std::vector<std::pair<int, int>> offsets;
    for (int c = 0; c < spec.num_cameras; ++c) {
      std::mt19937_64 rng(mix_seed(seed, 3, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(c)));
      std::uniform_int_distribution<int> jitter(-2, 2);
      const int dy = jitter(rng);
      offsets.emplace_back(dy, jitter(rng));
    }
    for (int i = 0; i < spec.images_per_identity; ++i) {
      const int cam = i % spec.num_cameras;
      std::mt19937_64 rng(mix_seed(seed, 4, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(i)));
      Sample s;
      s.image = render(look, cameras[static_cast<std::size_t>(cam)], spec, offsets[cam].first, offsets[cam].second,
                       spec.noise, rng);
      s.identity = id;
      s.camera = cam;
      if (id < spec.train_identities) {
        ds.train.push_back(std::move(s));
      } else if (cam == 0) {
        ds.query.push_back(std::move(s));
      } else {
        ds.gallery.push_back(std::move(s));
      }
    }
  }
  return ds;
}

std::vector<int> pk_sample(const std::vector<int>& labels, int p, int k, std::mt19937_64& rng) {
  if (p < 1 || k < 1) throw std::invalid_argument("P and K must be positive");
  std::map<int, std::vector<int>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<int>(i));
  std::vector<int> ids;
  for (const auto& [id, rows] : members) {
    if (static_cast<int>(rows.size()) >= k) ids.push_back(id);
  }
  if (static_cast<int>(ids.size()) < p) {
    throw std::invalid_argument("only " + std::to_string(ids.size()) + " identities have " + std::to_string(k) +
                                " instances, need P=" + std::to_string(p));
  }
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<int> batch;
  batch.reserve(static_cast<std::size_t>(p * k));
  for (int i = 0; i < p; ++i) {
    std::vector<int> rows = members[ids[static_cast<std::size_t>(i)]];
    std::shuffle(rows.begin(), rows.end(), rng);
    batch.insert(batch.end(), rows.begin(), rows.begin() + k);
  }
  return batch;
}

PkSampler::PkSampler(std::vector<int> labels, int p, int k, std::uint64_t seed)
    : labels_(std::move(labels)), p_(p), k_(k), rng_(seed) {
  if (p < 1 || k < 1) throw std::invalid_argument("P and K must be positive");
  std::map<int, std::vector<int>> members;
  for (std::size_t i = 0; i < labels_.size(); ++i) members[labels_[i]].push_back(static_cast<int>(i));
  for (auto& [id, rows] : members) {
    if (static_cast<int>(rows.size()) < k) {
      throw std::invalid_argument("identity " + std::to_string(id) + " has fewer than K=" + std::to_string(k) +
                                  " instances");
    }
    ids_.push_back(id);
    members_.push_back(std::move(rows));
  }
  if (static_cast<int>(ids_.size()) < p) throw std::invalid_argument("fewer identities than P");
}

std::vector<int> PkSampler::next() {
  if (order_.empty() || cursor_ + static_cast<std::size_t>(p_) > order_.size()) {
    order_.resize(ids_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  std::vector<int> batch;
  batch.reserve(static_cast<std::size_t>(p_ * k_));
  for (int i = 0; i < p_; ++i) {
    std::vector<int> rows = members_[static_cast<std::size_t>(order_[cursor_++])];
    std::shuffle(rows.begin(), rows.end(), rng_);
    batch.insert(batch.end(), rows.begin(), rows.begin() + k_);
  }
  return batch;
}

Image augment(const Image& img, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image out = img;
  if (cfg.flip && unit(rng) < 0.5) out = mirror(out);
  if (cfg.pad_crop && cfg.pad > 0) {
    std::uniform_int_distribution<int> shift(0, 2 * cfg.pad);
    const int oy = shift(rng) - cfg.pad;
    const int ox = shift(rng) - cfg.pad;
    Image moved(out.height, out.width);
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const int sy = y + oy;
        const int sx = x + ox;
        if (sy < 0 || sy >= out.height || sx < 0 || sx >= out.width) continue;
        for (int c = 0; c < 3; ++c) moved.at(y, x, c) = out.at(sy, sx, c);
      }
    }
    out = std::move(moved);
  }
  if (cfg.erase && unit(rng) < cfg.erase_prob) {
    const double area = static_cast<double>(out.height) * out.width;
    std::uniform_real_distribution<double> frac(cfg.erase_min_area, cfg.erase_max_area);
    std::uniform_real_distribution<double> log_aspect(std::log(cfg.erase_min_aspect),
                                                      -std::log(cfg.erase_min_aspect));
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = frac(rng) * area;
      const double aspect = std::exp(log_aspect(rng));
      const int h = static_cast<int>(std::lround(std::sqrt(target * aspect)));
      const int w = static_cast<int>(std::lround(std::sqrt(target / aspect)));
      if (h < 1 || w < 1 || h >= out.height || w >= out.width) continue;
      const int y0 = std::uniform_int_distribution<int>(0, out.height - h)(rng);
      const int x0 = std::uniform_int_distribution<int>(0, out.width - w)(rng);
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
          for (int c = 0; c < 3; ++c) out.at(y, x, c) = unit(rng);
        }
      }
      break;
    }
  }
  return out;
}

}  // namespace reidmamba
