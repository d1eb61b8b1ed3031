#include "reidmamba/harness/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace reidmamba {
namespace {

struct Binding {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("bad value '" + text + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "on" || text == "yes") return true;
  if (text == "0" || text == "false" || text == "off" || text == "no") return false;
  throw std::invalid_argument("bad boolean '" + text + "' for " + key);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Binding int_key(std::string key, int& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) { ref = parse_number<int>(key, v); }};
}

Binding double_key(std::string key, double& ref) {
  return {key, [&ref] { return format_double(ref); },
          [&ref, key](const std::string& v) { ref = parse_number<double>(key, v); }};
}

Binding bool_key(std::string key, bool& ref) {
  return {key, [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, key](const std::string& v) { ref = parse_bool(key, v); }};
}

// Image size and camera count live in both the model and the data spec and
// are always set together.
Binding shared_int_key(std::string key, int& a, int& b) {
  return {key, [&a] { return std::to_string(a); },
          [&a, &b, key](const std::string& v) { a = b = parse_number<int>(key, v); }};
}

std::vector<Binding> bindings(TrainConfig& c) {
  ModelConfig& m = c.model;
  EmbedConfig& e = m.embed;
  return {
      shared_int_key("image_height", e.image_height, c.data.image_height),
      shared_int_key("image_width", e.image_width, c.data.image_width),
      shared_int_key("num_cameras", e.num_cameras, c.data.num_cameras),
      int_key("patch_size", e.patch_size),
      int_key("stride", e.stride),
      int_key("embed_dim", e.embed_dim),
      int_key("class_tokens", e.num_class_tokens),
      double_key("side_weight", e.side_weight),
      int_key("inner_dim", m.inner_dim),
      int_key("state_dim", m.state_dim),
      int_key("dt_rank", m.dt_rank),
      int_key("conv_width", m.conv_width),
      int_key("depth", m.depth),
      int_key("reduction", m.reduction),
      int_key("branches", m.branches),
      {"fusion", [&m] { return to_string(m.fusion); }, [&m](const std::string& v) { m.fusion = parse_fusion(v); }},
      double_key("drop_rate", m.drop_rate),
      int_key("num_classes", m.num_classes),
      int_key("num_identities", c.data.num_identities),
      int_key("train_identities", c.data.train_identities),
      int_key("images_per_identity", c.data.images_per_identity),
      double_key("noise", c.data.noise),
      double_key("camera_shift", c.data.camera_shift),
      bool_key("aug_flip", c.augment.flip),
      bool_key("aug_pad_crop", c.augment.pad_crop),
      int_key("aug_pad", c.augment.pad),
      bool_key("aug_erase", c.augment.erase),
      double_key("erase_prob", c.augment.erase_prob),
      double_key("erase_min_area", c.augment.erase_min_area),
      double_key("erase_max_area", c.augment.erase_max_area),
      double_key("erase_min_aspect", c.augment.erase_min_aspect),
      double_key("smoothing", c.loss.smoothing),
      double_key("margin", c.loss.margin),
      double_key("rho", c.loss.ratr.rho),
      double_key("tau", c.loss.ratr.tau),
      int_key("epochs", c.epochs),
      int_key("warmup_epochs", c.warmup_epochs),
      double_key("base_lr", c.base_lr),
      double_key("warmup_start_lr", c.warmup_start_lr),
      double_key("momentum", c.momentum),
      double_key("weight_decay", c.weight_decay),
      int_key("batch_p", c.batch_p),
      int_key("batch_k", c.batch_k),
      {"seed", [&c] { return std::to_string(c.seed); },
       [&c](const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
      int_key("eval_every", c.eval_every),
  };
}

}  // namespace

void SynthSpec::validate(int batch_p, int batch_k) const {
  if (num_identities < 1 || images_per_identity < 1 || num_cameras < 1 || image_height < 1 || image_width < 1) {
    throw std::invalid_argument("synthetic dataset sizes must be positive");
  }
  if (train_identities < 1 || train_identities >= num_identities) {
    throw std::invalid_argument("train_identities must leave at least one test identity");
  }
  if (train_identities < batch_p) {
    throw std::invalid_argument("need at least P=" + std::to_string(batch_p) + " training identities, have " +
                                std::to_string(train_identities));
  }
  if (images_per_identity < batch_k) {
    throw std::invalid_argument("need at least K=" + std::to_string(batch_k) + " images per identity, have " +
                                std::to_string(images_per_identity));
  }
  if (num_cameras < 2 || images_per_identity < num_cameras) {
    throw std::invalid_argument("query/gallery split needs >= 2 cameras and one image per camera");
  }
  if (!(noise >= 0.0) || !(camera_shift >= 0.0)) throw std::invalid_argument("noise levels must be non-negative");
}

void TrainConfig::validate() const {
  model.validate();
  data.validate(batch_p, batch_k);
  if (data.image_height != model.embed.image_height || data.image_width != model.embed.image_width ||
      data.num_cameras != model.embed.num_cameras) {
    throw std::invalid_argument("dataset image size / camera count differs from the model config");
  }
  if (batch_p < 2 || batch_k < 2) throw std::invalid_argument("batch-hard mining needs P >= 2 and K >= 2");
  if (epochs < 1 || warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw std::invalid_argument("need 0 <= warmup_epochs < epochs");
  }
  if (!(base_lr > 0.0) || !(warmup_start_lr > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(loss.margin > 0.0) || !(loss.ratr.tau > 0.0) || !(loss.ratr.rho >= 0.0)) {
    throw std::invalid_argument("margin and tau must be positive, rho non-negative");
  }
  if (!(loss.smoothing >= 0.0 && loss.smoothing < 1.0)) throw std::invalid_argument("smoothing must be in [0, 1)");
  if (augment.pad < 0) throw std::invalid_argument("aug_pad must be non-negative");
  if (!(augment.erase_prob >= 0.0 && augment.erase_prob <= 1.0) || !(augment.erase_min_area > 0.0) ||
      !(augment.erase_max_area >= augment.erase_min_area && augment.erase_max_area <= 1.0) ||
      !(augment.erase_min_aspect > 0.0 && augment.erase_min_aspect <= 1.0)) {
    throw std::invalid_argument("bad random erasing parameters");
  }
  if (eval_every < 0) throw std::invalid_argument("eval_every must be non-negative");
}

int TrainConfig::steps_per_epoch() const { return std::max(1, data.train_identities / batch_p); }

TrainConfig desk_scale_config() {
  TrainConfig c;
  EmbedConfig& e = c.model.embed;
  e.image_height = c.data.image_height = 64;
  e.image_width = c.data.image_width = 32;
  e.num_cameras = c.data.num_cameras = 4;
  e.patch_size = 8;
  e.stride = 8;
  e.embed_dim = 64;
  e.num_class_tokens = 4;
  c.model.depth = 6;
  c.model.reduction = 2;
  c.model.branches = 2;
  c.model.num_classes = c.data.train_identities;
  c.batch_p = 8;
  c.batch_k = 4;
  // 48 training identities / P=8 -> 6 steps per epoch; 50 epochs = 300 steps.
  c.epochs = 50;
  c.warmup_epochs = 5;
  return c;
}

void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (Binding& b : bindings(cfg)) {
    if (b.key == key) {
      b.set(trim(value));
      return;
    }
  }
  throw std::invalid_argument("unknown setting '" + key + "'");
}

std::vector<std::string> setting_keys() {
  TrainConfig scratch;
  std::vector<std::string> keys;
  for (const Binding& b : bindings(scratch)) keys.push_back(b.key);
  return keys;
}

void apply_config_text(TrainConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    apply_setting(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void load_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(cfg, text.str());
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
  TrainConfig copy = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const Binding& b : bindings(copy)) out.emplace_back(b.key, b.get());
  return out;
}

}  // namespace reidmamba
