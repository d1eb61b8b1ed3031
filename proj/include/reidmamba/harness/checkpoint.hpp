#pragma once

// Single-file checkpoint archive: a text manifest terminated by an "end"
// line, followed by the little-endian tensor blobs.
//
//   reidmamba-checkpoint
//   version 1
//   config <key> = <value>        (one line per setting)
//   tensor <name> <f32|f64> <rows> <cols> <byte offset>
//   blob_bytes <total>
//   end

#include "reidmamba/harness/config.hpp"
#include "reidmamba/mgfe.hpp"

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace reidmamba {

inline constexpr int kCheckpointVersion = 1;

enum class CheckpointErrc {
  io = 1,
  bad_format = 2,
  version_mismatch = 3,
  truncated_blob = 4,
  shape_mismatch = 5,
  tensor_mismatch = 6,  // tensor name or count differs from the model
};

std::string to_string(CheckpointErrc code);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what, std::string tensor = {})
      : std::runtime_error(what), code_(code), tensor_(std::move(tensor)) {}
  CheckpointErrc code() const { return code_; }
  /// Offending tensor name, when there is one.
  const std::string& tensor() const { return tensor_; }

 private:
  CheckpointErrc code_;
  std::string tensor_;
};

enum class BlobType { f32, f64 };

struct TensorEntry {
  std::string name;
  BlobType type = BlobType::f32;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  Matrix value;

  std::size_t bytes() const;
};

struct CheckpointArchive {
  int version = kCheckpointVersion;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<TensorEntry> tensors;
};

/// Writes every ReidModel::state_tensors() entry. f32 is the default blob
/// type; f64 keeps double-precision parameters bit-exact.
void save_checkpoint(ReidModel& model, const TrainConfig& cfg, const std::string& path,
                     BlobType type = BlobType::f32);

/// Parses and validates an archive; throws CheckpointError.
CheckpointArchive read_checkpoint(const std::string& path);

/// Copies the archive's tensors into `model`. Every tensor name, order and
/// shape must match; the first mismatch is reported by name.
void load_into(ReidModel& model, const CheckpointArchive& archive);

/// Rebuilds the config from the archive's echo and the model state from its
/// tensors.
std::pair<TrainConfig, ReidModel> load_checkpoint(const std::string& path);

/// Human-readable manifest summary.
std::string describe_checkpoint(const CheckpointArchive& archive);

}  // namespace reidmamba
