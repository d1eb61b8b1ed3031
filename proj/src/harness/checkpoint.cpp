#include "reidmamba/harness/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace reidmamba {
namespace {

constexpr const char* kMagic = "reidmamba-checkpoint";

const char* type_name(BlobType t) { return t == BlobType::f32 ? "f32" : "f64"; }

std::size_t element_bytes(BlobType t) { return t == BlobType::f32 ? 4 : 8; }

void put_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffU));
}

std::uint64_t get_le(const unsigned char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void encode(std::string& out, const Matrix& m, BlobType type) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    if (type == BlobType::f32) {
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    } else {
      put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    }
  }
}

Matrix decode(const unsigned char* p, int rows, int cols, BlobType type) {
  Matrix m(rows, cols);
  const std::size_t step = element_bytes(type);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const std::uint64_t bits = get_le(p + static_cast<std::size_t>(i) * step, step);
    m.data()[i] = type == BlobType::f32 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)))
                                        : std::bit_cast<double>(bits);
  }
  return m;
}

[[noreturn]] void fail(CheckpointErrc code, const std::string& what, const std::string& tensor = {}) {
  throw CheckpointError(code, what, tensor);
}

}  // namespace

std::string to_string(CheckpointErrc code) {
  switch (code) {
    case CheckpointErrc::io: return "io";
    case CheckpointErrc::bad_format: return "bad_format";
    case CheckpointErrc::version_mismatch: return "version_mismatch";
    case CheckpointErrc::truncated_blob: return "truncated_blob";
    case CheckpointErrc::shape_mismatch: return "shape_mismatch";
    case CheckpointErrc::tensor_mismatch: return "tensor_mismatch";
  }
  return "unknown";
}

std::size_t TensorEntry::bytes() const {
  return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * element_bytes(type);
}

void save_checkpoint(ReidModel& model, const TrainConfig& cfg, const std::string& path, BlobType type) {
  std::ostringstream manifest;
  manifest << kMagic << "\nversion " << kCheckpointVersion << "\n";
  for (const auto& [key, value] : config_entries(cfg)) manifest << "config " << key << " = " << value << "\n";
  std::string blob;
  for (const auto& [name, m] : model.state_tensors()) {
    manifest << "tensor " << name << ' ' << type_name(type) << ' ' << m->rows() << ' ' << m->cols() << ' '
             << blob.size() << "\n";
    encode(blob, *m, type);
  }
  manifest << "blob_bytes " << blob.size() << "\nend\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(CheckpointErrc::io, "cannot open " + path + " for writing");
  const std::string head = manifest.str();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) fail(CheckpointErrc::io, "write to " + path + " failed");
}

CheckpointArchive read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(CheckpointErrc::io, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();

  CheckpointArchive ar;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const std::size_t nl = data.find('\n', pos);
    if (nl == std::string::npos) return false;
    line = data.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  std::string line;
  if (!next_line(line) || line != kMagic) fail(CheckpointErrc::bad_format, path + " is not a checkpoint archive");
  if (!next_line(line) || line.rfind("version ", 0) != 0) fail(CheckpointErrc::bad_format, "missing version line");
  try {
    ar.version = std::stoi(line.substr(8));
  } catch (const std::exception&) {
    fail(CheckpointErrc::bad_format, "unreadable version '" + line + "'");
  }
  if (ar.version != kCheckpointVersion) {
    fail(CheckpointErrc::version_mismatch, "archive version " + std::to_string(ar.version) + ", expected " +
                                               std::to_string(kCheckpointVersion));
  }
  std::size_t expected_offset = 0;
  long long blob_bytes = -1;
  bool ended = false;
  while (next_line(line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream fields(line);
    std::string kind;
    fields >> kind;
    if (kind == "config") {
      const std::size_t eq = line.find(" = ");
      if (eq == std::string::npos) fail(CheckpointErrc::bad_format, "bad config line '" + line + "'");
      ar.config.emplace_back(line.substr(7, eq - 7), line.substr(eq + 3));
    } else if (kind == "tensor") {
      TensorEntry t;
      std::string type;
      long long rows = -1;
      long long cols = -1;
      long long offset = -1;
      fields >> t.name >> type >> rows >> cols >> offset;
      if (!fields || (type != "f32" && type != "f64") || rows < 0 || cols < 0 || offset < 0) {
        fail(CheckpointErrc::bad_format, "bad tensor line '" + line + "'");
      }
      t.type = type == "f32" ? BlobType::f32 : BlobType::f64;
      t.rows = static_cast<int>(rows);
      t.cols = static_cast<int>(cols);
      t.offset = static_cast<std::size_t>(offset);
      if (t.offset != expected_offset) {
        fail(CheckpointErrc::shape_mismatch,
             "tensor " + t.name + " declared at offset " + std::to_string(t.offset) + " but its shape places it at " +
                 std::to_string(expected_offset),
             t.name);
      }
      expected_offset += t.bytes();
      ar.tensors.push_back(std::move(t));
    } else if (kind == "blob_bytes") {
      fields >> blob_bytes;
      if (!fields || blob_bytes < 0) fail(CheckpointErrc::bad_format, "bad blob_bytes line");
    } else {
      fail(CheckpointErrc::bad_format, "unknown manifest line '" + line + "'");
    }
  }
  if (!ended) fail(CheckpointErrc::bad_format, "manifest has no end line");
  if (blob_bytes < 0) fail(CheckpointErrc::bad_format, "manifest has no blob_bytes line");
  if (static_cast<std::size_t>(blob_bytes) != expected_offset) {
    fail(CheckpointErrc::shape_mismatch, "tensor shapes need " + std::to_string(expected_offset) +
                                             " blob bytes, manifest declares " + std::to_string(blob_bytes));
  }
  const std::size_t available = data.size() - pos;
  if (available < expected_offset) {
    fail(CheckpointErrc::truncated_blob,
         "blob holds " + std::to_string(available) + " bytes, manifest needs " + std::to_string(expected_offset));
  }
  if (available > expected_offset) fail(CheckpointErrc::bad_format, "trailing bytes after the tensor blob");
  const auto* base = reinterpret_cast<const unsigned char*>(data.data() + pos);
  for (TensorEntry& t : ar.tensors) t.value = decode(base + t.offset, t.rows, t.cols, t.type);
  return ar;
}

void load_into(ReidModel& model, const CheckpointArchive& archive) {
  auto state = model.state_tensors();
  const std::size_t common = std::min(state.size(), archive.tensors.size());
  for (std::size_t i = 0; i < common; ++i) {
    const TensorEntry& t = archive.tensors[i];
    if (t.name != state[i].first) {
      fail(CheckpointErrc::tensor_mismatch, "archive tensor " + t.name + " where the model expects " + state[i].first,
           state[i].first);
    }
    const Matrix& m = *state[i].second;
    if (t.rows != m.rows() || t.cols != m.cols()) {
      fail(CheckpointErrc::shape_mismatch,
           "tensor " + t.name + " is " + std::to_string(t.rows) + "x" + std::to_string(t.cols) + ", model has " +
               std::to_string(m.rows()) + "x" + std::to_string(m.cols()),
           t.name);
    }
  }
  if (state.size() != archive.tensors.size()) {
    const std::string name = state.size() > common ? state[common].first : archive.tensors[common].name;
    fail(CheckpointErrc::tensor_mismatch,
         "archive has " + std::to_string(archive.tensors.size()) + " tensors, model has " +
             std::to_string(state.size()) + "; first unmatched: " + name,
         name);
  }
  for (std::size_t i = 0; i < common; ++i) *state[i].second = archive.tensors[i].value;
}

std::pair<TrainConfig, ReidModel> load_checkpoint(const std::string& path) {
  const CheckpointArchive ar = read_checkpoint(path);
  TrainConfig cfg;
  try {
    for (const auto& [key, value] : ar.config) apply_setting(cfg, key, value);
  } catch (const std::invalid_argument& e) {
    fail(CheckpointErrc::bad_format, std::string("config echo: ") + e.what());
  }
  ReidModel model = ReidModel::init(cfg.model, 0);
  load_into(model, ar);
  return {cfg, std::move(model)};
}

std::string describe_checkpoint(const CheckpointArchive& archive) {
  std::ostringstream out;
  out << "version " << archive.version << "\n";
  for (const auto& [key, value] : archive.config) out << "config " << key << " = " << value << "\n";
  std::size_t total = 0;
  std::size_t elements = 0;
  for (const TensorEntry& t : archive.tensors) {
    out << "tensor " << t.name << ' ' << type_name(t.type) << ' ' << t.rows << 'x' << t.cols << " @" << t.offset
        << "\n";
    total += t.bytes();
    elements += static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols);
  }
  out << archive.tensors.size() << " tensors, " << elements << " values, " << total << " blob bytes\n";
  return out.str();
}

}  // namespace reidmamba
