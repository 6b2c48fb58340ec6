#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vitscope/directions.hpp"
#include "vitscope/poison.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hex SHA-1 of "blob <size>\0" + bytes, the object id git assigns to a file.
std::string git_blob_hash(std::string_view bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

/// Named tensors plus string metadata. On disk: a text header (format
/// version, kind, meta lines, one `tensor name f32 ndim dims... nbytes` line
/// per record, payload length and hash, `end`) followed by little-endian
/// float32 payloads in header order.
struct TensorArchive {
  std::string kind;
  /// Keys must be free of whitespace; values free of newlines.
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  const Tensor& at(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;
};

inline constexpr int kArchiveVersion = 1;

std::string encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(std::string_view bytes);

struct Checkpoint {
  ModelParams params;
  /// Provenance such as seeds and the poison spec.
  std::map<std::string, std::string> meta;
};

/// A "model" archive; the ViTConfig lives in `config.*` meta keys.
TensorArchive to_archive(const Checkpoint& ckpt);
Checkpoint checkpoint_from_archive(const TensorArchive& archive);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Contrastive pairs and the evaluation splits, as a "data" archive.
/// Labels are stored as float32 values, which are exact for class indices.
struct DataBundle {
  ContrastivePairs pairs;
  LabeledImages clean_test;
  LabeledImages triggered_test;
  int target_class = 0;
};

TensorArchive to_archive(const DataBundle& data);
DataBundle data_from_archive(const TensorArchive& archive);

/// Directions as a "directions" archive with tensors r.0 .. r.L.
TensorArchive to_archive(const DirectionSet& dirs);
DirectionSet directions_from_archive(const TensorArchive& archive);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace vitscope
