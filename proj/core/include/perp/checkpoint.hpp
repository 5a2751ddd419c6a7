#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "perp/adapters.hpp"
#include "perp/model.hpp"
#include "perp/sparsity.hpp"

namespace perp {

// File layout (all integers little-endian):
//   "PERP1" | u64 record count | records...
//   record: u32 name length | name bytes | u8 tag | u8 dtype | u32 rank | u64 dims[rank] | raw data
// Tags 0-5 are GroupTag values; 6 marks a mask, 7 metadata.
// dtypes: 0 = f32, 1 = f64, 2 = u8 (masks), 3 = u64 (metadata).

enum class RecordDtype : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, u64 = 3 };
inline constexpr std::uint8_t kMaskTag = 6;
inline constexpr std::uint8_t kMetaTag = 7;

struct CheckpointRecord {
  std::string name;
  std::uint8_t tag = 0;
  RecordDtype dtype = RecordDtype::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // raw little-endian payload

  std::vector<float> as_f32() const;
  std::vector<double> as_f64() const;
  std::vector<std::uint64_t> as_u64() const;
};

std::vector<std::uint8_t> encode_records(const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> decode_records(const std::vector<std::uint8_t>& data);

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

struct Checkpoint {
  TaggedModel model;
  MaskSet masks;
  AdapterSet adapters;  // only unmerged LoRA results carry adapters
};

std::vector<CheckpointRecord> to_records(const Checkpoint& ckpt);
Checkpoint from_records(const std::vector<CheckpointRecord>& records);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Bytes of the serialized checkpoint (what save_checkpoint would write).
std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt);

}  // namespace perp
