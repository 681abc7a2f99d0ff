#pragma once

// Binary formats, all little-endian:
//
//   Feature file  "SPFM" | u32 version | u32 C | u32 H | u32 W | u8 has_cls |
//                 f32 values[C*H*W] (channel-major) | f32 cls[C] if has_cls
//   Checkpoint    "SPCK" | u32 version | u8 stage | u32 meta_len | meta (JSON) |
//                 u32 count | count x { u32 name_len | name | u32 rank |
//                 u64 dims[rank] | f64 data[prod(dims)] }
//   Descriptor db "SPDB" | u64 N | u32 D | f32 rows[N*D]
//                 plus "<path>.jsonl": one JSON object per row.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vpr/aggregation.hpp"

namespace vpr::io {

inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_feature(std::ostream& out, const FeatureMap& fm);
FeatureMap read_feature(std::istream& in);
void write_feature(const std::filesystem::path& path, const FeatureMap& fm);
FeatureMap read_feature(const std::filesystem::path& path);

enum class Stage : std::uint8_t { Stage1 = 1, Stage2 = 2 };

const char* to_string(Stage s);

struct Checkpoint {
  Stage stage = Stage::Stage1;
  std::string meta;  // JSON describing the model layout
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

struct RowMeta {
  std::string image_id;
  std::optional<double> east;
  std::optional<double> north;
  std::optional<std::int64_t> frame;
  std::optional<std::string> match_id;

  bool operator==(const RowMeta&) const = default;
};

struct DescriptorTable {
  std::uint32_t dim = 0;
  std::vector<float> rows;  // N * dim
  std::vector<RowMeta> meta;

  std::size_t count() const { return dim ? rows.size() / dim : 0; }
  bool operator==(const DescriptorTable&) const = default;
};

void write_spdb(std::ostream& out, const DescriptorTable& table);
/// Reads the binary part only; metadata is left empty.
DescriptorTable read_spdb(std::istream& in);
void write_spdb(const std::filesystem::path& path, const DescriptorTable& table);
/// Reads the binary file and its sidecar (if present).
DescriptorTable read_spdb(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& db_path);

void write_row_meta(std::ostream& out, const std::vector<RowMeta>& meta);
std::vector<RowMeta> read_row_meta(std::istream& in);

}  // namespace vpr::io
