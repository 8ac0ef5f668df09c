#pragma once

// Binary activation shards (ASAE container), their JSON manifests,
// memory-mapped reading, dataset sampling and the training shuffle buffer.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "audiosae/common.hpp"

namespace audiosae::store {

inline constexpr std::array<char, 4> kShardMagic{'A', 'S', 'A', 'E'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 24;

enum class DType : std::uint8_t { f32 = 0 };

// Layout (little-endian):
//   0  magic "ASAE"   4  version u32   8  dim u32
//   12 dtype u8       13 reserved (3 zero bytes)   16 frame_count u64
struct ShardHeader {
  std::uint32_t version = kShardVersion;
  std::uint32_t dim = 0;
  DType dtype = DType::f32;
  std::uint64_t frame_count = 0;
};

std::array<unsigned char, kShardHeaderBytes> encode_header(const ShardHeader& header);
ShardHeader decode_header(std::span<const unsigned char> bytes);

struct AudioSegment {
  std::string audio_id;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string domain;
  std::map<std::string, std::string> labels;

  [[nodiscard]] FrameRange range() const { return {start, end}; }
  [[nodiscard]] std::size_t size() const { return end - start; }
  friend bool operator==(const AudioSegment&, const AudioSegment&) = default;
};

struct ShardManifest {
  std::string dataset;
  double weight = 1.0;
  double frame_rate = 50.0;
  std::string kind = "activations";  // or "mel"
  std::vector<AudioSegment> segments;

  /// Throws ValidationError unless segments are sorted, disjoint and cover
  /// [0, frame_count), weight >= 0 and frame_rate > 0.
  void validate(std::uint64_t frame_count) const;
  [[nodiscard]] std::uint64_t covered_frames() const;
  [[nodiscard]] std::vector<FrameRange> ranges() const;

  friend bool operator==(const ShardManifest&, const ShardManifest&) = default;
};

nlohmann::json to_json(const ShardManifest& manifest);
ShardManifest manifest_from_json(const nlohmann::json& j);
ShardManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const ShardManifest& manifest);

/// Sidecar path for a shard: "x.asae" -> "x.json".
std::filesystem::path manifest_path_for(const std::filesystem::path& shard_path);

/// Writes the shard payload and its manifest sidecar.
void write_shard(const std::filesystem::path& shard_path, const MatrixF& frames,
                 const ShardManifest& manifest);

/// Read-only memory mapping of a shard file. Safe to share between readers.
class ShardReader {
 public:
  explicit ShardReader(const std::filesystem::path& shard_path, bool load_manifest = true);
  ~ShardReader();
  ShardReader(ShardReader&& other) noexcept;
  ShardReader& operator=(ShardReader&& other) noexcept;
  ShardReader(const ShardReader&) = delete;
  ShardReader& operator=(const ShardReader&) = delete;

  [[nodiscard]] const ShardHeader& header() const { return header_; }
  [[nodiscard]] std::size_t dim() const { return header_.dim; }
  [[nodiscard]] std::size_t frame_count() const { return header_.frame_count; }
  [[nodiscard]] const ShardManifest& manifest() const { return manifest_; }
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

  [[nodiscard]] std::span<const float> row(std::size_t frame) const;
  [[nodiscard]] MatrixF rows(FrameRange range) const;
  [[nodiscard]] MatrixF to_matrix() const { return rows({0, frame_count()}); }

 private:
  void unmap();

  std::filesystem::path path_;
  ShardHeader header_;
  ShardManifest manifest_;
  int fd_ = -1;
  void* map_ = nullptr;
  std::size_t map_len_ = 0;
  const float* payload_ = nullptr;
};

struct Shard {
  MatrixF frames;
  ShardManifest manifest;
};

Shard read_shard(const std::filesystem::path& shard_path);

/// All "*.asae" files in a directory (or the file itself), sorted by name.
std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir_or_file);

struct ShardValidation {
  std::filesystem::path path;
  std::vector<std::string> problems;
  [[nodiscard]] bool ok() const { return problems.empty(); }
};

/// Structural checks: header fields, payload length, manifest invariants
/// and finiteness of every stored value.
ShardValidation validate_shard(const std::filesystem::path& shard_path);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

enum class PpsUnit { frames, audios };
PpsUnit parse_pps_unit(const std::string& text);

/// Probability of each dataset, proportional to weight_i * size_i.
std::vector<double> pps_probabilities(std::span<const double> weights, std::span<const double> sizes);
std::vector<double> pps_probabilities(std::span<const ShardManifest> manifests, PpsUnit unit);

/// Draws a dataset index with probability proportional to weight * size.
std::size_t sample_dataset(std::span<const double> probabilities, Rng& rng);
std::size_t sample_dataset(std::span<const ShardManifest> manifests, PpsUnit unit, Rng& rng);

/// Fixed-capacity pool of activation vectors drawn without replacement.
/// Single writer / single reader: refill and draw must not interleave.
class ShuffleBuffer {
 public:
  ShuffleBuffer(std::size_t dim, std::size_t capacity_batches, std::size_t batch_size);

  [[nodiscard]] std::size_t dim() const { return dim_; }
  [[nodiscard]] std::size_t batch_size() const { return batch_size_; }
  [[nodiscard]] std::size_t capacity() const { return static_cast<std::size_t>(storage_.rows()); }
  [[nodiscard]] std::size_t unread() const { return unread_.size(); }
  [[nodiscard]] std::size_t free_slots() const { return free_.size(); }
  [[nodiscard]] bool can_draw() const { return unread_.size() >= batch_size_; }

  /// Stores one vector in a free slot. Throws when the buffer is full.
  void push(std::span<const float> vec);

  struct Batch {
    MatrixF rows;
    std::vector<std::size_t> slots;
  };

  /// Selects batch_size unread slots uniformly at random and marks them read.
  Batch draw_batch(Rng& rng);

 private:
  std::size_t dim_;
  std::size_t batch_size_;
  MatrixF storage_;
  std::vector<std::size_t> unread_;
  std::vector<std::size_t> free_;
};

/// Endless batch stream over a set of shards: datasets are picked by PPS,
/// audios uniformly within the dataset, and their frames pooled in a
/// ShuffleBuffer that is refilled whenever it cannot serve a batch.
class ShardBatchSource {
 public:
  ShardBatchSource(const std::vector<std::filesystem::path>& shards, std::size_t capacity_batches,
                   std::size_t batch_size, PpsUnit unit, std::uint64_t seed);

  [[nodiscard]] std::size_t dim() const { return buffer_.dim(); }
  MatrixF next_batch();

 private:
  void refill();

  std::vector<ShardReader> readers_;
  std::vector<double> probabilities_;
  ShuffleBuffer buffer_;
  Rng rng_;
};

}  // namespace audiosae::store
