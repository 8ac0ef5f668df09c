#include "audiosae/activation_store.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace audiosae::store {

static_assert(std::endian::native == std::endian::little, "ASAE shards assume a little-endian host");

namespace {

template <typename T>
void put_le(unsigned char* dst, T value) {
  std::memcpy(dst, &value, sizeof(T));
}

template <typename T>
T get_le(const unsigned char* src) {
  T value;
  std::memcpy(&value, src, sizeof(T));
  return value;
}

}  // namespace

std::array<unsigned char, kShardHeaderBytes> encode_header(const ShardHeader& header) {
  std::array<unsigned char, kShardHeaderBytes> bytes{};
  std::memcpy(bytes.data(), kShardMagic.data(), kShardMagic.size());
  put_le(bytes.data() + 4, header.version);
  put_le(bytes.data() + 8, header.dim);
  bytes[12] = static_cast<unsigned char>(header.dtype);
  put_le(bytes.data() + 16, header.frame_count);
  return bytes;
}

ShardHeader decode_header(std::span<const unsigned char> bytes) {
  if (bytes.size() < kShardHeaderBytes) {
    throw ValidationError("shard header truncated: " + std::to_string(bytes.size()) + " bytes");
  }
  if (std::memcmp(bytes.data(), kShardMagic.data(), kShardMagic.size()) != 0) {
    throw ValidationError("bad shard magic (expected \"ASAE\")");
  }
  ShardHeader header;
  header.version = get_le<std::uint32_t>(bytes.data() + 4);
  header.dim = get_le<std::uint32_t>(bytes.data() + 8);
  header.dtype = static_cast<DType>(bytes[12]);
  header.frame_count = get_le<std::uint64_t>(bytes.data() + 16);
  if (header.version != kShardVersion) {
    throw ValidationError("unsupported shard version " + std::to_string(header.version));
  }
  if (header.dim == 0) throw ValidationError("shard dim must be > 0");
  if (header.dtype != DType::f32) {
    throw ValidationError("unsupported dtype code " + std::to_string(static_cast<int>(header.dtype)));
  }
  return header;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void ShardManifest::validate(std::uint64_t frame_count) const {
  if (!(weight >= 0.0) || !std::isfinite(weight)) {
    throw ValidationError("manifest weight must be a finite value >= 0");
  }
  if (!(frame_rate > 0.0) || !std::isfinite(frame_rate)) {
    throw ValidationError("manifest frame_rate must be > 0");
  }
  std::uint64_t cursor = 0;
  for (const auto& seg : segments) {
    if (seg.end <= seg.start) {
      throw ValidationError("segment '" + seg.audio_id + "' is empty or reversed");
    }
    if (seg.start != cursor) {
      throw ValidationError("segment '" + seg.audio_id + "' starts at " + std::to_string(seg.start) +
                            ", expected " + std::to_string(cursor) +
                            " (segments must be sorted, disjoint and contiguous)");
    }
    cursor = seg.end;
  }
  if (cursor != frame_count) {
    throw ValidationError("segments cover " + std::to_string(cursor) + " frames, shard has " +
                          std::to_string(frame_count));
  }
}

std::uint64_t ShardManifest::covered_frames() const {
  std::uint64_t total = 0;
  for (const auto& seg : segments) total += seg.end - seg.start;
  return total;
}

std::vector<FrameRange> ShardManifest::ranges() const {
  std::vector<FrameRange> out;
  out.reserve(segments.size());
  for (const auto& seg : segments) out.push_back(seg.range());
  return out;
}

nlohmann::json to_json(const ShardManifest& manifest) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& seg : manifest.segments) {
    segs.push_back({{"audio_id", seg.audio_id},
                    {"start", seg.start},
                    {"end", seg.end},
                    {"domain", seg.domain},
                    {"labels", seg.labels}});
  }
  return {{"dataset", manifest.dataset},
          {"weight", manifest.weight},
          {"frame_rate", manifest.frame_rate},
          {"kind", manifest.kind},
          {"segments", segs}};
}

ShardManifest manifest_from_json(const nlohmann::json& j) {
  try {
    ShardManifest m;
    m.dataset = j.at("dataset").get<std::string>();
    m.weight = j.value("weight", 1.0);
    m.frame_rate = j.value("frame_rate", 50.0);
    m.kind = j.value("kind", std::string("activations"));
    for (const auto& s : j.at("segments")) {
      AudioSegment seg;
      seg.audio_id = s.at("audio_id").get<std::string>();
      seg.start = s.at("start").get<std::size_t>();
      seg.end = s.at("end").get<std::size_t>();
      seg.domain = s.value("domain", std::string());
      if (auto it = s.find("labels"); it != s.end()) {
        for (const auto& [key, value] : it->items()) {
          seg.labels[key] = value.is_string() ? value.get<std::string>() : value.dump();
        }
      }
      m.segments.push_back(std::move(seg));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
}

ShardManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j);
}

void write_manifest(const std::filesystem::path& path, const ShardManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write manifest " + path.string());
  out << to_json(manifest).dump(2) << '\n';
  if (!out) throw RuntimeFailure("failed writing manifest " + path.string());
}

std::filesystem::path manifest_path_for(const std::filesystem::path& shard_path) {
  auto p = shard_path;
  p.replace_extension(".json");
  return p;
}

void write_shard(const std::filesystem::path& shard_path, const MatrixF& frames,
                 const ShardManifest& manifest) {
  if (frames.cols() <= 0) throw ShapeError("shard dim must be > 0");
  manifest.validate(static_cast<std::uint64_t>(frames.rows()));

  ShardHeader header;
  header.dim = static_cast<std::uint32_t>(frames.cols());
  header.frame_count = static_cast<std::uint64_t>(frames.rows());

  std::ofstream out(shard_path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write shard " + shard_path.string());
  const auto bytes = encode_header(header);
  out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  out.write(reinterpret_cast<const char*>(frames.data()),
            static_cast<std::streamsize>(frames.size() * sizeof(float)));
  if (!out) throw RuntimeFailure("failed writing shard " + shard_path.string());
  out.close();
  write_manifest(manifest_path_for(shard_path), manifest);
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

ShardReader::ShardReader(const std::filesystem::path& shard_path, bool load_manifest) : path_(shard_path) {
  fd_ = ::open(shard_path.c_str(), O_RDONLY);
  if (fd_ < 0) throw ValidationError("cannot open shard " + shard_path.string());
  struct stat st {};
  if (::fstat(fd_, &st) != 0) {
    unmap();
    throw ValidationError("cannot stat shard " + shard_path.string());
  }
  map_len_ = static_cast<std::size_t>(st.st_size);
  if (map_len_ < kShardHeaderBytes) {
    unmap();
    throw ValidationError("shard " + shard_path.string() + " shorter than its header");
  }
  map_ = ::mmap(nullptr, map_len_, PROT_READ, MAP_SHARED, fd_, 0);
  if (map_ == MAP_FAILED) {
    map_ = nullptr;
    unmap();
    throw ValidationError("mmap failed for " + shard_path.string());
  }
  const auto* base = static_cast<const unsigned char*>(map_);
  try {
    header_ = decode_header({base, kShardHeaderBytes});
    const std::uint64_t expected = kShardHeaderBytes + header_.frame_count * header_.dim * sizeof(float);
    if (expected != map_len_) {
      throw ValidationError("shard " + shard_path.string() + " has " + std::to_string(map_len_) +
                            " bytes, header implies " + std::to_string(expected));
    }
    if (load_manifest) {
      manifest_ = read_manifest(manifest_path_for(shard_path));
      manifest_.validate(header_.frame_count);
    }
  } catch (...) {
    unmap();
    throw;
  }
  payload_ = reinterpret_cast<const float*>(base + kShardHeaderBytes);
}

ShardReader::~ShardReader() { unmap(); }

ShardReader::ShardReader(ShardReader&& other) noexcept
    : path_(std::move(other.path_)),
      header_(other.header_),
      manifest_(std::move(other.manifest_)),
      fd_(std::exchange(other.fd_, -1)),
      map_(std::exchange(other.map_, nullptr)),
      map_len_(std::exchange(other.map_len_, 0)),
      payload_(std::exchange(other.payload_, nullptr)) {}

ShardReader& ShardReader::operator=(ShardReader&& other) noexcept {
  if (this != &other) {
    unmap();
    path_ = std::move(other.path_);
    header_ = other.header_;
    manifest_ = std::move(other.manifest_);
    fd_ = std::exchange(other.fd_, -1);
    map_ = std::exchange(other.map_, nullptr);
    map_len_ = std::exchange(other.map_len_, 0);
    payload_ = std::exchange(other.payload_, nullptr);
  }
  return *this;
}

void ShardReader::unmap() {
  if (map_ != nullptr) ::munmap(map_, map_len_);
  if (fd_ >= 0) ::close(fd_);
  map_ = nullptr;
  fd_ = -1;
  payload_ = nullptr;
}

std::span<const float> ShardReader::row(std::size_t frame) const {
  if (frame >= frame_count()) throw ValidationError("frame index out of range");
  return {payload_ + frame * dim(), dim()};
}

MatrixF ShardReader::rows(FrameRange range) const {
  if (range.end > frame_count() || range.start > range.end) {
    throw ValidationError("frame range out of bounds");
  }
  MatrixF out(static_cast<Eigen::Index>(range.size()), static_cast<Eigen::Index>(dim()));
  if (range.size() > 0) {
    std::memcpy(out.data(), payload_ + range.start * dim(), range.size() * dim() * sizeof(float));
  }
  return out;
}

Shard read_shard(const std::filesystem::path& shard_path) {
  ShardReader reader(shard_path);
  return {reader.to_matrix(), reader.manifest()};
}

std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir_or_file) {
  std::vector<std::filesystem::path> out;
  if (std::filesystem::is_regular_file(dir_or_file)) {
    out.push_back(dir_or_file);
    return out;
  }
  if (!std::filesystem::is_directory(dir_or_file)) {
    throw ValidationError("shard path does not exist: " + dir_or_file.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir_or_file)) {
    if (entry.is_regular_file() && entry.path().extension() == ".asae") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

ShardValidation validate_shard(const std::filesystem::path& shard_path) {
  ShardValidation report{shard_path, {}};
  try {
    ShardReader reader(shard_path);
    const float* data = reader.frame_count() > 0 ? reader.row(0).data() : nullptr;
    const std::size_t n = reader.frame_count() * reader.dim();
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(data[i])) {
        report.problems.push_back("non-finite value at frame " + std::to_string(i / reader.dim()));
        break;
      }
    }
  } catch (const Error& e) {
    report.problems.emplace_back(e.what());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

PpsUnit parse_pps_unit(const std::string& text) {
  if (text == "frames") return PpsUnit::frames;
  if (text == "audios") return PpsUnit::audios;
  throw ValidationError("pps_unit must be 'frames' or 'audios', got '" + text + "'");
}

std::vector<double> pps_probabilities(std::span<const double> weights, std::span<const double> sizes) {
  if (weights.size() != sizes.size() || weights.empty()) {
    throw ValidationError("need one weight per dataset size");
  }
  std::vector<double> p(weights.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (weights[i] < 0.0 || sizes[i] < 0.0) throw ValidationError("weights and sizes must be nonnegative");
    p[i] = weights[i] * sizes[i];
  }
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0.0)) throw ValidationError("all datasets have zero weight x size");
  for (auto& v : p) v /= total;
  return p;
}

std::vector<double> pps_probabilities(std::span<const ShardManifest> manifests, PpsUnit unit) {
  std::vector<double> weights, sizes;
  for (const auto& m : manifests) {
    weights.push_back(m.weight);
    sizes.push_back(unit == PpsUnit::frames ? static_cast<double>(m.covered_frames())
                                            : static_cast<double>(m.segments.size()));
  }
  return pps_probabilities(weights, sizes);
}

std::size_t sample_dataset(std::span<const double> probabilities, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i] > 0.0) last_positive = i;
    acc += probabilities[i];
    if (u < acc && probabilities[i] > 0.0) return i;
  }
  return last_positive;
}

std::size_t sample_dataset(std::span<const ShardManifest> manifests, PpsUnit unit, Rng& rng) {
  const auto p = pps_probabilities(manifests, unit);
  return sample_dataset(p, rng);
}

// ---------------------------------------------------------------------------
// Shuffle buffer
// ---------------------------------------------------------------------------

ShuffleBuffer::ShuffleBuffer(std::size_t dim, std::size_t capacity_batches, std::size_t batch_size)
    : dim_(dim), batch_size_(batch_size) {
  if (dim == 0 || capacity_batches == 0 || batch_size == 0) {
    throw ValidationError("shuffle buffer needs dim, capacity and batch size > 0");
  }
  const std::size_t cap = capacity_batches * batch_size;
  storage_.resize(static_cast<Eigen::Index>(cap), static_cast<Eigen::Index>(dim));
  free_.resize(cap);
  // Filled from slot 0 upwards.
  std::iota(free_.rbegin(), free_.rend(), std::size_t{0});
  unread_.reserve(cap);
}

void ShuffleBuffer::push(std::span<const float> vec) {
  if (vec.size() != dim_) throw ShapeError("vector dim does not match buffer dim");
  if (free_.empty()) throw RuntimeFailure("shuffle buffer is full");
  const std::size_t slot = free_.back();
  free_.pop_back();
  std::copy(vec.begin(), vec.end(), storage_.row(static_cast<Eigen::Index>(slot)).data());
  unread_.push_back(slot);
}

ShuffleBuffer::Batch ShuffleBuffer::draw_batch(Rng& rng) {
  if (!can_draw()) {
    throw RuntimeFailure("shuffle buffer holds " + std::to_string(unread_.size()) +
                         " unread vectors, batch needs " + std::to_string(batch_size_));
  }
  Batch batch;
  batch.rows.resize(static_cast<Eigen::Index>(batch_size_), static_cast<Eigen::Index>(dim_));
  batch.slots.reserve(batch_size_);
  for (std::size_t b = 0; b < batch_size_; ++b) {
    std::uniform_int_distribution<std::size_t> pick(0, unread_.size() - 1);
    const std::size_t pos = pick(rng);
    const std::size_t slot = unread_[pos];
    unread_[pos] = unread_.back();
    unread_.pop_back();
    batch.rows.row(static_cast<Eigen::Index>(b)) = storage_.row(static_cast<Eigen::Index>(slot));
    batch.slots.push_back(slot);
    free_.push_back(slot);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Shard batch source
// ---------------------------------------------------------------------------

namespace {

std::size_t common_dim(const std::vector<ShardReader>& readers) {
  if (readers.empty()) throw ValidationError("no shards given");
  const std::size_t dim = readers.front().dim();
  for (const auto& r : readers) {
    if (r.dim() != dim) throw ShapeError("shards disagree on dim: " + r.path().string());
  }
  return dim;
}

std::vector<ShardReader> open_all(const std::vector<std::filesystem::path>& shards) {
  std::vector<ShardReader> readers;
  readers.reserve(shards.size());
  for (const auto& p : shards) readers.emplace_back(p);
  return readers;
}

}  // namespace

ShardBatchSource::ShardBatchSource(const std::vector<std::filesystem::path>& shards,
                                   std::size_t capacity_batches, std::size_t batch_size, PpsUnit unit,
                                   std::uint64_t seed)
    : readers_(open_all(shards)),
      buffer_(common_dim(readers_), capacity_batches, batch_size),
      rng_(seed) {
  std::vector<ShardManifest> manifests;
  std::uint64_t total = 0;
  for (const auto& r : readers_) {
    manifests.push_back(r.manifest());
    total += r.frame_count();
  }
  if (total < batch_size) {
    throw RuntimeFailure("shards hold " + std::to_string(total) + " frames, fewer than one batch of " +
                         std::to_string(batch_size));
  }
  probabilities_ = pps_probabilities(manifests, unit);
}

void ShardBatchSource::refill() {
  while (buffer_.free_slots() > 0) {
    const std::size_t ds = sample_dataset(probabilities_, rng_);
    const auto& reader = readers_[ds];
    const auto& segments = reader.manifest().segments;
    if (segments.empty()) throw RuntimeFailure("dataset without audio segments was sampled");
    std::uniform_int_distribution<std::size_t> pick(0, segments.size() - 1);
    const FrameRange range = segments[pick(rng_)].range();
    std::size_t begin = range.start;
    std::size_t take = range.size();
    if (take > buffer_.free_slots()) {
      std::uniform_int_distribution<std::size_t> offset(0, take - buffer_.free_slots());
      begin += offset(rng_);
      take = buffer_.free_slots();
    }
    for (std::size_t t = begin; t < begin + take; ++t) buffer_.push(reader.row(t));
  }
}

MatrixF ShardBatchSource::next_batch() {
  if (!buffer_.can_draw()) refill();
  return buffer_.draw_batch(rng_).rows;
}

}  // namespace audiosae::store
