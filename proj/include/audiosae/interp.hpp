#pragma once

// Acoustic pattern discovery by averaging log-mel windows around feature
// activations, and the chunk -> caption -> aggregate labelling pipeline with
// HTTP clients for external captioning and aggregation services.

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "audiosae/activation_store.hpp"
#include "audiosae/common.hpp"
#include "json.hpp"

namespace audiosae::interp {

// ---------------------------------------------------------------------------
// Mel windows
// ---------------------------------------------------------------------------

/// A mel shard must pair 1:1 with an activation shard: same frame count and
/// the same audio segmentation.
void check_aligned(const store::ShardManifest& mel, std::size_t mel_frames, const store::ShardManifest& activations,
                   std::size_t activation_frames);

struct WindowAverage {
  MatrixD mean;                      // bins x window, zero padding counted as 0
  std::vector<std::size_t> valid;    // per window column, windows with real data
  std::size_t windows = 0;
  std::vector<std::size_t> centres;  // frame indices the windows were centred on
  std::vector<std::size_t> audios;   // audio indices that were used

  /// Mean over the windows with real data at each column; 0 where none.
  [[nodiscard]] MatrixD masked_mean() const;
  /// Column offset of the centre frame.
  [[nodiscard]] std::size_t centre_column() const { return static_cast<std::size_t>(mean.cols()) / 2; }
};

struct MelWindowOptions {
  std::size_t top_n = 10;
  double window_seconds = 1.0;
  double frame_rate = 50.0;
  double threshold = 0.0;  // frames with activation above this are centres
};

/// Windows never reach across audio boundaries; frames outside the audio are
/// zero-padded and left out of `valid`.
WindowAverage mel_window_average(const MatrixF& mel, std::span<const float> activation,
                                 std::span<const FrameRange> audios, const MelWindowOptions& options = {});

/// Audios ranked by peak activation, descending; ties by index.
std::vector<std::size_t> top_audios(std::span<const float> activation, std::span<const FrameRange> audios,
                                    std::size_t n);

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

struct Chunk {
  std::string id;
  std::string audio_id;
  std::size_t audio_index = 0;
  std::vector<FrameRange> spans;  // absolute shard frames, time ordered
  [[nodiscard]] std::size_t frame_count() const;
};

struct ChunkOptions {
  double threshold = 0.1;
  double chunk_seconds = 2.0;
  double frame_rate = 50.0;
};

/// Supra-threshold frames of each audio concatenated in time and cut into
/// fixed-length chunks; the last chunk of an audio may be short.
std::vector<Chunk> chunk_active_frames(std::span<const float> activation,
                                       std::span<const store::AudioSegment> audios, const ChunkOptions& options = {});

/// Chunk description sent to a captioner: spans in seconds relative to the
/// start of the audio.
nlohmann::json to_json(const Chunk& chunk, const store::AudioSegment& audio, double frame_rate);

// ---------------------------------------------------------------------------
// HTTP clients
// ---------------------------------------------------------------------------

struct Endpoint {
  std::string scheme = "http";
  std::string host;
  int port = 80;
  std::string path = "/";
  std::string token;

  static Endpoint parse(const std::string& url, const std::string& token = "");
  /// From the named URL variable and API_TOKEN; nullopt when the URL is unset.
  static std::optional<Endpoint> from_env(const char* url_variable);
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
  std::chrono::seconds timeout{60};
};

/// POSTs JSON and returns the parsed reply. Transport errors, 429 and 5xx
/// are retried with exponential backoff; other statuses fail immediately.
/// The request id travels as the Idempotency-Key header on every attempt.
nlohmann::json post_json(const Endpoint& endpoint, const nlohmann::json& body, const std::string& request_id,
                         const RetryPolicy& policy = {});

/// Stable id derived from the content, so a retried or repeated request is
/// recognisable server-side.
std::string request_id(const std::string& scope, const nlohmann::json& body);

struct CaptionerOptions {
  std::size_t batch_size = 1;   // chunks per request
  std::size_t parallelism = 4;  // concurrent requests
  RetryPolicy retry;
};

/// {"request_id", "chunks": [...]} -> {"captions": [...]}, one caption per
/// chunk, order preserved.
std::vector<std::string> caption_chunks(const Endpoint& endpoint, const std::vector<nlohmann::json>& chunks,
                                        const CaptionerOptions& options = {});

std::string aggregation_prompt(std::span<const std::string> captions);

/// {"request_id", "feature", "prompt", "captions"} -> {"label"}.
std::string aggregate_captions(const Endpoint& endpoint, const std::string& feature,
                               std::span<const std::string> captions, const RetryPolicy& policy = {});

struct FeatureInterpretation {
  std::string feature;
  std::size_t chunks = 0;
  std::vector<std::string> captions;
  std::string label;
};

nlohmann::json to_json(const FeatureInterpretation& f);

/// Lower-cased word counts over a set of texts, common function words removed.
std::map<std::string, std::size_t> word_frequencies(std::span<const std::string> texts);

}  // namespace audiosae::interp
