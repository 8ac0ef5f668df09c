#pragma once

// Hallucination-reduction tools: detection rates from no_speech_prob scores,
// the mean-difference baseline vector, sparse SAE steering vectors built from
// classifier coefficients, and steered reconstructions.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "audiosae/common.hpp"
#include "audiosae/probing.hpp"
#include "audiosae/sae.hpp"
#include "json.hpp"

namespace audiosae::steering {

struct ScoreEntry {
  std::string audio_id;
  double no_speech_prob = 0.0;
  bool is_speech = false;

  bool operator==(const ScoreEntry&) const = default;
};

struct ScoreFile {
  std::string dataset;
  std::vector<ScoreEntry> entries;

  bool operator==(const ScoreFile&) const = default;
};

/// CSV with header audio_id,no_speech_prob,is_speech.
ScoreFile parse_scores(std::istream& in, const std::string& dataset);
ScoreFile read_scores(const std::filesystem::path& path, const std::string& dataset = "");
void write_scores(std::ostream& out, const ScoreFile& scores);
void write_scores(const std::filesystem::path& path, const ScoreFile& scores);

inline constexpr double kDefaultTau = 0.5;

/// Fraction of probabilities below tau.
double detection_rate(std::span<const double> no_speech_probs, double tau = kDefaultTau);
double detection_rate(const std::vector<ScoreEntry>& entries, double tau = kDefaultTau);

/// Class H (1): non-speech audios the recognizer treats as speech; class N (0):
/// the remaining non-speech audios. Speech audios are omitted (-1).
std::vector<int> hallucination_labels(const ScoreFile& scores, double tau = kDefaultTau);

enum class VectorKind { baseline_svector, sae_svector };
std::string to_string(VectorKind kind);
VectorKind parse_vector_kind(const std::string& text);

/// Sign applied with the baseline vector: subtract moves away from H.
enum class Direction { subtract, add };
Direction parse_direction(const std::string& text);

struct SteeringVector {
  VectorKind kind = VectorKind::sae_svector;
  VectorF values;                    // over d (baseline) or D (SAE)
  std::vector<std::size_t> indices;  // SAE only, by descending |beta|
  std::vector<int> signs;            // SAE only, aligned with indices
  double alpha = 1.0;
  Direction direction = Direction::subtract;
  std::string source;  // dataset tag the vector was fitted on

  void validate() const;
  bool operator==(const SteeringVector&) const = default;
};

nlohmann::json to_json(const SteeringVector& v);
SteeringVector steering_vector_from_json(const nlohmann::json& j);
void save_steering_vector(const std::filesystem::path& path, const SteeringVector& v);
SteeringVector load_steering_vector(const std::filesystem::path& path);

/// (mean_H - mean_N) normalized to unit length.
VectorF baseline_svector(const VectorD& mean_h, const VectorD& mean_n);

/// Top-k coefficients by magnitude get -sign(beta_j), everything else 0.
SteeringVector sae_steering_vector(const VectorD& beta, std::size_t k);

/// decode(codes(X) + alpha * s) with codes computed as in plain reconstruction.
MatrixF apply_sae_steering(const sae::SaeModel& model, const MatrixF& X, const SteeringVector& s, double alpha,
                           std::span<const FrameRange> audios = {}, sae::Pooling pooling = sae::Pooling::per_audio);

/// X -/+ alpha * s on every row.
MatrixF apply_baseline_steering(const MatrixF& X, const SteeringVector& s, double alpha);

struct SaeSteeringFit {
  probing::BinaryLogReg classifier;
  SteeringVector vector;
};

/// Logistic regression H vs N on audio-level codes (rows), then the top-k
/// steering vector from its coefficients.
SaeSteeringFit fit_sae_steering(const MatrixF& audio_codes, std::span<const int> labels, std::size_t k,
                                const probing::LogRegOptions& options = {});

struct ReportRow {
  std::string dataset;
  std::string metric;  // "FPR" on non-speech audios, "TPR" on speech audios
  std::size_t count = 0;
  double before = 0.0;
  double after = 0.0;
  [[nodiscard]] double delta() const { return after - before; }
};

/// FPR/TPR per dataset before and after steering; audio ids must match.
std::vector<ReportRow> steering_report(std::span<const ScoreFile> before, std::span<const ScoreFile> after,
                                       double tau = kDefaultTau);
void write_report_csv(std::ostream& out, std::span<const ReportRow> rows);

}  // namespace audiosae::steering
