#pragma once

// Fisher-score ranking, logistic-regression probes, top-k probing and
// unlearning on SAE reconstructions, label-based feature search and phoneme
// labeling of features.

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "audiosae/activation_store.hpp"
#include "audiosae/common.hpp"
#include "audiosae/sae.hpp"

namespace audiosae::probing {

// ---------------------------------------------------------------------------
// Fisher score
// ---------------------------------------------------------------------------

struct FisherResult {
  VectorD scores;
  std::vector<bool> degenerate;      // zero within-class variance
  std::vector<std::size_t> ranking;  // descending score, ties by index
};

/// Pooled multi-class Fisher score per column of `X` (items x features).
FisherResult fisher_scores(const MatrixD& X, std::span<const int> labels);

/// Indices sorted by descending |values|, ties by index.
std::vector<std::size_t> rank_by_magnitude(const VectorD& values);

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

enum class Penalty { none, l2 };
Penalty parse_penalty(const std::string& text);

struct LogRegOptions {
  Penalty penalty = Penalty::none;
  double C = 1.0;  // inverse L2 strength
  std::size_t max_iter = 10'000;
  double tol = 1e-8;  // on the gradient norm of the mean log-likelihood
};

struct BinaryLogReg {
  VectorD beta;
  double intercept = 0.0;
  bool converged = false;
  std::size_t iterations = 0;

  [[nodiscard]] VectorD decision(const MatrixD& X) const;
  [[nodiscard]] VectorD probability(const MatrixD& X) const;
};

/// Newton's method with step halving on the (penalized) log-likelihood.
/// y entries are 0 or 1.
BinaryLogReg fit_binary_logreg(const MatrixD& X, std::span<const int> y, const LogRegOptions& options = {});

struct LogRegModel {
  std::vector<int> classes;            // sorted distinct labels
  std::vector<BinaryLogReg> binaries;  // one for two classes (positive = classes[1]), else one per class
  LogRegOptions options;

  [[nodiscard]] std::vector<int> predict(const MatrixD& X) const;
  [[nodiscard]] bool converged() const;
};

/// One-vs-all for more than two classes.
LogRegModel fit_logreg(const MatrixD& X, std::span<const int> labels, const LogRegOptions& options = {});

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Confusion {
  double tp = 0, tn = 0, fp = 0, fn = 0;
};

double mcc(const Confusion& c);
Confusion confusion(std::span<const int> predicted, std::span<const int> truth, int positive);
double accuracy(std::span<const int> predicted, std::span<const int> truth);

// ---------------------------------------------------------------------------
// Probing and unlearning
// ---------------------------------------------------------------------------

/// Element-wise max over each item's rows.
MatrixF max_pool(const MatrixF& rows, std::span<const FrameRange> items);

/// Codes with optional grouping: when `items` is empty each row is an item,
/// otherwise reconstructions are max-pooled over each range.
struct ProbeSplit {
  MatrixF codes;
  std::vector<FrameRange> items;
  std::vector<int> labels;  // one per item
};

enum class MaskMode { keep_top, remove_top };

/// Zeroes code columns outside (keep_top) or inside (remove_top) the first k
/// entries of `ranking`.
MatrixF mask_codes(const MatrixF& codes, std::span<const std::size_t> ranking, std::size_t k, MaskMode mode);

struct ProbePoint {
  std::size_t k = 0;
  double accuracy = 0.0;
  std::map<int, double> mcc;  // one-vs-rest per class
  bool converged = false;
};

/// Masks codes by `ranking` (keep or remove the first k), decodes with the
/// SAE, retrains a classifier on the train reconstructions and scores it on
/// the test split.
ProbePoint probe_point(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                       std::span<const std::size_t> ranking, std::size_t k, MaskMode mode,
                       const LogRegOptions& options = {});

ProbePoint topk_probe(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                      std::span<const std::size_t> ranking, std::size_t k, const LogRegOptions& options = {});
ProbePoint unlearn(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                   std::span<const std::size_t> ranking, std::size_t k, const LogRegOptions& options = {});

/// Curve over ks; points are independent and computed in parallel.
std::vector<ProbePoint> probe_curve(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                                    std::span<const std::size_t> ranking, std::span<const std::size_t> ks,
                                    MaskMode mode, const LogRegOptions& options = {});

/// CSV with header k,accuracy,mcc_<name>... in class order.
void write_curve_csv(std::ostream& out, std::span<const ProbePoint> curve, const std::map<int, std::string>& names);

/// Per stratum key, shuffles and puts round(n * train / (train + test)) items
/// into the train split.
struct Split {
  std::vector<std::size_t> train, test;
};
Split stratified_split(std::span<const std::string> strata, std::size_t train_parts, std::size_t test_parts,
                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Label search
// ---------------------------------------------------------------------------

struct LabelHit {
  std::size_t feature = 0;
  double threshold = 0.0;
  double f1 = 0.0;
};

inline constexpr double kThresholdStep = 0.1;

/// Threshold grid min + 0.1 i (i = 0, 1, ...) while it does not exceed max.
std::vector<double> threshold_grid(double min, double max);

/// Best-threshold F1 of `value > t` against `label` for one feature; ties go
/// to the lowest threshold.
LabelHit best_threshold(std::span<const float> values, const std::vector<bool>& label, std::size_t feature = 0);

/// Features (columns of `frames`) whose best F1 exceeds `min_f1`, ascending
/// feature index.
std::vector<LabelHit> label_feature_search(const MatrixF& frames, const std::vector<bool>& label, double min_f1 = 0.5,
                                           std::span<const std::size_t> candidates = {});

// ---------------------------------------------------------------------------
// Phonemes
// ---------------------------------------------------------------------------

struct PhonemeInterval {
  double start_s = 0.0;
  double end_s = 0.0;
  std::string phoneme;
};

/// Per-frame phoneme index into `inventory` (-1 where nothing is aligned),
/// using each frame's center time.
std::vector<int> frame_phonemes(std::span<const PhonemeInterval> intervals, std::size_t frame_count,
                                double frame_rate, const std::vector<std::string>& inventory);

/// Parses [{"start_s":..,"end_s":..,"phoneme":..}, ...].
std::vector<PhonemeInterval> parse_alignment(const nlohmann::json& j);

/// feature -> phoneme index for features whose aligned active frames are
/// held by one phoneme more than half the time.
std::map<std::size_t, int> phoneme_labels(const MatrixF& frames, std::span<const int> phonemes,
                                          double threshold = 0.0);

/// Fraction of aligned frames where some feature above threshold carries the
/// frame's phoneme label.
double phoneme_frame_accuracy(const MatrixF& frames, const std::map<std::size_t, int>& labels,
                              std::span<const int> phonemes, double threshold = 0.0);

}  // namespace audiosae::probing
