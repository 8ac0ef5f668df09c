#pragma once

// Temporal response functions (lagged ridge regression from stimulus to
// response) and the significance pipeline linking SAE feature activity to EEG.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "audiosae/common.hpp"
#include "json.hpp"

namespace audiosae::trf {

struct TimeSeries {
  std::vector<double> samples;
  double rate = 0.0;
  std::string id;

  void validate() const;
  [[nodiscard]] double duration() const { return static_cast<double>(samples.size()) / rate; }
};

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Second-order section b0 b1 b2 / 1 a1 a2.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double rate);
std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double rate);

/// Zero-phase forward-backward filtering with odd-extension padding and
/// steady-state initial conditions.
std::vector<double> filtfilt(std::span<const Biquad> sections, std::span<const double> x);

/// Magnitude response of the cascade at `freq_hz` (single pass).
double magnitude_response(std::span<const Biquad> sections, double freq_hz, double rate);

inline constexpr int kFilterOrder = 4;

TimeSeries bandpass(const TimeSeries& series, double low_hz = 1.0, double high_hz = 8.0);

/// Windowed-sinc resampling; output length round(n * target / rate).
TimeSeries resample(const TimeSeries& series, double target_rate = 128.0);

/// Quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

/// Zero median, unit interquartile range.
TimeSeries normalize_response(const TimeSeries& series);

/// Divides by the maximum, which must be positive.
TimeSeries normalize_stimulus(const TimeSeries& series);

inline constexpr double kDevSeconds = 360.0;

/// First `dev_seconds` for lag selection, the rest for testing.
std::pair<TimeSeries, TimeSeries> split_dev_test(const TimeSeries& series, double dev_seconds = kDevSeconds);

// ---------------------------------------------------------------------------
// TRF estimation
// ---------------------------------------------------------------------------

inline constexpr double kTrfRate = 128.0;

/// Integer sample lags covering [min_ms, max_ms] at `rate`.
std::vector<int> lag_grid(double min_ms, double max_ms, double rate);

/// Dense design matrix X[t, l] = s[t - lag_l] (zero outside the signal), for
/// tests and small problems.
MatrixD lagged_design(std::span<const double> stimulus, std::span<const int> lags);

/// sum_l w_l s[t - lag_l] + intercept.
std::vector<double> predict(std::span<const double> stimulus, std::span<const int> lags, const VectorD& weights,
                            double intercept = 0.0);

/// Gram matrix, column sums and factorizations for one stimulus, shared by
/// every response fitted against it.
class TrfDesign {
 public:
  TrfDesign(std::span<const double> stimulus, std::vector<int> lags, double lambda = 1.0, bool standardize = true);

  [[nodiscard]] std::size_t length() const { return stimulus_.size(); }
  [[nodiscard]] const std::vector<int>& lags() const { return lags_; }
  [[nodiscard]] const MatrixD& gram() const { return gram_; }
  [[nodiscard]] double lambda() const { return lambda_; }

  /// X^T r for several responses at once (columns of R, length() rows).
  [[nodiscard]] MatrixD cross(const MatrixD& R) const;

  struct Solution {
    MatrixD weights;  // lags x responses, in units of the raw stimulus
    VectorD intercept;
  };
  [[nodiscard]] Solution solve(const MatrixD& R) const;

 private:
  std::vector<double> stimulus_;
  std::vector<int> lags_;
  double lambda_;
  bool standardize_;
  MatrixD gram_;
  VectorD col_sum_;
  VectorD mean_, scale_;
  Eigen::LDLT<MatrixD> factor_;
};

struct TrfOptions {
  double min_lag_ms = 0.0;
  double max_lag_ms = 500.0;
  double lambda = 1.0;
  bool standardize = true;
};

struct TrfModel {
  std::vector<int> lags;  // samples
  double rate = kTrfRate;
  VectorD weights;
  double intercept = 0.0;
  double lambda = 1.0;
  std::string subject;
  std::string feature;

  [[nodiscard]] double lag_ms(std::size_t i) const { return 1000.0 * lags.at(i) / rate; }
};

TrfModel fit_trf(const TimeSeries& stimulus, const TimeSeries& response, const TrfOptions& options = {});

/// Ridge with the smallest dev-set squared error among `grid`, scored by
/// fitting on `fit` responses and predicting `held_out` ones.
double select_lambda(std::span<const double> fit_stimulus, const MatrixD& fit_responses,
                     std::span<const double> held_stimulus, const MatrixD& held_responses, std::span<const int> lags,
                     std::span<const double> grid, bool standardize = true);

inline const std::vector<double> kLambdaGrid{0.01, 0.1, 1.0, 10.0};

struct ExtremaLags {
  std::size_t min_index = 0;
  std::size_t max_index = 0;
};

/// Argmin and argmax of the averaged TRF; ties go to the smallest lag.
ExtremaLags extrema_lags(std::span<const TrfModel> dev_trfs);
ExtremaLags extrema_lags(const VectorD& mean_weights);

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

enum class Tail { greater, less };

/// One-sample one-sided t-test of mean(values) against zero.
double one_sided_t_pvalue(std::span<const double> values, Tail tail);

struct HolmResult {
  std::vector<bool> reject;
  std::vector<double> adjusted;
};

HolmResult holm(std::span<const double> pvalues, double alpha = 0.05);

struct TestOutcome {
  std::string feature;
  double tau_min_ms = 0.0;
  double tau_max_ms = 0.0;
  double p_min = 1.0;  // H1: w(tau_min) < 0
  double p_max = 1.0;  // H1: w(tau_max) > 0
  bool significant_min = false;
  bool significant_max = false;
  [[nodiscard]] bool significant() const { return significant_min || significant_max; }
};

nlohmann::json to_json(const TestOutcome& outcome);

/// Per-feature extrema from dev TRFs, t-tests on test TRFs across subjects.
/// `*_responses` hold one column per subject.
struct FeatureTrfs {
  std::string feature;
  std::vector<int> lags;
  double rate = kTrfRate;
  MatrixD dev;   // lags x subjects
  MatrixD test;  // lags x subjects
};

FeatureTrfs fit_feature(const std::string& feature, std::span<const double> dev_stimulus,
                        std::span<const double> test_stimulus, const MatrixD& dev_responses,
                        const MatrixD& test_responses, const TrfOptions& options = {});

TestOutcome test_feature(const FeatureTrfs& trfs);

/// Holm over both tests of every feature at level alpha; flags are written
/// back into the outcomes.
void apply_holm(std::vector<TestOutcome>& outcomes, double alpha = 0.05);

struct StudyInput {
  std::vector<std::string> features;
  std::vector<std::vector<double>> dev_stimuli;   // per feature, at kTrfRate
  std::vector<std::vector<double>> test_stimuli;  // per feature
  MatrixD dev_responses;                          // samples x subjects
  MatrixD test_responses;
};

struct StudyResult {
  std::vector<FeatureTrfs> trfs;
  std::vector<TestOutcome> outcomes;
};

StudyResult run_study(const StudyInput& input, const TrfOptions& options = {}, double alpha = 0.05);

/// Activations per second of each feature column (value > threshold counts).
std::vector<double> activation_rates(const MatrixF& codes, double frame_rate, double threshold = 0.0);

/// Indices of features activating at least `min_rate` times per second.
std::vector<std::size_t> preselect_features(const MatrixF& codes, double frame_rate, double min_rate = 1.0);

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

/// CSV: optional first line "# {json header}" with rate/channel, then one
/// value per line. Raw: little-endian f32 with a sibling .json header.
TimeSeries read_series(const std::filesystem::path& path);
void write_series_csv(const std::filesystem::path& path, const TimeSeries& series, const std::string& channel = "");

void write_trf_csv(std::ostream& out, const TrfModel& model);

}  // namespace audiosae::trf
