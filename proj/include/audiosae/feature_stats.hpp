#pragma once

// Feature robustness (IoU, coverage, duplicates) and domain specialization
// (activation frequencies, threshold assignment, Venn counts, layer ratios).

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "audiosae/common.hpp"
#include "json.hpp"

namespace audiosae::features {

enum class Level { frame, audio };
std::string to_string(Level level);

/// Sparse boolean features x items matrix stored as sorted item lists.
struct FeatureActivationMatrix {
  Level level = Level::frame;
  std::size_t item_count = 0;
  double threshold = 0.0;
  std::vector<std::vector<std::uint32_t>> active;  // per feature, ascending

  [[nodiscard]] std::size_t feature_count() const { return active.size(); }
  [[nodiscard]] std::size_t alive_count() const;
  [[nodiscard]] bool get(std::size_t feature, std::size_t item) const;
  /// feature -> items inverted into item -> features.
  [[nodiscard]] std::vector<std::vector<std::uint32_t>> by_item() const;

  bool operator==(const FeatureActivationMatrix&) const = default;
};

/// Entry (item, feature) of `codes` (items x features) is active iff value > threshold.
FeatureActivationMatrix binarize(const MatrixF& codes, double threshold, Level level = Level::frame);

/// Dense boolean version, same shape as `values`.
Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> binarize_dense(const MatrixF& values,
                                                                                 double threshold);

/// OR-reduction of a frame-level matrix over each audio's frame range.
FeatureActivationMatrix pool_audios(const FeatureActivationMatrix& frames, std::span<const FrameRange> audios);

/// OR-pools a frame grid at `from_rate` onto the coarser `to_rate` grid
/// (item i maps to floor(i * to_rate / from_rate)).
FeatureActivationMatrix pool_to_rate(const FeatureActivationMatrix& frames, double from_rate, double to_rate,
                                     std::size_t target_items);

double iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

struct CoverageResult {
  std::size_t count = 0;
  std::vector<std::size_t> indices;  // ascending
  std::size_t alive = 0;             // alive features of A
  [[nodiscard]] double fraction_of_alive() const {
    return alive == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(alive);
  }
};

/// Features of A having some feature of B with IoU > theta.
CoverageResult coverage(const FeatureActivationMatrix& a, const FeatureActivationMatrix& b, double theta = 0.5);

/// Features of A with IoU > theta against a different feature of A.
CoverageResult duplicates(const FeatureActivationMatrix& a, double theta = 0.5);

// ---------------------------------------------------------------------------
// Domain specialization
// ---------------------------------------------------------------------------

inline const std::vector<double> kFrameThresholds{0.2, 0.1, 0.04};
inline const std::vector<double> kAudioThresholds{0.5, 0.3};
inline constexpr double kColorCoefficient = 0.2;

/// Codes (frames x features) of all audios of one domain.
struct DomainCodes {
  std::string domain;
  MatrixF codes;
  std::vector<FrameRange> audios;
};

struct DomainFrequencies {
  std::vector<std::string> domains;
  MatrixD frame;       // features x domains
  MatrixD audio;       // features x domains
  MatrixD mean_value;  // mean nonzero code per feature and domain, 0 if never active

  [[nodiscard]] const MatrixD& at(Level level) const { return level == Level::frame ? frame : audio; }
  [[nodiscard]] std::size_t domain_index(const std::string& name) const;
};

/// Fraction of items in which each feature is active.
VectorD activation_frequency(const FeatureActivationMatrix& m);

DomainFrequencies domain_frequencies(std::span<const DomainCodes> domains, double threshold = 0.0);

using Rgb = std::array<double, 3>;
Rgb base_color(const std::string& label);

struct DomainAssignment {
  std::vector<std::string> combination;
  Level level = Level::frame;
  std::vector<std::string> label;  // domain name, "unassigned" or "dead"
  std::vector<int> confidence;     // threshold index, -1 unless assigned
  std::vector<Rgb> color;
  std::vector<std::string> source;  // combination that produced the label, joined by '+'

  [[nodiscard]] std::size_t size() const { return label.size(); }
};

/// Threshold assignment over the domain columns named in `combination`.
/// Thresholds must be positive and sorted descending; the first one met wins.
DomainAssignment assign_domains(const DomainFrequencies& freqs, Level level,
                                const std::vector<std::string>& combination, const std::vector<double>& thresholds);

/// Same rule on a bare frequency matrix (features x combination domains).
DomainAssignment assign_domains(const MatrixD& freqs, const std::vector<std::string>& combination,
                                const std::vector<double>& thresholds, Level level = Level::frame);

/// Three-way result wins; pairwise results fill features it left unassigned.
DomainAssignment aggregate_assignments(const DomainAssignment& three_way,
                                       std::span<const DomainAssignment> pairwise);

/// All combinations of size >= 2 of `domains`, largest first, in input order.
std::vector<std::vector<std::string>> domain_combinations(const std::vector<std::string>& domains);

using FeatureSets = std::map<std::string, std::vector<std::size_t>>;

/// S_D per domain: features assigned to D in any of the given assignments.
FeatureSets domain_sets(std::span<const DomainAssignment> assignments);

struct VennCounts {
  std::map<std::string, std::size_t> sizes;
  std::map<std::string, std::size_t> intersections;  // keys "a&b", "a&b&c", ...
  std::map<std::string, std::size_t> exclusive;      // features only in that domain
};

VennCounts venn_counts(const FeatureSets& sets);

/// Per layer, per domain share of strictly single-domain features among
/// `feature_count` features.
std::vector<std::map<std::string, double>> layer_specialization_ratio(std::span<const FeatureSets> layers,
                                                                      std::size_t feature_count);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct CoverageKey {
  std::string model_a, model_b, layer, dataset;
  double theta = 0.5;
};

nlohmann::json coverage_report(const CoverageKey& key, const CoverageResult& result, std::size_t feature_count);
nlohmann::json duplicates_report(const std::string& model, const std::string& layer, const CoverageResult& result);
nlohmann::json to_json(const DomainFrequencies& freqs);
nlohmann::json to_json(const DomainAssignment& assignment);
nlohmann::json to_json(const VennCounts& venn);

}  // namespace audiosae::features
