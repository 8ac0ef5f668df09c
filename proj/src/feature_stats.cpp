#include "audiosae/feature_stats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <set>

namespace audiosae::features {

std::string to_string(Level level) { return level == Level::frame ? "frame" : "audio"; }

std::size_t FeatureActivationMatrix::alive_count() const {
  return static_cast<std::size_t>(
      std::count_if(active.begin(), active.end(), [](const auto& items) { return !items.empty(); }));
}

bool FeatureActivationMatrix::get(std::size_t feature, std::size_t item) const {
  const auto& items = active.at(feature);
  return std::binary_search(items.begin(), items.end(), static_cast<std::uint32_t>(item));
}

std::vector<std::vector<std::uint32_t>> FeatureActivationMatrix::by_item() const {
  std::vector<std::vector<std::uint32_t>> out(item_count);
  for (std::size_t f = 0; f < active.size(); ++f) {
    for (auto item : active[f]) out[item].push_back(static_cast<std::uint32_t>(f));
  }
  return out;
}

FeatureActivationMatrix binarize(const MatrixF& codes, double threshold, Level level) {
  if (!(threshold >= 0.0)) throw ValidationError("binarization threshold must be >= 0");
  FeatureActivationMatrix m;
  m.level = level;
  m.threshold = threshold;
  m.item_count = static_cast<std::size_t>(codes.rows());
  m.active.resize(static_cast<std::size_t>(codes.cols()));
  for (Eigen::Index r = 0; r < codes.rows(); ++r) {
    for (Eigen::Index j = 0; j < codes.cols(); ++j) {
      if (codes(r, j) > threshold) m.active[static_cast<std::size_t>(j)].push_back(static_cast<std::uint32_t>(r));
    }
  }
  return m;
}

Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> binarize_dense(const MatrixF& values,
                                                                                 double threshold) {
  if (!(threshold >= 0.0)) throw ValidationError("binarization threshold must be >= 0");
  return values.array().cast<double>() > threshold;
}

FeatureActivationMatrix pool_audios(const FeatureActivationMatrix& frames, std::span<const FrameRange> audios) {
  if (frames.level != Level::frame) throw ValidationError("audio pooling expects a frame-level matrix");
  std::vector<std::uint32_t> owner(frames.item_count, UINT32_MAX);
  for (std::size_t a = 0; a < audios.size(); ++a) {
    if (audios[a].end > frames.item_count || audios[a].start > audios[a].end) {
      throw ShapeError("audio range outside the frame axis");
    }
    for (std::size_t t = audios[a].start; t < audios[a].end; ++t) owner[t] = static_cast<std::uint32_t>(a);
  }
  FeatureActivationMatrix out;
  out.level = Level::audio;
  out.threshold = frames.threshold;
  out.item_count = audios.size();
  out.active.resize(frames.feature_count());
  for (std::size_t f = 0; f < frames.feature_count(); ++f) {
    auto& dst = out.active[f];
    for (auto t : frames.active[f]) {
      if (owner[t] != UINT32_MAX) dst.push_back(owner[t]);
    }
    std::sort(dst.begin(), dst.end());
    dst.erase(std::unique(dst.begin(), dst.end()), dst.end());
  }
  return out;
}

FeatureActivationMatrix pool_to_rate(const FeatureActivationMatrix& frames, double from_rate, double to_rate,
                                     std::size_t target_items) {
  if (!(from_rate > 0.0) || !(to_rate > 0.0) || to_rate > from_rate) {
    throw ValidationError("pooling needs 0 < to_rate <= from_rate");
  }
  FeatureActivationMatrix out = frames;
  out.item_count = target_items;
  const double ratio = to_rate / from_rate;
  for (auto& items : out.active) {
    std::vector<std::uint32_t> pooled;
    for (auto t : items) {
      const auto u = static_cast<std::size_t>(std::floor(static_cast<double>(t) * ratio));
      if (u < target_items) pooled.push_back(static_cast<std::uint32_t>(u));
    }
    pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
    items = std::move(pooled);
  }
  return out;
}

namespace {

std::size_t intersection_size(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// For each feature of `a`, whether some feature of `b` (other than itself when
// `exclude_self`) has IoU > theta. Intersections are accumulated through
// b's item -> feature index so only co-active pairs are visited.
std::vector<char> matched(const FeatureActivationMatrix& a, const FeatureActivationMatrix& b, double theta,
                          bool exclude_self) {
  const auto index = b.by_item();
  std::vector<char> hit(a.feature_count(), 0);
  parallel_for(a.feature_count(), default_workers(), [&](std::size_t f) {
    const auto& items = a.active[f];
    if (items.empty()) return;
    std::vector<std::uint32_t> inter(b.feature_count(), 0);
    std::vector<std::uint32_t> touched;
    for (auto item : items) {
      for (auto g : index[item]) {
        if (inter[g]++ == 0) touched.push_back(g);
      }
    }
    for (auto g : touched) {
      if (exclude_self && g == f) continue;
      const double uni = static_cast<double>(items.size() + b.active[g].size() - inter[g]);
      if (static_cast<double>(inter[g]) / uni > theta) {
        hit[f] = 1;
        return;
      }
    }
  });
  return hit;
}

CoverageResult collect(const FeatureActivationMatrix& a, const std::vector<char>& hit) {
  CoverageResult out;
  out.alive = a.alive_count();
  for (std::size_t f = 0; f < hit.size(); ++f) {
    if (hit[f]) out.indices.push_back(f);
  }
  out.count = out.indices.size();
  return out;
}

}  // namespace

double iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  if (a.empty() && b.empty()) return 0.0;
  const auto inter = intersection_size(a, b);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

CoverageResult coverage(const FeatureActivationMatrix& a, const FeatureActivationMatrix& b, double theta) {
  if (a.item_count != b.item_count) {
    throw ShapeError("coverage: item axes differ (" + std::to_string(a.item_count) + " vs " +
                     std::to_string(b.item_count) + ")");
  }
  return collect(a, matched(a, b, theta, false));
}

CoverageResult duplicates(const FeatureActivationMatrix& a, double theta) {
  return collect(a, matched(a, a, theta, true));
}

// ---------------------------------------------------------------------------
// Domain specialization
// ---------------------------------------------------------------------------

std::size_t DomainFrequencies::domain_index(const std::string& name) const {
  const auto it = std::find(domains.begin(), domains.end(), name);
  if (it == domains.end()) throw ValidationError("unknown domain '" + name + "'");
  return static_cast<std::size_t>(it - domains.begin());
}

VectorD activation_frequency(const FeatureActivationMatrix& m) {
  if (m.item_count == 0) throw ValidationError("frequency over zero items");
  VectorD f(static_cast<Eigen::Index>(m.feature_count()));
  for (std::size_t j = 0; j < m.feature_count(); ++j) {
    f(static_cast<Eigen::Index>(j)) = static_cast<double>(m.active[j].size()) / static_cast<double>(m.item_count);
  }
  return f;
}

DomainFrequencies domain_frequencies(std::span<const DomainCodes> domains, double threshold) {
  if (domains.empty()) throw ValidationError("no domains given");
  const Eigen::Index features = domains.front().codes.cols();
  DomainFrequencies out;
  out.frame = MatrixD::Zero(features, static_cast<Eigen::Index>(domains.size()));
  out.audio = out.frame;
  out.mean_value = out.frame;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const auto& dom = domains[d];
    if (dom.codes.cols() != features) throw ShapeError("domain '" + dom.domain + "' has a different feature count");
    if (dom.codes.rows() == 0 || dom.audios.empty()) throw ValidationError("domain '" + dom.domain + "' is empty");
    out.domains.push_back(dom.domain);
    const auto frames = binarize(dom.codes, threshold);
    const auto col = static_cast<Eigen::Index>(d);
    out.frame.col(col) = activation_frequency(frames);
    out.audio.col(col) = activation_frequency(pool_audios(frames, dom.audios));
    for (Eigen::Index j = 0; j < features; ++j) {
      const auto& items = frames.active[static_cast<std::size_t>(j)];
      if (items.empty()) continue;
      double sum = 0.0;
      for (auto t : items) sum += dom.codes(t, j);
      out.mean_value(j, col) = sum / static_cast<double>(items.size());
    }
  }
  if (std::set<std::string>(out.domains.begin(), out.domains.end()).size() != out.domains.size()) {
    throw ValidationError("duplicate domain names");
  }
  return out;
}

Rgb base_color(const std::string& label) {
  if (label == "speech") return {214, 39, 40};
  if (label == "sounds") return {31, 119, 180};
  if (label == "music") return {44, 160, 44};
  if (label == "dead") return {0, 0, 0};
  return {128, 128, 128};
}

namespace {

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Absorbs rounding in differences like 0.3 - 0.1 so a margin equal to a
// threshold in exact arithmetic compares as equal here.
constexpr double kMarginSlack = 1e-12;

}  // namespace

DomainAssignment assign_domains(const MatrixD& freqs, const std::vector<std::string>& combination,
                                const std::vector<double>& thresholds, Level level) {
  if (combination.empty()) throw ValidationError("empty domain combination");
  if (freqs.cols() != static_cast<Eigen::Index>(combination.size())) {
    throw ShapeError("frequency columns do not match the combination");
  }
  if (thresholds.empty()) throw ValidationError("no thresholds");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0)) throw ValidationError("thresholds must be > 0");
    if (i && thresholds[i] > thresholds[i - 1]) throw ValidationError("thresholds must be sorted descending");
  }

  DomainAssignment out;
  out.combination = combination;
  out.level = level;
  const std::string source = join(combination, '+');
  for (Eigen::Index j = 0; j < freqs.rows(); ++j) {
    const auto row = freqs.row(j);
    std::string label = "unassigned";
    int conf = -1;
    if ((row.array() == 0.0).all()) {
      label = "dead";
    } else {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < row.size(); ++c) {
        if (row(c) > row(best)) best = c;
      }
      double margin = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < row.size(); ++c) {
        if (c != best) margin = std::min(margin, row(best) - row(c));
      }
      for (std::size_t k = 0; k < thresholds.size(); ++k) {
        if (margin >= thresholds[k] - kMarginSlack) {
          label = combination[static_cast<std::size_t>(best)];
          conf = static_cast<int>(k);
          break;
        }
      }
    }
    Rgb color = base_color(label);
    if (conf >= 0) {
      for (auto& ch : color) ch *= 1.0 - kColorCoefficient * conf;
    }
    out.label.push_back(label);
    out.confidence.push_back(conf);
    out.color.push_back(color);
    out.source.push_back(conf >= 0 || label == "dead" ? source : "");
  }
  return out;
}

DomainAssignment assign_domains(const DomainFrequencies& freqs, Level level,
                                const std::vector<std::string>& combination, const std::vector<double>& thresholds) {
  const MatrixD& all = freqs.at(level);
  MatrixD sub(all.rows(), static_cast<Eigen::Index>(combination.size()));
  for (std::size_t c = 0; c < combination.size(); ++c) {
    sub.col(static_cast<Eigen::Index>(c)) = all.col(static_cast<Eigen::Index>(freqs.domain_index(combination[c])));
  }
  return assign_domains(sub, combination, thresholds, level);
}

DomainAssignment aggregate_assignments(const DomainAssignment& three_way,
                                       std::span<const DomainAssignment> pairwise) {
  DomainAssignment out = three_way;
  for (const auto& p : pairwise) {
    if (p.size() != out.size()) throw ShapeError("assignments cover different feature counts");
  }
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (out.label[j] != "unassigned") continue;
    for (const auto& p : pairwise) {
      if (p.confidence[j] >= 0) {
        out.label[j] = p.label[j];
        out.confidence[j] = p.confidence[j];
        out.color[j] = p.color[j];
        out.source[j] = p.source[j];
        break;
      }
    }
  }
  return out;
}

std::vector<std::vector<std::string>> domain_combinations(const std::vector<std::string>& domains) {
  std::vector<std::vector<std::string>> out;
  const std::size_t n = domains.size();
  if (n > 16) throw ValidationError("too many domains");
  for (std::size_t size = n; size >= 2; --size) {
    // masks in lexicographic order of chosen indices
    std::vector<bool> pick(n, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(size), true);
    do {
      std::vector<std::string> combo;
      for (std::size_t i = 0; i < n; ++i) {
        if (pick[i]) combo.push_back(domains[i]);
      }
      out.push_back(std::move(combo));
    } while (std::prev_permutation(pick.begin(), pick.end()));
  }
  return out;
}

FeatureSets domain_sets(std::span<const DomainAssignment> assignments) {
  std::map<std::string, std::set<std::size_t>> sets;
  for (const auto& a : assignments) {
    for (const auto& d : a.combination) sets[d];
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (a.confidence[j] >= 0) sets[a.label[j]].insert(j);
    }
  }
  FeatureSets out;
  for (auto& [d, s] : sets) out[d] = {s.begin(), s.end()};
  return out;
}

VennCounts venn_counts(const FeatureSets& sets) {
  VennCounts out;
  std::vector<std::string> names;
  for (const auto& [d, s] : sets) {
    names.push_back(d);
    out.sizes[d] = std::set<std::size_t>(s.begin(), s.end()).size();
  }
  const std::size_t n = names.size();
  if (n > 16) throw ValidationError("too many domains for Venn counts");
  std::map<std::size_t, std::size_t> membership;  // feature -> domain bitmask
  for (std::size_t i = 0; i < n; ++i) {
    for (auto f : sets.at(names[i])) membership[f] |= std::size_t{1} << i;
  }
  for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
    if (std::popcount(mask) < 2) continue;
    std::vector<std::string> parts;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::size_t{1} << i)) parts.push_back(names[i]);
    }
    std::size_t count = 0;
    for (const auto& [f, m] : membership) count += (m & mask) == mask;
    out.intersections[join(parts, '&')] = count;
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (const auto& [f, m] : membership) count += m == (std::size_t{1} << i);
    out.exclusive[names[i]] = count;
  }
  return out;
}

std::vector<std::map<std::string, double>> layer_specialization_ratio(std::span<const FeatureSets> layers,
                                                                      std::size_t feature_count) {
  if (feature_count == 0) throw ValidationError("feature count must be > 0");
  std::vector<std::map<std::string, double>> out;
  for (const auto& sets : layers) {
    const auto venn = venn_counts(sets);
    std::map<std::string, double> ratios;
    for (const auto& [d, n] : venn.exclusive) {
      ratios[d] = static_cast<double>(n) / static_cast<double>(feature_count);
    }
    out.push_back(std::move(ratios));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

nlohmann::json coverage_report(const CoverageKey& key, const CoverageResult& result, std::size_t feature_count) {
  return {{"model_a", key.model_a},
          {"model_b", key.model_b},
          {"layer", key.layer},
          {"dataset", key.dataset},
          {"theta", key.theta},
          {"covered", result.count},
          {"features", feature_count},
          {"alive", result.alive},
          {"fraction_of_alive", result.fraction_of_alive()},
          {"indices", result.indices}};
}

nlohmann::json duplicates_report(const std::string& model, const std::string& layer, const CoverageResult& result) {
  return {{"model", model},
          {"layer", layer},
          {"duplicates", result.count},
          {"alive", result.alive},
          {"indices", result.indices}};
}

namespace {

nlohmann::json matrix_json(const MatrixD& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  }
  return rows;
}

}  // namespace

nlohmann::json to_json(const DomainFrequencies& f) {
  return {{"domains", f.domains},
          {"frame", matrix_json(f.frame)},
          {"audio", matrix_json(f.audio)},
          {"mean_value", matrix_json(f.mean_value)}};
}

nlohmann::json to_json(const DomainAssignment& a) {
  nlohmann::json features = nlohmann::json::array();
  for (std::size_t j = 0; j < a.size(); ++j) {
    features.push_back({{"feature", j},
                        {"label", a.label[j]},
                        {"confidence", a.confidence[j]},
                        {"color", a.color[j]},
                        {"combination", a.source[j]}});
  }
  return {{"combination", a.combination}, {"level", to_string(a.level)}, {"features", features}};
}

nlohmann::json to_json(const VennCounts& v) {
  return {{"sizes", v.sizes}, {"intersections", v.intersections}, {"exclusive", v.exclusive}};
}

}  // namespace audiosae::features
