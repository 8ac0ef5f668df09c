#include "audiosae/steering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace audiosae::steering {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_flag(const std::string& v, std::size_t line) {
  if (v == "1" || v == "true" || v == "True") return true;
  if (v == "0" || v == "false" || v == "False") return false;
  throw ValidationError("line " + std::to_string(line) + ": is_speech must be 0/1 or true/false");
}

}  // namespace

ScoreFile parse_scores(std::istream& in, const std::string& dataset) {
  ScoreFile out;
  out.dataset = dataset;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("score file is empty");
  const auto header = split_csv(line);
  if (header != std::vector<std::string>{"audio_id", "no_speech_prob", "is_speech"}) {
    throw ValidationError("score file header must be audio_id,no_speech_prob,is_speech");
  }
  std::set<std::string> seen;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != 3) throw ValidationError("line " + std::to_string(n) + ": expected 3 columns");
    ScoreEntry e;
    e.audio_id = cells[0];
    try {
      std::size_t used = 0;
      e.no_speech_prob = std::stod(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument(cells[1]);
    } catch (const std::exception&) {
      throw ValidationError("line " + std::to_string(n) + ": bad no_speech_prob '" + cells[1] + "'");
    }
    if (!(e.no_speech_prob >= 0.0 && e.no_speech_prob <= 1.0)) {
      throw ValidationError("line " + std::to_string(n) + ": no_speech_prob outside [0, 1]");
    }
    e.is_speech = parse_flag(cells[2], n);
    if (!seen.insert(e.audio_id).second) throw ValidationError("duplicate audio id '" + e.audio_id + "'");
    out.entries.push_back(std::move(e));
  }
  return out;
}

ScoreFile read_scores(const std::filesystem::path& path, const std::string& dataset) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open score file " + path.string());
  return parse_scores(in, dataset.empty() ? path.stem().string() : dataset);
}

void write_scores(std::ostream& out, const ScoreFile& scores) {
  out << "audio_id,no_speech_prob,is_speech\n";
  out.precision(17);
  for (const auto& e : scores.entries) out << e.audio_id << ',' << e.no_speech_prob << ',' << (e.is_speech ? 1 : 0) << '\n';
}

void write_scores(const std::filesystem::path& path, const ScoreFile& scores) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  write_scores(out, scores);
}

double detection_rate(std::span<const double> probs, double tau) {
  if (probs.empty()) throw ValidationError("detection rate of an empty score list");
  std::size_t below = 0;
  for (double p : probs) below += p < tau;
  return static_cast<double>(below) / static_cast<double>(probs.size());
}

double detection_rate(const std::vector<ScoreEntry>& entries, double tau) {
  std::vector<double> p;
  for (const auto& e : entries) p.push_back(e.no_speech_prob);
  return detection_rate(p, tau);
}

std::vector<int> hallucination_labels(const ScoreFile& scores, double tau) {
  std::vector<int> out;
  for (const auto& e : scores.entries) out.push_back(e.is_speech ? -1 : (e.no_speech_prob < tau ? 1 : 0));
  return out;
}

std::string to_string(VectorKind kind) { return kind == VectorKind::baseline_svector ? "baseline_svector" : "sae_svector"; }

VectorKind parse_vector_kind(const std::string& text) {
  if (text == "baseline_svector") return VectorKind::baseline_svector;
  if (text == "sae_svector") return VectorKind::sae_svector;
  throw ValidationError("unknown steering vector kind '" + text + "'");
}

Direction parse_direction(const std::string& text) {
  if (text == "subtract") return Direction::subtract;
  if (text == "add") return Direction::add;
  throw ValidationError("direction must be 'subtract' or 'add'");
}

void SteeringVector::validate() const {
  if (!values.allFinite()) throw ValidationError("steering vector has non-finite entries");
  if (kind == VectorKind::baseline_svector) {
    if (std::abs(values.cast<double>().norm() - 1.0) > 1e-5) throw ValidationError("baseline vector must be unit norm");
    return;
  }
  if (indices.size() != signs.size()) throw ValidationError("indices and signs differ in length");
  std::size_t nonzero = 0;
  for (Eigen::Index j = 0; j < values.size(); ++j) {
    const float v = values(j);
    if (v != 0.0f && v != 1.0f && v != -1.0f) throw ValidationError("SAE steering entries must be -1, 0 or +1");
    nonzero += v != 0.0f;
  }
  if (nonzero != indices.size()) throw ValidationError("SAE steering vector nonzeros do not match its indices");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= static_cast<std::size_t>(values.size()) ||
        values(static_cast<Eigen::Index>(indices[i])) != static_cast<float>(signs[i])) {
      throw ValidationError("SAE steering index/sign mismatch");
    }
  }
}

nlohmann::json to_json(const SteeringVector& v) {
  nlohmann::json j{{"kind", to_string(v.kind)},
                   {"dim", v.values.size()},
                   {"alpha", v.alpha},
                   {"direction", v.direction == Direction::subtract ? "subtract" : "add"},
                   {"source", v.source}};
  if (v.kind == VectorKind::sae_svector) {
    j["indices"] = v.indices;
    j["signs"] = v.signs;
  } else {
    j["values"] = std::vector<float>(v.values.data(), v.values.data() + v.values.size());
  }
  return j;
}

SteeringVector steering_vector_from_json(const nlohmann::json& j) {
  SteeringVector v;
  try {
    v.kind = parse_vector_kind(j.at("kind").get<std::string>());
    const auto dim = j.at("dim").get<std::size_t>();
    v.alpha = j.value("alpha", 1.0);
    v.direction = parse_direction(j.value("direction", std::string("subtract")));
    v.source = j.value("source", std::string());
    v.values = VectorF::Zero(static_cast<Eigen::Index>(dim));
    if (v.kind == VectorKind::sae_svector) {
      v.indices = j.at("indices").get<std::vector<std::size_t>>();
      v.signs = j.at("signs").get<std::vector<int>>();
      if (v.indices.size() != v.signs.size()) throw ValidationError("indices and signs differ in length");
      for (std::size_t i = 0; i < v.indices.size(); ++i) {
        if (v.indices[i] >= dim) throw ValidationError("steering index out of range");
        v.values(static_cast<Eigen::Index>(v.indices[i])) = static_cast<float>(v.signs[i]);
      }
    } else {
      const auto values = j.at("values").get<std::vector<float>>();
      if (values.size() != dim) throw ValidationError("steering values length != dim");
      for (std::size_t i = 0; i < dim; ++i) v.values(static_cast<Eigen::Index>(i)) = values[i];
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad steering vector JSON: ") + e.what());
  }
  v.validate();
  return v;
}

void save_steering_vector(const std::filesystem::path& path, const SteeringVector& v) {
  v.validate();
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << to_json(v).dump(2) << '\n';
}

SteeringVector load_steering_vector(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open steering vector " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad steering vector JSON: ") + e.what());
  }
  return steering_vector_from_json(j);
}

VectorF baseline_svector(const VectorD& mean_h, const VectorD& mean_n) {
  if (mean_h.size() != mean_n.size()) throw ShapeError("cluster means differ in dimension");
  const VectorD diff = mean_h - mean_n;
  const double norm = diff.norm();
  if (!(norm > 0.0)) throw ValidationError("cluster means are identical; no steering direction");
  return (diff / norm).cast<float>();
}

SteeringVector sae_steering_vector(const VectorD& beta, std::size_t k) {
  const auto nonzero = static_cast<std::size_t>((beta.array() != 0.0).count());
  if (k > nonzero) {
    throw ValidationError("k = " + std::to_string(k) + " exceeds the " + std::to_string(nonzero) +
                          " nonzero coefficients");
  }
  SteeringVector v;
  v.kind = VectorKind::sae_svector;
  v.values = VectorF::Zero(beta.size());
  const auto order = probing::rank_by_magnitude(beta);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<Eigen::Index>(order[i]);
    const int sign = beta(j) > 0 ? -1 : 1;
    v.indices.push_back(order[i]);
    v.signs.push_back(sign);
    v.values(j) = static_cast<float>(sign);
  }
  return v;
}

MatrixF apply_sae_steering(const sae::SaeModel& model, const MatrixF& X, const SteeringVector& s, double alpha,
                           std::span<const FrameRange> audios, sae::Pooling pooling) {
  if (s.kind != VectorKind::sae_svector) throw ValidationError("expected an SAE steering vector");
  if (static_cast<std::size_t>(s.values.size()) != model.latent_dim()) {
    throw ShapeError("steering vector has " + std::to_string(s.values.size()) + " entries, SAE has " +
                     std::to_string(model.latent_dim()) + " features");
  }
  MatrixF codes = sae::encode_codes(model, X, audios, pooling);
  const VectorF offset = static_cast<float>(alpha) * s.values;
  codes.rowwise() += offset.transpose();
  return sae::decode(model, codes);
}

MatrixF apply_baseline_steering(const MatrixF& X, const SteeringVector& s, double alpha) {
  if (X.cols() != s.values.size()) throw ShapeError("steering vector and activations differ in dimension");
  const double sign = s.direction == Direction::subtract ? -1.0 : 1.0;
  const VectorF offset = static_cast<float>(sign * alpha) * s.values;
  MatrixF out = X;
  out.rowwise() += offset.transpose();
  return out;
}

SaeSteeringFit fit_sae_steering(const MatrixF& audio_codes, std::span<const int> labels, std::size_t k,
                                const probing::LogRegOptions& options) {
  std::vector<Eigen::Index> rows;
  std::vector<int> y;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0 || labels[i] == 1) {
      rows.push_back(static_cast<Eigen::Index>(i));
      y.push_back(labels[i]);
    }
  }
  if (static_cast<std::size_t>(audio_codes.rows()) != labels.size()) throw ShapeError("one label per audio row");
  MatrixD X(static_cast<Eigen::Index>(rows.size()), audio_codes.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = audio_codes.row(rows[i]).cast<double>();
  if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) {
    throw ValidationError("steering fit needs both hallucination (H) and non-hallucination (N) audios");
  }
  SaeSteeringFit out;
  out.classifier = probing::fit_binary_logreg(X, y, options);
  out.vector = sae_steering_vector(out.classifier.beta, k);
  return out;
}

std::vector<ReportRow> steering_report(std::span<const ScoreFile> before, std::span<const ScoreFile> after,
                                       double tau) {
  std::map<std::string, const ScoreFile*> after_by_name;
  for (const auto& f : after) after_by_name[f.dataset] = &f;
  if (after_by_name.size() != before.size()) throw ValidationError("before/after score files do not pair up");
  std::vector<ReportRow> rows;
  for (const auto& b : before) {
    const auto it = after_by_name.find(b.dataset);
    if (it == after_by_name.end()) throw ValidationError("no steered scores for dataset '" + b.dataset + "'");
    std::map<std::string, const ScoreEntry*> a_ids;
    for (const auto& e : it->second->entries) a_ids[e.audio_id] = &e;
    if (a_ids.size() != b.entries.size()) throw ValidationError("audio ids differ for dataset '" + b.dataset + "'");
    std::vector<double> pre_speech, post_speech, pre_non, post_non;
    for (const auto& e : b.entries) {
      const auto m = a_ids.find(e.audio_id);
      if (m == a_ids.end()) throw ValidationError("audio '" + e.audio_id + "' missing after steering");
      if (m->second->is_speech != e.is_speech) throw ValidationError("is_speech changed for '" + e.audio_id + "'");
      (e.is_speech ? pre_speech : pre_non).push_back(e.no_speech_prob);
      (e.is_speech ? post_speech : post_non).push_back(m->second->no_speech_prob);
    }
    if (!pre_non.empty()) {
      rows.push_back({b.dataset, "FPR", pre_non.size(), detection_rate(pre_non, tau), detection_rate(post_non, tau)});
    }
    if (!pre_speech.empty()) {
      rows.push_back({b.dataset, "TPR", pre_speech.size(), detection_rate(pre_speech, tau),
                      detection_rate(post_speech, tau)});
    }
  }
  return rows;
}

void write_report_csv(std::ostream& out, std::span<const ReportRow> rows) {
  out << "dataset,metric,count,before,after,delta\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.dataset << ',' << r.metric << ',' << r.count << ',' << r.before << ',' << r.after << ',' << r.delta()
        << '\n';
  }
}

}  // namespace audiosae::steering
