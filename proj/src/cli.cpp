#include "audiosae/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "audiosae/activation_store.hpp"
#include "audiosae/feature_stats.hpp"
#include "audiosae/interp.hpp"
#include "audiosae/probing.hpp"
#include "audiosae/sae.hpp"
#include "audiosae/steering.hpp"
#include "audiosae/synthetic.hpp"
#include "audiosae/train.hpp"
#include "audiosae/trf.hpp"

namespace audiosae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  bool deterministic = false;
  int workers = 0;
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

json report_meta(const Globals& g, const std::string& command) {
  json meta{{"tool", "audiosae"}, {"command", command}};
  if (!g.deterministic) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::ostringstream ts;
    ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
    meta["generated_at"] = ts.str();
  }
  return meta;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void emit_json(const json& j, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << j.dump(2) << '\n';
    return;
  }
  ensure_parent(out_path);
  std::ofstream f(out_path);
  if (!f) throw RuntimeFailure("cannot write " + out_path);
  f << j.dump(2) << '\n';
}

std::ofstream open_output(const fs::path& path) {
  ensure_parent(path);
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  return f;
}

std::vector<fs::path> expand_shards(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    if (!fs::exists(a)) throw ValidationError("no such shard path: " + a);
    const auto found = store::list_shards(a);
    out.insert(out.end(), found.begin(), found.end());
  }
  if (out.empty()) throw ValidationError("no .asae shards found");
  return out;
}

// All frames of a set of shards, segments rebased onto the concatenation.
struct Dataset {
  MatrixF frames;
  std::vector<store::AudioSegment> segments;
  std::vector<std::string> segment_dataset;
  double frame_rate = 50.0;

  [[nodiscard]] std::vector<FrameRange> ranges() const {
    std::vector<FrameRange> r;
    r.reserve(segments.size());
    for (const auto& s : segments) r.push_back(s.range());
    return r;
  }
};

Dataset load_dataset(const std::vector<fs::path>& shards) {
  Dataset d;
  std::vector<store::Shard> loaded;
  Eigen::Index rows = 0;
  for (const auto& p : shards) {
    loaded.push_back(store::read_shard(p));
    rows += loaded.back().frames.rows();
  }
  const auto dim = loaded.front().frames.cols();
  d.frame_rate = loaded.front().manifest.frame_rate;
  d.frames.resize(rows, dim);
  Eigen::Index at = 0;
  for (const auto& s : loaded) {
    if (s.frames.cols() != dim) throw ShapeError("shards have different dimensions");
    if (s.manifest.frame_rate != d.frame_rate) throw ValidationError("shards have different frame rates");
    d.frames.middleRows(at, s.frames.rows()) = s.frames;
    for (auto seg : s.manifest.segments) {
      seg.start += static_cast<std::size_t>(at);
      seg.end += static_cast<std::size_t>(at);
      d.segments.push_back(std::move(seg));
      d.segment_dataset.push_back(s.manifest.dataset);
    }
    at += s.frames.rows();
  }
  return d;
}

sae::Checkpoint load_model(const std::string& path) {
  auto ck = sae::load_checkpoint(path);
  ck.model.validate();
  return ck;
}

MatrixF codes_for(const sae::SaeModel& model, const Dataset& data) {
  if (static_cast<std::size_t>(data.frames.cols()) != model.input_dim()) {
    throw ShapeError("checkpoint expects " + std::to_string(model.input_dim()) + "-dim inputs, shards have " +
                     std::to_string(data.frames.cols()));
  }
  const auto r = data.ranges();
  return sae::encode_codes(model, data.frames, r, sae::Pooling::per_audio);
}

features::Level parse_level(const std::string& s) {
  if (s == "frame") return features::Level::frame;
  if (s == "audio") return features::Level::audio;
  throw ValidationError("level must be frame or audio, got '" + s + "'");
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      const auto v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValidationError("expected a comma-separated list of integers, got '" + text + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

struct ValidateArgs {
  std::vector<std::string> shards;
  std::vector<std::string> checkpoints;
  std::vector<std::string> vectors;
};

int cmd_validate(const ValidateArgs& a, std::ostream& out) {
  if (a.shards.empty() && a.checkpoints.empty() && a.vectors.empty()) {
    throw ValidationError("validate: give --shards, --checkpoint or --vector");
  }
  bool ok = true;
  if (!a.shards.empty()) {
    for (const auto& p : expand_shards(a.shards)) {
      const auto v = store::validate_shard(p);
      out << (v.ok() ? "OK   " : "FAIL ") << p.string() << '\n';
      for (const auto& problem : v.problems) out << "  " << problem << '\n';
      ok = ok && v.ok();
    }
  }
  for (const auto& c : a.checkpoints) {
    try {
      const auto ck = load_model(c);
      out << "OK   " << c << " (d=" << ck.model.input_dim() << ", D=" << ck.model.latent_dim() << ")\n";
    } catch (const Error& e) {
      out << "FAIL " << c << "\n  " << e.what() << '\n';
      ok = false;
    }
  }
  for (const auto& v : a.vectors) {
    try {
      steering::load_steering_vector(v).validate();
      out << "OK   " << v << '\n';
    } catch (const Error& e) {
      out << "FAIL " << v << "\n  " << e.what() << '\n';
      ok = false;
    }
  }
  return ok ? kExitOk : kExitValidation;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t dim = 16;
  std::size_t atoms = 64;
  std::size_t frames = 20000;
  std::size_t frames_per_audio = 100;
  std::size_t active = 3;
  double noise = 0.01;
  std::uint64_t seed = 0;
  std::vector<std::string> domains{"speech"};
  std::string dataset = "synthetic";
  std::size_t mel_bins = 0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.dim == 0 || a.atoms == 0 || a.frames == 0 || a.frames_per_audio == 0) {
    throw ValidationError("synth: sizes must be positive");
  }
  store::Rng rng(a.seed);
  const MatrixF atoms = synthetic::random_unit_atoms(a.dim, a.atoms, rng);
  synthetic::PlantedOptions opt;
  opt.active_atoms = a.active;
  opt.noise_std = a.noise;
  const MatrixF frames = synthetic::sample_planted(atoms, a.frames, opt, rng);
  auto manifest = synthetic::make_manifest(a.dataset, a.frames, a.frames_per_audio, a.domains.front());
  for (std::size_t i = 0; i < manifest.segments.size(); ++i) {
    manifest.segments[i].domain = a.domains[i % a.domains.size()];
  }
  fs::create_directories(a.out);
  const fs::path shard = fs::path(a.out) / (a.dataset + ".asae");
  store::write_shard(shard, frames, manifest);

  json atoms_json = json::array();
  for (Eigen::Index c = 0; c < atoms.cols(); ++c) {
    atoms_json.push_back(std::vector<float>(atoms.col(c).data(), atoms.col(c).data() + atoms.rows()));
  }
  std::ofstream(fs::path(a.out) / "atoms.json") << json{{"atoms", atoms_json}}.dump() << '\n';

  if (a.mel_bins > 0) {
    std::normal_distribution<float> z(0.0f, 1.0f);
    MatrixF mel(static_cast<Eigen::Index>(a.frames), static_cast<Eigen::Index>(a.mel_bins));
    for (Eigen::Index i = 0; i < mel.size(); ++i) mel.data()[i] = z(rng);
    auto mel_manifest = manifest;
    mel_manifest.kind = "mel";
    std::filesystem::create_directories(fs::path(a.out) / "mel");
    store::write_shard(fs::path(a.out) / "mel" / (a.dataset + ".asae"), mel, mel_manifest);
  }
  out << "wrote " << shard.string() << " (" << a.frames << " x " << a.dim << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::vector<std::string> shards;
  std::string out;
  std::string config;
  std::string resume;
  std::string metrics;
  std::optional<std::size_t> steps, k, expansion, batch_size, warmup;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  train::TrainConfig cfg = a.config.empty() ? train::TrainConfig{} : train::load_config(a.config);
  if (a.steps) cfg.total_steps = *a.steps;
  if (a.k) cfg.k = *a.k;
  if (a.expansion) cfg.expansion = *a.expansion;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.warmup) cfg.warmup_steps = *a.warmup;
  if (a.seed) cfg.seed = *a.seed;
  if (a.lr) cfg.learning_rate = *a.lr;
  cfg.validate();

  train::ShardSource source(expand_shards(a.shards), cfg);
  std::optional<sae::Checkpoint> resume;
  if (!a.resume.empty()) resume = load_model(a.resume);
  std::ofstream metrics;
  if (!a.metrics.empty()) metrics = open_output(a.metrics);
  const auto ck = train::train(cfg, source, a.metrics.empty() ? nullptr : &metrics, resume);
  ensure_parent(a.out);
  sae::save_checkpoint(a.out, ck);
  out << "wrote " << a.out << " after " << cfg.total_steps << " steps\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// coverage
// ---------------------------------------------------------------------------

struct CoverageArgs {
  std::string a, b;
  std::vector<std::string> shards;
  double theta = 0.5;
  double threshold = 0.0;
  std::string level = "frame";
  std::string layer;
  bool duplicates = false;
  std::string out;
};

int cmd_coverage(const CoverageArgs& a, const Globals& g, std::ostream& out) {
  const auto level = parse_level(a.level);
  const auto data = load_dataset(expand_shards(a.shards));
  const auto ca = load_model(a.a);
  const auto cb = load_model(a.b);
  auto fa = features::binarize(codes_for(ca.model, data), a.threshold);
  auto fb = features::binarize(codes_for(cb.model, data), a.threshold);
  if (level == features::Level::audio) {
    const auto r = data.ranges();
    fa = features::pool_audios(fa, r);
    fb = features::pool_audios(fb, r);
  }
  const auto result = features::coverage(fa, fb, a.theta);
  std::set<std::string> names(data.segment_dataset.begin(), data.segment_dataset.end());
  std::string dataset;
  for (const auto& n : names) dataset += (dataset.empty() ? "" : "+") + n;
  features::CoverageKey key{fs::path(a.a).stem().string(), fs::path(a.b).stem().string(), a.layer, dataset, a.theta};
  json report{{"meta", report_meta(g, "coverage")},
              {"level", features::to_string(level)},
              {"coverage", features::coverage_report(key, result, fa.feature_count())}};
  if (a.duplicates) {
    report["duplicates_a"] = features::duplicates_report(key.model_a, a.layer, features::duplicates(fa, a.theta));
    report["duplicates_b"] = features::duplicates_report(key.model_b, a.layer, features::duplicates(fb, a.theta));
  }
  emit_json(report, a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// domains
// ---------------------------------------------------------------------------

struct DomainsArgs {
  std::string checkpoint;
  std::vector<std::string> shards;
  double threshold = 0.0;
  std::string out;
};

int cmd_domains(const DomainsArgs& a, const Globals& g, std::ostream& out) {
  const auto data = load_dataset(expand_shards(a.shards));
  const auto ck = load_model(a.checkpoint);
  const MatrixF codes = codes_for(ck.model, data);

  std::vector<std::string> order;
  for (const auto& s : data.segments) {
    if (std::find(order.begin(), order.end(), s.domain) == order.end()) order.push_back(s.domain);
  }
  if (order.size() < 2) throw ValidationError("domains: need audios from at least two domains");
  std::vector<features::DomainCodes> groups;
  for (const auto& name : order) {
    features::DomainCodes dc;
    dc.domain = name;
    Eigen::Index rows = 0;
    for (const auto& s : data.segments) {
      if (s.domain == name) rows += static_cast<Eigen::Index>(s.end - s.start);
    }
    dc.codes.resize(rows, codes.cols());
    std::size_t at = 0;
    for (const auto& s : data.segments) {
      if (s.domain != name) continue;
      dc.codes.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(s.size())) =
          codes.middleRows(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.size()));
      dc.audios.push_back(FrameRange{at, at + s.size()});
      at += s.size();
    }
    groups.push_back(std::move(dc));
  }
  const auto freqs = features::domain_frequencies(groups, a.threshold);
  const auto combos = features::domain_combinations(order);

  json report{{"meta", report_meta(g, "domains")}, {"frequencies", features::to_json(freqs)}};
  for (const auto level : {features::Level::frame, features::Level::audio}) {
    const auto& thresholds = level == features::Level::frame ? features::kFrameThresholds : features::kAudioThresholds;
    const auto first = features::assign_domains(freqs, level, combos.front(), thresholds);
    std::vector<features::DomainAssignment> rest;
    for (std::size_t i = 1; i < combos.size(); ++i) {
      rest.push_back(features::assign_domains(freqs, level, combos[i], thresholds));
    }
    const auto combined = features::aggregate_assignments(first, rest);
    std::vector<features::DomainAssignment> all{combined};
    all.insert(all.end(), rest.begin(), rest.end());
    const auto name = features::to_string(level);
    report["assignment"][name] = features::to_json(combined);
    report["venn"][name] = features::to_json(features::venn_counts(features::domain_sets(all)));
  }
  emit_json(report, a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe / unlearn
// ---------------------------------------------------------------------------

struct ProbeArgs {
  std::string checkpoint;
  std::vector<std::string> train_shards, test_shards;
  std::string label;
  std::string ks;
  std::string penalty = "none";
  double C = 1.0;
  std::string out;
  std::string ranking_out;
};

probing::ProbeSplit make_split(const sae::SaeModel& model, const Dataset& data, const std::string& label,
                               std::map<std::string, int>& classes) {
  probing::ProbeSplit split;
  split.codes = codes_for(model, data);
  for (const auto& s : data.segments) {
    const auto it = s.labels.find(label);
    if (it == s.labels.end()) throw ValidationError("audio '" + s.audio_id + "' has no label '" + label + "'");
    const auto [pos, inserted] = classes.emplace(it->second, static_cast<int>(classes.size()));
    split.items.push_back(s.range());
    split.labels.push_back(pos->second);
  }
  return split;
}

int cmd_probe(const ProbeArgs& a, probing::MaskMode mode, const Globals& g, std::ostream& out) {
  const auto ck = load_model(a.checkpoint);
  std::map<std::string, int> classes;
  const auto train_data = load_dataset(expand_shards(a.train_shards));
  const auto test_data = load_dataset(expand_shards(a.test_shards));
  const auto train = make_split(ck.model, train_data, a.label, classes);
  const auto test = make_split(ck.model, test_data, a.label, classes);
  if (classes.size() < 2) throw ValidationError("probe: label '" + a.label + "' has a single class");

  const MatrixF pooled = probing::max_pool(train.codes, train.items);
  const auto fisher = probing::fisher_scores(pooled.cast<double>(), train.labels);

  std::vector<std::size_t> ks = a.ks.empty() ? std::vector<std::size_t>{} : parse_index_list(a.ks);
  if (ks.empty()) {
    const auto D = ck.model.latent_dim();
    for (std::size_t k = 1; k < D; k *= 2) ks.push_back(k);
    ks.push_back(D);
  }
  probing::LogRegOptions opt;
  opt.penalty = probing::parse_penalty(a.penalty);
  opt.C = a.C;
  const auto curve = probing::probe_curve(ck.model, train, test, fisher.ranking, ks, mode, opt);

  std::map<int, std::string> names;
  for (const auto& [name, id] : classes) names[id] = name;
  if (a.out.empty()) {
    probing::write_curve_csv(out, curve, names);
  } else {
    auto f = open_output(a.out);
    probing::write_curve_csv(f, curve, names);
  }
  if (!a.ranking_out.empty()) {
    json r{{"meta", report_meta(g, mode == probing::MaskMode::keep_top ? "probe" : "unlearn")},
           {"label", a.label},
           {"ranking", fisher.ranking},
           {"scores", std::vector<double>(fisher.scores.data(), fisher.scores.data() + fisher.scores.size())}};
    emit_json(r, a.ranking_out, out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

struct SteerArgs {
  std::string checkpoint;
  std::vector<std::string> shards;
  std::vector<std::string> scores;
  std::string vector_path;
  std::size_t k = 10;
  double alpha = 3.0;
  std::optional<double> alpha_override;
  std::string direction = "subtract";
  double tau = steering::kDefaultTau;
  std::string out;
  std::vector<std::string> before, after;
};

// Audio labels from score files keyed by audio id, in segment order.
std::vector<int> steering_labels(const Dataset& data, const std::vector<std::string>& score_files, double tau) {
  std::map<std::string, int> by_id;
  for (const auto& f : score_files) {
    const auto scores = steering::read_scores(f);
    const auto labels = steering::hallucination_labels(scores, tau);
    for (std::size_t i = 0; i < labels.size(); ++i) by_id[scores.entries[i].audio_id] = labels[i];
  }
  std::vector<int> out;
  for (const auto& s : data.segments) {
    const auto it = by_id.find(s.audio_id);
    if (it == by_id.end()) throw ValidationError("no score for audio '" + s.audio_id + "'");
    out.push_back(it->second);
  }
  return out;
}

int cmd_steer_fit(const SteerArgs& a, std::ostream& out) {
  const auto ck = load_model(a.checkpoint);
  const auto data = load_dataset(expand_shards(a.shards));
  const auto labels = steering_labels(data, a.scores, a.tau);
  const MatrixF audio_codes = probing::max_pool(codes_for(ck.model, data), data.ranges());
  auto fit = steering::fit_sae_steering(audio_codes, labels, a.k);
  fit.vector.alpha = a.alpha;
  fit.vector.source = data.segment_dataset.empty() ? "" : data.segment_dataset.front();
  steering::save_steering_vector(a.out, fit.vector);
  out << "wrote " << a.out << " (top-" << a.k << ", classifier "
      << (fit.classifier.converged ? "converged" : "did not converge") << ")\n";
  return kExitOk;
}

int cmd_steer_baseline(const SteerArgs& a, std::ostream& out) {
  const auto data = load_dataset(expand_shards(a.shards));
  const auto labels = steering_labels(data, a.scores, a.tau);
  const auto dim = data.frames.cols();
  VectorD mh = VectorD::Zero(dim), mn = VectorD::Zero(dim);
  std::size_t nh = 0, nn = 0;
  for (std::size_t i = 0; i < data.segments.size(); ++i) {
    const auto& s = data.segments[i];
    if (labels[i] < 0 || s.size() == 0) continue;
    const VectorD mean = data.frames.middleRows(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.size()))
                             .cast<double>()
                             .colwise()
                             .mean()
                             .transpose();
    if (labels[i] == 1) {
      mh += mean;
      ++nh;
    } else {
      mn += mean;
      ++nn;
    }
  }
  if (nh == 0 || nn == 0) throw ValidationError("steer baseline: need both hallucinated and clean non-speech audios");
  steering::SteeringVector v;
  v.kind = steering::VectorKind::baseline_svector;
  v.values = steering::baseline_svector(mh / static_cast<double>(nh), mn / static_cast<double>(nn));
  v.alpha = a.alpha;
  v.direction = steering::parse_direction(a.direction);
  v.source = data.segment_dataset.empty() ? "" : data.segment_dataset.front();
  steering::save_steering_vector(a.out, v);
  out << "wrote " << a.out << '\n';
  return kExitOk;
}

int cmd_steer_apply(const SteerArgs& a, std::ostream& out) {
  const auto v = steering::load_steering_vector(a.vector_path);
  v.validate();
  const double alpha = a.alpha_override.value_or(v.alpha);
  std::optional<sae::Checkpoint> ck;
  if (v.kind == steering::VectorKind::sae_svector) {
    if (a.checkpoint.empty()) throw ValidationError("steer apply: SAE vectors need --checkpoint");
    ck = load_model(a.checkpoint);
  }
  fs::create_directories(a.out);
  for (const auto& p : expand_shards(a.shards)) {
    const auto shard = store::read_shard(p);
    const auto r = shard.manifest.ranges();
    const MatrixF steered = ck ? steering::apply_sae_steering(ck->model, shard.frames, v, alpha, r)
                               : steering::apply_baseline_steering(shard.frames, v, alpha);
    store::write_shard(fs::path(a.out) / p.filename(), steered, shard.manifest);
    out << "wrote " << (fs::path(a.out) / p.filename()).string() << '\n';
  }
  return kExitOk;
}

int cmd_steer_report(const SteerArgs& a, std::ostream& out) {
  if (a.before.size() != a.after.size() || a.before.empty()) {
    throw ValidationError("steer report: give matching --before and --after score files");
  }
  std::vector<steering::ScoreFile> before, after;
  for (const auto& f : a.before) before.push_back(steering::read_scores(f));
  for (const auto& f : a.after) after.push_back(steering::read_scores(f));
  // Dataset tags come from the file names; pair them by position.
  for (std::size_t i = 0; i < after.size(); ++i) after[i].dataset = before[i].dataset;
  const auto rows = steering::steering_report(before, after, a.tau);
  if (a.out.empty()) {
    steering::write_report_csv(out, rows);
  } else {
    auto f = open_output(a.out);
    steering::write_report_csv(f, rows);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// trf
// ---------------------------------------------------------------------------

struct TrfArgs {
  std::vector<std::string> eeg;
  std::string stimuli;
  std::string checkpoint;
  std::vector<std::string> shards;
  std::string features;
  double dev_seconds = trf::kDevSeconds;
  double lambda = 1.0;
  bool lambda_grid = false;
  double min_lag = 0.0, max_lag = 500.0;
  double min_rate = 1.0;
  double alpha = 0.05;
  bool no_bandpass = false;
  std::string out;
};

std::vector<fs::path> series_files(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(a)) {
        const auto ext = e.path().extension();
        if (ext == ".csv" || ext == ".f32") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(a)) {
      out.emplace_back(a);
    } else {
      throw ValidationError("no such series path: " + a);
    }
  }
  return out;
}

int cmd_trf(const TrfArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  const auto eeg_files = series_files(a.eeg);
  if (eeg_files.size() < 2) throw ValidationError("trf: need EEG from at least 2 subjects");

  std::vector<trf::TimeSeries> responses;
  for (const auto& f : eeg_files) {
    auto ts = trf::read_series(f);
    ts.id = f.stem().string();
    if (!a.no_bandpass) ts = trf::bandpass(ts);
    responses.push_back(trf::normalize_response(trf::resample(ts, trf::kTrfRate)));
  }

  std::vector<trf::TimeSeries> stimuli;
  if (!a.stimuli.empty()) {
    for (const auto& f : series_files({a.stimuli})) {
      auto ts = trf::read_series(f);
      ts.id = f.stem().string();
      stimuli.push_back(trf::resample(ts, trf::kTrfRate));
    }
  } else {
    if (a.checkpoint.empty() || a.shards.empty()) {
      throw ValidationError("trf: give --stimuli or --checkpoint with --shards");
    }
    const auto data = load_dataset(expand_shards(a.shards));
    const auto ck = load_model(a.checkpoint);
    const MatrixF codes = codes_for(ck.model, data);
    const auto chosen = a.features.empty() ? trf::preselect_features(codes, data.frame_rate, a.min_rate)
                                           : parse_index_list(a.features);
    for (std::size_t j : chosen) {
      if (j >= static_cast<std::size_t>(codes.cols())) throw ValidationError("trf: feature index out of range");
      trf::TimeSeries ts;
      ts.rate = data.frame_rate;
      ts.id = std::to_string(j);
      ts.samples.assign(codes.rows(), 0.0);
      for (Eigen::Index t = 0; t < codes.rows(); ++t) ts.samples[static_cast<std::size_t>(t)] = codes(t, static_cast<Eigen::Index>(j));
      stimuli.push_back(trf::resample(ts, trf::kTrfRate));
    }
  }
  if (stimuli.empty()) throw ValidationError("trf: no features selected");

  std::size_t length = responses.front().samples.size();
  for (const auto& r : responses) length = std::min(length, r.samples.size());
  for (const auto& s : stimuli) length = std::min(length, s.samples.size());
  const auto dev_len = static_cast<std::size_t>(std::llround(a.dev_seconds * trf::kTrfRate));
  if (dev_len == 0 || dev_len >= length) throw ValidationError("trf: development split must be shorter than the data");

  trf::StudyInput in;
  const auto subjects = static_cast<Eigen::Index>(responses.size());
  in.dev_responses.resize(static_cast<Eigen::Index>(dev_len), subjects);
  in.test_responses.resize(static_cast<Eigen::Index>(length - dev_len), subjects);
  for (Eigen::Index c = 0; c < subjects; ++c) {
    const auto& r = responses[static_cast<std::size_t>(c)].samples;
    for (std::size_t t = 0; t < length; ++t) {
      if (t < dev_len) {
        in.dev_responses(static_cast<Eigen::Index>(t), c) = r[t];
      } else {
        in.test_responses(static_cast<Eigen::Index>(t - dev_len), c) = r[t];
      }
    }
  }
  std::vector<std::string> skipped;
  for (auto& s : stimuli) {
    s.samples.resize(length);
    if (*std::max_element(s.samples.begin(), s.samples.end()) <= 0.0) {
      skipped.push_back(s.id);
      continue;
    }
    s = trf::normalize_stimulus(s);
    in.features.push_back(s.id);
    in.dev_stimuli.emplace_back(s.samples.begin(), s.samples.begin() + static_cast<std::ptrdiff_t>(dev_len));
    in.test_stimuli.emplace_back(s.samples.begin() + static_cast<std::ptrdiff_t>(dev_len), s.samples.end());
  }
  for (const auto& id : skipped) err << "trf: skipping feature " << id << " (never active)\n";
  if (in.features.empty()) throw ValidationError("trf: every selected feature is silent");

  trf::TrfOptions opt;
  opt.min_lag_ms = a.min_lag;
  opt.max_lag_ms = a.max_lag;
  opt.lambda = a.lambda;
  if (a.lambda_grid) {
    // Ridge chosen on the dev split alone: first half fits, second half scores.
    const auto half = static_cast<Eigen::Index>(dev_len / 2);
    const auto lags = trf::lag_grid(opt.min_lag_ms, opt.max_lag_ms, trf::kTrfRate);
    const auto& s0 = in.dev_stimuli.front();
    opt.lambda = trf::select_lambda({s0.data(), static_cast<std::size_t>(half)}, in.dev_responses.topRows(half),
                                    {s0.data() + half, dev_len - static_cast<std::size_t>(half)},
                                    in.dev_responses.bottomRows(static_cast<Eigen::Index>(dev_len) - half), lags,
                                    trf::kLambdaGrid);
  }
  const auto result = trf::run_study(in, opt, a.alpha);

  json outcomes = json::array();
  for (const auto& o : result.outcomes) outcomes.push_back(trf::to_json(o));
  json report{{"meta", report_meta(g, "trf")},
              {"subjects", responses.size()},
              {"lambda", opt.lambda},
              {"alpha", a.alpha},
              {"dev_seconds", static_cast<double>(dev_len) / trf::kTrfRate},
              {"test_seconds", static_cast<double>(length - dev_len) / trf::kTrfRate},
              {"skipped", skipped},
              {"outcomes", outcomes}};
  if (a.out.empty()) {
    out << report.dump(2) << '\n';
    return kExitOk;
  }
  fs::create_directories(a.out);
  emit_json(report, (fs::path(a.out) / "outcomes.json").string(), out);
  for (const auto& t : result.trfs) {
    trf::TrfModel m;
    m.lags = t.lags;
    m.rate = t.rate;
    m.weights = t.test.rowwise().mean();
    m.feature = t.feature;
    auto f = open_output(fs::path(a.out) / ("trf_" + t.feature + ".csv"));
    trf::write_trf_csv(f, m);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// interpret
// ---------------------------------------------------------------------------

struct InterpretArgs {
  std::string checkpoint;
  std::vector<std::string> shards;
  std::vector<std::string> mel_shards;
  std::string features;
  double threshold = 0.1;
  std::size_t top_n = 10;
  std::string captioner_url, aggregator_url;
  std::size_t parallelism = 4;
  std::size_t batch_size = 1;
  std::string out;
};

int cmd_interpret(const InterpretArgs& a, const Globals& g, std::ostream& out) {
  const auto data = load_dataset(expand_shards(a.shards));
  const auto ck = load_model(a.checkpoint);
  const MatrixF codes = codes_for(ck.model, data);
  const auto chosen = parse_index_list(a.features);
  if (chosen.empty()) throw ValidationError("interpret: --features is empty");
  for (std::size_t j : chosen) {
    if (j >= static_cast<std::size_t>(codes.cols())) throw ValidationError("interpret: feature index out of range");
  }

  const char* token_env = std::getenv("API_TOKEN");
  const std::string token = token_env ? token_env : "";
  auto endpoint = [&](const std::string& flag, const char* var) -> std::optional<interp::Endpoint> {
    if (!flag.empty()) return interp::Endpoint::parse(flag, token);
    return interp::Endpoint::from_env(var);
  };
  const auto captioner = endpoint(a.captioner_url, "CAPTIONER_URL");
  const auto aggregator = endpoint(a.aggregator_url, "AGGREGATOR_URL");

  std::optional<Dataset> mel;
  if (!a.mel_shards.empty()) {
    const auto mel_paths = expand_shards(a.mel_shards);
    mel = load_dataset(mel_paths);
    store::ShardManifest mm, am;
    mm.kind = "mel";
    mm.segments = mel->segments;
    am.segments = data.segments;
    interp::check_aligned(mm, static_cast<std::size_t>(mel->frames.rows()), am, static_cast<std::size_t>(data.frames.rows()));
    for (const auto& p : mel_paths) {
      if (store::read_manifest(store::manifest_path_for(p)).kind != "mel") {
        throw ValidationError(p.string() + " is not a mel shard (kind != mel)");
      }
    }
  }

  if (!a.out.empty()) fs::create_directories(a.out);
  json features_json = json::array();
  std::vector<std::string> labels;
  std::vector<std::string> all_captions;
  for (std::size_t j : chosen) {
    std::vector<float> act(static_cast<std::size_t>(codes.rows()));
    for (Eigen::Index t = 0; t < codes.rows(); ++t) act[static_cast<std::size_t>(t)] = codes(t, static_cast<Eigen::Index>(j));
    interp::ChunkOptions copt;
    copt.threshold = a.threshold;
    copt.frame_rate = data.frame_rate;
    const auto chunks = interp::chunk_active_frames(act, data.segments, copt);
    std::vector<json> chunk_json;
    for (const auto& c : chunks) chunk_json.push_back(interp::to_json(c, data.segments[c.audio_index], data.frame_rate));

    interp::FeatureInterpretation fi;
    fi.feature = std::to_string(j);
    fi.chunks = chunks.size();
    if (captioner && !chunks.empty()) {
      interp::CaptionerOptions copts;
      copts.parallelism = a.parallelism;
      copts.batch_size = a.batch_size;
      fi.captions = interp::caption_chunks(*captioner, chunk_json, copts);
      if (aggregator) fi.label = interp::aggregate_captions(*aggregator, fi.feature, fi.captions);
    }
    json fj = interp::to_json(fi);
    fj["chunk_list"] = chunk_json;
    if (mel) {
      interp::MelWindowOptions mopt;
      mopt.top_n = a.top_n;
      mopt.frame_rate = data.frame_rate;
      try {
        const auto w = interp::mel_window_average(mel->frames, act, data.ranges(), mopt);
        fj["mel_windows"] = w.windows;
        if (!a.out.empty()) {
          auto f = open_output(fs::path(a.out) / ("mel_" + fi.feature + ".csv"));
          f.precision(8);
          for (Eigen::Index b = 0; b < w.mean.rows(); ++b) {
            for (Eigen::Index c = 0; c < w.mean.cols(); ++c) f << (c ? "," : "") << w.mean(b, c);
            f << '\n';
          }
        }
      } catch (const ValidationError&) {
        fj["mel_windows"] = 0;
      }
    }
    if (!fi.label.empty()) labels.push_back(fi.label);
    all_captions.insert(all_captions.end(), fi.captions.begin(), fi.captions.end());
    features_json.push_back(fj);
  }
  json report{{"meta", report_meta(g, "interpret")},
              {"threshold", a.threshold},
              {"features", features_json},
              {"word_frequencies", {{"labels", interp::word_frequencies(labels)},
                                    {"captions", interp::word_frequencies(all_captions)}}}};
  emit_json(report, a.out.empty() ? "" : (fs::path(a.out) / "interpretations.json").string(), out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

std::string config_dummy;

// Flat "key = value" files; each key names a long flag of the subcommand.
void add_config(CLI::App* sub) {
  sub->add_option("--config", config_dummy, "Flat key = value file with flag values")->check(CLI::ExistingFile);
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  return s;
}

bool given(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

// Appends flags from the subcommand's --config file; command-line values win.
// `train` keeps --config for its own training-config format.
std::vector<std::string> expand_config(CLI::App& app, const std::vector<std::string>& args) {
  CLI::App* leaf = &app;
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (auto* sub = leaf->get_subcommand_no_throw(args[i]); sub != nullptr && args[i].front() != '-') {
      leaf = sub;
    } else if (leaf != &app && args[i] == "--config" && i + 1 < args.size()) {
      config = args[i + 1];
    } else if (leaf != &app && args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    }
  }
  if (config.empty() || leaf->get_name() == "train") return args;
  std::ifstream in(config);
  if (!in) return args;  // the option's ExistingFile check reports it

  auto out = args;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(config + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const std::string flag = "--" + key;
    const CLI::Option* opt = leaf->get_option_no_throw(flag);
    if (key.empty() || key == "config" || opt == nullptr) {
      throw ValidationError(config + ":" + std::to_string(lineno) + ": unknown key '" + key + "' for " +
                            leaf->get_name());
    }
    if (given(args, flag)) continue;
    if (opt->get_expected_max() == 0) {
      if (value == "true" || value == "1") {
        out.push_back(flag);
      } else if (value != "false" && value != "0") {
        throw ValidationError(config + ":" + std::to_string(lineno) + ": '" + key + "' takes true or false");
      }
      continue;
    }
    out.push_back(flag);
    std::istringstream words(value);
    for (std::string w; words >> w;) out.push_back(w);
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse-autoencoder toolkit for audio-encoder activations", "audiosae"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_flag("--deterministic", g.deterministic, "Omit timestamps so reports are byte-identical across runs");
  app.add_option("--workers", g.workers, "Worker threads (overrides AUDIOSAE_WORKERS)")->check(CLI::PositiveNumber);

  ValidateArgs va;
  auto* validate = app.add_subcommand("validate", "Check shards, checkpoints and steering vectors");
  validate->add_option("--shards", va.shards, "Shard files or directories");
  validate->add_option("--checkpoint", va.checkpoints, "Checkpoint files");
  validate->add_option("--vector", va.vectors, "Steering vector files");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic shard with a planted dictionary");
  add_config(synth);
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--dim", sa.dim);
  synth->add_option("--atoms", sa.atoms);
  synth->add_option("--frames", sa.frames);
  synth->add_option("--frames-per-audio", sa.frames_per_audio);
  synth->add_option("--active", sa.active, "Atoms per frame");
  synth->add_option("--noise", sa.noise);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--domain", sa.domains, "Domain tags assigned to audios round-robin");
  synth->add_option("--dataset", sa.dataset);
  synth->add_option("--mel-bins", sa.mel_bins, "Also write an aligned random mel shard");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train an SAE on activation shards");
  trn->add_option("--shards", ta.shards)->required();
  trn->add_option("--out", ta.out, "Checkpoint path")->required();
  trn->add_option("--config", ta.config, "Training config (key = value)")->check(CLI::ExistingFile);
  trn->add_option("--resume", ta.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  trn->add_option("--metrics", ta.metrics, "JSON-lines metrics log");
  trn->add_option("--steps", ta.steps);
  trn->add_option("--k", ta.k);
  trn->add_option("--expansion", ta.expansion);
  trn->add_option("--batch-size", ta.batch_size);
  trn->add_option("--warmup", ta.warmup);
  trn->add_option("--seed", ta.seed);
  trn->add_option("--lr", ta.lr);

  CoverageArgs ca;
  auto* cov = app.add_subcommand("coverage", "Feature coverage of SAE A by SAE B");
  add_config(cov);
  cov->add_option("--a", ca.a)->required()->check(CLI::ExistingFile);
  cov->add_option("--b", ca.b)->required()->check(CLI::ExistingFile);
  cov->add_option("--shards", ca.shards)->required();
  cov->add_option("--theta", ca.theta);
  cov->add_option("--threshold", ca.threshold, "Activation threshold for binarizing");
  cov->add_option("--level", ca.level, "frame or audio");
  cov->add_option("--layer", ca.layer);
  cov->add_flag("--duplicates", ca.duplicates, "Also report duplicates within each SAE");
  cov->add_option("--out", ca.out);

  DomainsArgs da;
  auto* dom = app.add_subcommand("domains", "Assign features to audio domains");
  add_config(dom);
  dom->add_option("--checkpoint", da.checkpoint)->required()->check(CLI::ExistingFile);
  dom->add_option("--shards", da.shards)->required();
  dom->add_option("--threshold", da.threshold);
  dom->add_option("--out", da.out);

  ProbeArgs pa;
  auto add_probe_flags = [&](CLI::App* sub) {
    add_config(sub);
    sub->add_option("--checkpoint", pa.checkpoint)->required()->check(CLI::ExistingFile);
    sub->add_option("--train-shards", pa.train_shards)->required();
    sub->add_option("--test-shards", pa.test_shards)->required();
    sub->add_option("--label", pa.label, "Audio label key in the manifest")->required();
    sub->add_option("--ks", pa.ks, "Comma-separated feature counts");
    sub->add_option("--penalty", pa.penalty, "none or l2");
    sub->add_option("--C", pa.C, "Inverse L2 strength");
    sub->add_option("--out", pa.out, "Curve CSV");
    sub->add_option("--ranking-out", pa.ranking_out, "Fisher ranking JSON");
  };
  auto* probe = app.add_subcommand("probe", "Top-k feature probing curve");
  add_probe_flags(probe);
  auto* unl = app.add_subcommand("unlearn", "Accuracy after removing the top-k features");
  add_probe_flags(unl);

  SteerArgs st;
  auto* steer = app.add_subcommand("steer", "Hallucination steering vectors");
  steer->require_subcommand(1);
  auto* sfit = steer->add_subcommand("fit", "Fit a sparse SAE steering vector");
  add_config(sfit);
  sfit->add_option("--checkpoint", st.checkpoint)->required()->check(CLI::ExistingFile);
  sfit->add_option("--shards", st.shards)->required();
  sfit->add_option("--scores", st.scores, "Score CSVs (audio_id,no_speech_prob,is_speech)")->required();
  sfit->add_option("--k", st.k);
  sfit->add_option("--alpha", st.alpha);
  sfit->add_option("--tau", st.tau);
  sfit->add_option("--out", st.out)->required();
  auto* sbase = steer->add_subcommand("baseline", "Mean-difference steering vector on raw activations");
  add_config(sbase);
  sbase->add_option("--shards", st.shards)->required();
  sbase->add_option("--scores", st.scores)->required();
  sbase->add_option("--alpha", st.alpha);
  sbase->add_option("--direction", st.direction, "subtract or add");
  sbase->add_option("--tau", st.tau);
  sbase->add_option("--out", st.out)->required();
  auto* sapply = steer->add_subcommand("apply", "Write steered activation shards");
  add_config(sapply);
  sapply->add_option("--vector", st.vector_path)->required()->check(CLI::ExistingFile);
  sapply->add_option("--checkpoint", st.checkpoint)->check(CLI::ExistingFile);
  sapply->add_option("--shards", st.shards)->required();
  sapply->add_option("--alpha", st.alpha_override, "Overrides the vector's alpha");
  sapply->add_option("--out", st.out, "Output directory")->required();
  auto* sreport = steer->add_subcommand("report", "FPR/TPR before and after steering");
  add_config(sreport);
  sreport->add_option("--before", st.before)->required();
  sreport->add_option("--after", st.after)->required();
  sreport->add_option("--tau", st.tau);
  sreport->add_option("--out", st.out);

  TrfArgs tr;
  auto* trf_cmd = app.add_subcommand("trf", "Temporal response functions from features to EEG");
  add_config(trf_cmd);
  trf_cmd->add_option("--eeg", tr.eeg, "One series file per subject, or directories")->required();
  trf_cmd->add_option("--stimuli", tr.stimuli, "Directory of feature series");
  trf_cmd->add_option("--checkpoint", tr.checkpoint)->check(CLI::ExistingFile);
  trf_cmd->add_option("--shards", tr.shards);
  trf_cmd->add_option("--features", tr.features, "Comma-separated feature indices (default: preselect by rate)");
  trf_cmd->add_option("--dev-seconds", tr.dev_seconds);
  trf_cmd->add_option("--lambda", tr.lambda);
  trf_cmd->add_flag("--lambda-grid", tr.lambda_grid, "Choose lambda on the dev split");
  trf_cmd->add_option("--min-lag", tr.min_lag, "ms");
  trf_cmd->add_option("--max-lag", tr.max_lag, "ms");
  trf_cmd->add_option("--min-rate", tr.min_rate, "Activations per second for preselection");
  trf_cmd->add_option("--alpha", tr.alpha);
  trf_cmd->add_flag("--no-bandpass", tr.no_bandpass);
  trf_cmd->add_option("--out", tr.out, "Output directory");

  InterpretArgs ia;
  auto* interp_cmd = app.add_subcommand("interpret", "Chunk, caption and label features");
  add_config(interp_cmd);
  interp_cmd->add_option("--checkpoint", ia.checkpoint)->required()->check(CLI::ExistingFile);
  interp_cmd->add_option("--shards", ia.shards)->required();
  interp_cmd->add_option("--mel-shards", ia.mel_shards);
  interp_cmd->add_option("--features", ia.features, "Comma-separated feature indices")->required();
  interp_cmd->add_option("--threshold", ia.threshold);
  interp_cmd->add_option("--top-n", ia.top_n, "Audios used for mel windows");
  interp_cmd->add_option("--captioner-url", ia.captioner_url, "Defaults to CAPTIONER_URL");
  interp_cmd->add_option("--aggregator-url", ia.aggregator_url, "Defaults to AGGREGATOR_URL");
  interp_cmd->add_option("--parallelism", ia.parallelism);
  interp_cmd->add_option("--batch-size", ia.batch_size, "Chunks per caption request");
  interp_cmd->add_option("--out", ia.out, "Output directory");

  try {
    std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
    args = expand_config(app, args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitValidation;
  }

  if (g.workers > 0) setenv("AUDIOSAE_WORKERS", std::to_string(g.workers).c_str(), 1);

  try {
    if (*validate) return cmd_validate(va, out);
    if (*synth) return cmd_synth(sa, out);
    if (*trn) return cmd_train(ta, out);
    if (*cov) return cmd_coverage(ca, g, out);
    if (*dom) return cmd_domains(da, g, out);
    if (*probe) return cmd_probe(pa, probing::MaskMode::keep_top, g, out);
    if (*unl) return cmd_probe(pa, probing::MaskMode::remove_top, g, out);
    if (*sfit) return cmd_steer_fit(st, out);
    if (*sbase) return cmd_steer_baseline(st, out);
    if (*sapply) return cmd_steer_apply(st, out);
    if (*sreport) return cmd_steer_report(st, out);
    if (*trf_cmd) return cmd_trf(tr, g, out, err);
    if (*interp_cmd) return cmd_interpret(ia, g, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << app.help();
  return kExitValidation;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"audiosae"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace audiosae::cli
