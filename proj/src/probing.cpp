#include "audiosae/probing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

#include <Eigen/Cholesky>

namespace audiosae::probing {

namespace {

void check_labels(const MatrixD& X, std::span<const int> labels) {
  if (static_cast<std::size_t>(X.rows()) != labels.size()) throw ShapeError("one label per row required");
  if (!X.allFinite()) throw ValidationError("non-finite feature values");
}

std::vector<int> distinct(std::span<const int> labels) {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Fisher score
// ---------------------------------------------------------------------------

FisherResult fisher_scores(const MatrixD& X, std::span<const int> labels) {
  check_labels(X, labels);
  const auto classes = distinct(labels);
  if (classes.size() < 2) throw ValidationError("Fisher score needs at least two classes");
  const Eigen::Index p = X.cols();
  const VectorD mean = X.colwise().mean().transpose();
  VectorD between = VectorD::Zero(p), within = VectorD::Zero(p);
  for (int c : classes) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) rows.push_back(static_cast<Eigen::Index>(i));
    }
    const double n = static_cast<double>(rows.size());
    VectorD mu = VectorD::Zero(p);
    for (auto r : rows) mu += X.row(r).transpose();
    mu /= n;
    VectorD var = VectorD::Zero(p);
    for (auto r : rows) var += (X.row(r).transpose() - mu).cwiseAbs2();
    var /= n;
    between += n * (mu - mean).cwiseAbs2();
    within += n * var;
  }
  FisherResult out;
  out.scores = VectorD::Zero(p);
  out.degenerate.assign(static_cast<std::size_t>(p), false);
  for (Eigen::Index j = 0; j < p; ++j) {
    if (within(j) > 0.0) out.scores(j) = between(j) / within(j);
    else out.degenerate[static_cast<std::size_t>(j)] = true;
  }
  out.ranking.resize(static_cast<std::size_t>(p));
  std::iota(out.ranking.begin(), out.ranking.end(), std::size_t{0});
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](std::size_t a, std::size_t b) {
    return out.scores(static_cast<Eigen::Index>(a)) > out.scores(static_cast<Eigen::Index>(b));
  });
  return out;
}

std::vector<std::size_t> rank_by_magnitude(const VectorD& values) {
  std::vector<std::size_t> order(static_cast<std::size_t>(values.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(values(static_cast<Eigen::Index>(a))) > std::abs(values(static_cast<Eigen::Index>(b)));
  });
  return order;
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

Penalty parse_penalty(const std::string& text) {
  if (text == "none") return Penalty::none;
  if (text == "l2") return Penalty::l2;
  throw ValidationError("penalty must be 'none' or 'l2', got '" + text + "'");
}

VectorD BinaryLogReg::decision(const MatrixD& X) const {
  if (X.cols() != beta.size()) throw ShapeError("classifier expects " + std::to_string(beta.size()) + " features");
  return (X * beta).array() + intercept;
}

VectorD BinaryLogReg::probability(const MatrixD& X) const { return decision(X).unaryExpr(&sigmoid); }

BinaryLogReg fit_binary_logreg(const MatrixD& X, std::span<const int> y, const LogRegOptions& options) {
  check_labels(X, y);
  for (int v : y) {
    if (v != 0 && v != 1) throw ValidationError("binary targets must be 0 or 1");
  }
  if (options.penalty == Penalty::l2 && !(options.C > 0.0)) throw ValidationError("C must be > 0");
  const Eigen::Index n = X.rows(), p = X.cols();
  if (n == 0) throw ValidationError("no training rows");
  MatrixD Z(n, p + 1);
  Z.leftCols(p) = X;
  Z.col(p).setOnes();
  VectorD target(n);
  for (Eigen::Index i = 0; i < n; ++i) target(i) = y[static_cast<std::size_t>(i)];
  const double inv_c = options.penalty == Penalty::l2 ? 1.0 / options.C : 0.0;

  auto objective = [&](const VectorD& theta) {
    const VectorD z = Z * theta;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) ll += target(i) * z(i) - softplus(z(i));
    return ll - 0.5 * inv_c * theta.head(p).squaredNorm();
  };

  VectorD theta = VectorD::Zero(p + 1);
  double current = objective(theta);
  BinaryLogReg out;
  for (std::size_t it = 0; it < options.max_iter; ++it) {
    const VectorD z = Z * theta;
    VectorD resid(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double s = sigmoid(z(i));
      resid(i) = target(i) - s;
      w(i) = s * (1.0 - s);
    }
    VectorD grad = Z.transpose() * resid;
    grad.head(p) -= inv_c * theta.head(p);
    MatrixD H = Z.transpose() * w.asDiagonal() * Z;
    H.diagonal().head(p).array() += inv_c;

    // Singular curvature (collinear or saturated columns) gets a growing ridge.
    Eigen::LLT<MatrixD> llt(H);
    bool jittered = false;
    double jitter = 1e-10 * std::max(1.0, H.diagonal().cwiseAbs().maxCoeff());
    auto usable = [](const Eigen::LLT<MatrixD>& f) {
      if (f.info() != Eigen::Success) return false;
      const VectorD d = f.matrixLLT().diagonal();
      if (!d.allFinite() || d.minCoeff() <= 0) return false;
      const double ratio = d.minCoeff() / d.maxCoeff();
      return ratio * ratio > 1e-13;
    };
    while (!usable(llt)) {
      jittered = true;
      MatrixD Hj = H;
      Hj.diagonal().array() += jitter;
      llt.compute(Hj);
      jitter *= 10.0;
      if (jitter > 1e12) throw RuntimeFailure("logistic regression Hessian could not be regularized");
    }
    const VectorD delta = llt.solve(grad);
    out.iterations = it + 1;

    const bool small_grad = grad.norm() / static_cast<double>(n) < options.tol;
    if (small_grad && !jittered &&
        delta.cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + theta.cwiseAbs().maxCoeff())) {
      out.converged = true;
      break;
    }

    double step = 1.0;
    bool improved = false;
    for (int halving = 0; halving < 60; ++halving, step *= 0.5) {
      const VectorD candidate = theta + step * delta;
      const double value = objective(candidate);
      if (value > current) {
        theta = candidate;
        current = value;
        improved = true;
        break;
      }
    }
    if (!improved) {
      out.converged = small_grad && !jittered;
      break;
    }
  }
  out.beta = theta.head(p);
  out.intercept = theta(p);
  if (!out.beta.allFinite() || !std::isfinite(out.intercept)) throw RuntimeFailure("logistic regression diverged");
  return out;
}

std::vector<int> LogRegModel::predict(const MatrixD& X) const {
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  if (binaries.size() == 1) {
    const VectorD d = binaries[0].decision(X);
    for (Eigen::Index i = 0; i < d.size(); ++i) out[static_cast<std::size_t>(i)] = d(i) > 0 ? classes[1] : classes[0];
    return out;
  }
  MatrixD scores(X.rows(), static_cast<Eigen::Index>(binaries.size()));
  for (std::size_t c = 0; c < binaries.size(); ++c) scores.col(static_cast<Eigen::Index>(c)) = binaries[c].decision(X);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(best)];
  }
  return out;
}

bool LogRegModel::converged() const {
  return std::all_of(binaries.begin(), binaries.end(), [](const auto& b) { return b.converged; });
}

LogRegModel fit_logreg(const MatrixD& X, std::span<const int> labels, const LogRegOptions& options) {
  check_labels(X, labels);
  LogRegModel m;
  m.classes = distinct(labels);
  m.options = options;
  if (m.classes.size() < 2) throw ValidationError("classifier needs at least two classes");
  auto binary_target = [&](int positive) {
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == positive ? 1 : 0;
    return y;
  };
  if (m.classes.size() == 2) {
    m.binaries.push_back(fit_binary_logreg(X, binary_target(m.classes[1]), options));
  } else {
    for (int c : m.classes) m.binaries.push_back(fit_binary_logreg(X, binary_target(c), options));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double mcc(const Confusion& c) {
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0) throw ValidationError("confusion counts must be >= 0");
  const double den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn);
  if (den == 0.0) return 0.0;
  return (c.tp * c.tn - c.fp * c.fn) / std::sqrt(den);
}

Confusion confusion(std::span<const int> predicted, std::span<const int> truth, int positive) {
  if (predicted.size() != truth.size()) throw ShapeError("prediction and truth lengths differ");
  Confusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = predicted[i] == positive, t = truth[i] == positive;
    if (p && t) c.tp += 1;
    else if (p) c.fp += 1;
    else if (t) c.fn += 1;
    else c.tn += 1;
  }
  return c;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("prediction and truth lengths differ");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

MatrixF max_pool(const MatrixF& rows, std::span<const FrameRange> items) {
  MatrixF out(static_cast<Eigen::Index>(items.size()), rows.cols());
  for (std::size_t a = 0; a < items.size(); ++a) {
    const auto& r = items[a];
    if (r.end > static_cast<std::size_t>(rows.rows()) || r.start >= r.end) throw ShapeError("bad pooling range");
    out.row(static_cast<Eigen::Index>(a)) =
        rows.middleRows(static_cast<Eigen::Index>(r.start), static_cast<Eigen::Index>(r.size())).colwise().maxCoeff();
  }
  return out;
}

MatrixF mask_codes(const MatrixF& codes, std::span<const std::size_t> ranking, std::size_t k, MaskMode mode) {
  if (k > ranking.size()) throw ValidationError("k exceeds the ranking length");
  std::vector<bool> top(static_cast<std::size_t>(codes.cols()), false);
  for (std::size_t i = 0; i < k; ++i) {
    if (ranking[i] >= top.size()) throw ValidationError("ranking index out of range");
    top[ranking[i]] = true;
  }
  MatrixF masked = codes;
  for (std::size_t j = 0; j < top.size(); ++j) {
    const bool keep = mode == MaskMode::keep_top ? top[j] : !top[j];
    if (!keep) masked.col(static_cast<Eigen::Index>(j)).setZero();
  }
  return masked;
}

namespace {

MatrixD reconstruct_items(const sae::SaeModel& model, const ProbeSplit& split, std::span<const std::size_t> ranking,
                          std::size_t k, MaskMode mode) {
  if (static_cast<std::size_t>(split.codes.cols()) != model.latent_dim()) throw ShapeError("codes width != D");
  MatrixF recon = sae::decode(model, mask_codes(split.codes, ranking, k, mode));
  if (!split.items.empty()) recon = max_pool(recon, split.items);
  if (static_cast<std::size_t>(recon.rows()) != split.labels.size()) throw ShapeError("one label per item required");
  return recon.cast<double>();
}

}  // namespace

ProbePoint probe_point(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                       std::span<const std::size_t> ranking, std::size_t k, MaskMode mode,
                       const LogRegOptions& options) {
  if (k > model.latent_dim()) throw ValidationError("k exceeds the latent size");
  if (ranking.size() != model.latent_dim()) throw ValidationError("ranking must cover all features");
  const MatrixD Xtr = reconstruct_items(model, train, ranking, k, mode);
  const MatrixD Xte = reconstruct_items(model, test, ranking, k, mode);
  const auto clf = fit_logreg(Xtr, train.labels, options);
  const auto pred = clf.predict(Xte);
  ProbePoint out;
  out.k = k;
  out.converged = clf.converged();
  out.accuracy = accuracy(pred, test.labels);
  for (int c : clf.classes) out.mcc[c] = mcc(confusion(pred, test.labels, c));
  return out;
}

ProbePoint topk_probe(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                      std::span<const std::size_t> ranking, std::size_t k, const LogRegOptions& options) {
  return probe_point(model, train, test, ranking, k, MaskMode::keep_top, options);
}

ProbePoint unlearn(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                   std::span<const std::size_t> ranking, std::size_t k, const LogRegOptions& options) {
  return probe_point(model, train, test, ranking, k, MaskMode::remove_top, options);
}

std::vector<ProbePoint> probe_curve(const sae::SaeModel& model, const ProbeSplit& train, const ProbeSplit& test,
                                    std::span<const std::size_t> ranking, std::span<const std::size_t> ks,
                                    MaskMode mode, const LogRegOptions& options) {
  std::vector<ProbePoint> out(ks.size());
  parallel_for(ks.size(), default_workers(), [&](std::size_t i) {
    out[i] = probe_point(model, train, test, ranking, ks[i], mode, options);
  });
  return out;
}

void write_curve_csv(std::ostream& out, std::span<const ProbePoint> curve, const std::map<int, std::string>& names) {
  out << "k,accuracy";
  for (const auto& [c, name] : names) out << ",mcc_" << name;
  out << '\n';
  out.precision(10);
  for (const auto& p : curve) {
    out << p.k << ',' << p.accuracy;
    for (const auto& [c, name] : names) {
      const auto it = p.mcc.find(c);
      out << ',' << (it == p.mcc.end() ? 0.0 : it->second);
    }
    out << '\n';
  }
}

Split stratified_split(std::span<const std::string> strata, std::size_t train_parts, std::size_t test_parts,
                       std::uint64_t seed) {
  if (train_parts + test_parts == 0) throw ValidationError("split ratio must be positive");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < strata.size(); ++i) groups[strata[i]].push_back(i);
  store::Rng rng(seed);
  Split out;
  const double frac = static_cast<double>(train_parts) / static_cast<double>(train_parts + test_parts);
  for (auto& [key, idx] : groups) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(frac * static_cast<double>(idx.size())));
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---------------------------------------------------------------------------
// Label search
// ---------------------------------------------------------------------------

std::vector<double> threshold_grid(double min, double max) {
  std::vector<double> out;
  for (std::size_t i = 0;; ++i) {
    const double t = min + kThresholdStep * static_cast<double>(i);
    if (t > max) break;
    out.push_back(t);
  }
  return out;
}

LabelHit best_threshold(std::span<const float> values, const std::vector<bool>& label, std::size_t feature) {
  if (values.size() != label.size()) throw ShapeError("label mask length differs from frame count");
  LabelHit best{feature, 0.0, 0.0};
  if (values.empty()) return best;
  std::vector<std::pair<float, bool>> sorted(values.size());
  std::size_t positives = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sorted[i] = {values[i], label[i]};
    positives += label[i];
  }
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // positives_below[i]: positives among the i smallest values
  std::vector<std::size_t> positives_below(sorted.size() + 1, 0);
  for (std::size_t i = 0; i < sorted.size(); ++i) positives_below[i + 1] = positives_below[i] + sorted[i].second;

  const auto grid = threshold_grid(sorted.front().first, sorted.back().first);
  best.threshold = grid.front();
  for (double t : grid) {
    const auto first_above = static_cast<std::size_t>(
        std::upper_bound(sorted.begin(), sorted.end(), t,
                         [](double thr, const auto& e) { return thr < static_cast<double>(e.first); }) -
        sorted.begin());
    const std::size_t predicted = sorted.size() - first_above;
    const std::size_t tp = positives - positives_below[first_above];
    const std::size_t fp = predicted - tp, fn = positives - tp;
    const double f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    if (f1 > best.f1) {
      best.f1 = f1;
      best.threshold = t;
    }
  }
  return best;
}

std::vector<LabelHit> label_feature_search(const MatrixF& frames, const std::vector<bool>& label, double min_f1,
                                           std::span<const std::size_t> candidates) {
  if (label.size() != static_cast<std::size_t>(frames.rows())) throw ShapeError("label mask length differs");
  if (std::none_of(label.begin(), label.end(), [](bool b) { return b; })) {
    throw ValidationError("label mask selects no frames");
  }
  std::vector<std::size_t> features(candidates.begin(), candidates.end());
  if (features.empty()) {
    features.resize(static_cast<std::size_t>(frames.cols()));
    std::iota(features.begin(), features.end(), std::size_t{0});
  }
  std::vector<LabelHit> hits(features.size());
  parallel_for(features.size(), default_workers(), [&](std::size_t i) {
    const auto j = static_cast<Eigen::Index>(features[i]);
    if (j >= frames.cols()) throw ValidationError("candidate feature out of range");
    std::vector<float> col(static_cast<std::size_t>(frames.rows()));
    for (Eigen::Index r = 0; r < frames.rows(); ++r) col[static_cast<std::size_t>(r)] = frames(r, j);
    hits[i] = best_threshold(col, label, features[i]);
  });
  std::vector<LabelHit> out;
  for (const auto& h : hits) {
    if (h.f1 > min_f1) out.push_back(h);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.feature < b.feature; });
  return out;
}

// ---------------------------------------------------------------------------
// Phonemes
// ---------------------------------------------------------------------------

std::vector<int> frame_phonemes(std::span<const PhonemeInterval> intervals, std::size_t frame_count,
                                double frame_rate, const std::vector<std::string>& inventory) {
  if (!(frame_rate > 0.0)) throw ValidationError("frame rate must be > 0");
  const double duration = static_cast<double>(frame_count) / frame_rate;
  std::vector<int> ids;
  for (const auto& iv : intervals) {
    if (!(iv.start_s >= 0.0) || !(iv.end_s > iv.start_s)) throw ValidationError("bad alignment interval");
    if (iv.end_s > duration + 1.0 / frame_rate) {
      throw ValidationError("alignment extends past the audio (" + std::to_string(iv.end_s) + " s > " +
                            std::to_string(duration) + " s)");
    }
    const auto it = std::find(inventory.begin(), inventory.end(), iv.phoneme);
    if (it == inventory.end()) throw ValidationError("phoneme '" + iv.phoneme + "' not in the inventory");
    ids.push_back(static_cast<int>(it - inventory.begin()));
  }
  std::vector<int> out(frame_count, -1);
  for (std::size_t t = 0; t < frame_count; ++t) {
    const double center = (static_cast<double>(t) + 0.5) / frame_rate;
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      if (center >= intervals[i].start_s && center < intervals[i].end_s) {
        out[t] = ids[i];
        break;
      }
    }
  }
  return out;
}

std::vector<PhonemeInterval> parse_alignment(const nlohmann::json& j) {
  if (!j.is_array()) throw ValidationError("alignment must be a JSON array");
  std::vector<PhonemeInterval> out;
  try {
    for (const auto& e : j) {
      out.push_back({e.at("start_s").get<double>(), e.at("end_s").get<double>(), e.at("phoneme").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("bad alignment entry: ") + ex.what());
  }
  return out;
}

std::map<std::size_t, int> phoneme_labels(const MatrixF& frames, std::span<const int> phonemes, double threshold) {
  if (static_cast<std::size_t>(frames.rows()) != phonemes.size()) throw ShapeError("alignment/frame count mismatch");
  std::map<std::size_t, int> out;
  for (Eigen::Index j = 0; j < frames.cols(); ++j) {
    std::map<int, std::size_t> counts;
    std::size_t total = 0;
    for (Eigen::Index t = 0; t < frames.rows(); ++t) {
      const int ph = phonemes[static_cast<std::size_t>(t)];
      if (ph < 0 || !(frames(t, j) > threshold)) continue;
      ++counts[ph];
      ++total;
    }
    for (const auto& [ph, n] : counts) {
      if (2 * n > total) {
        out[static_cast<std::size_t>(j)] = ph;
        break;
      }
    }
  }
  return out;
}

double phoneme_frame_accuracy(const MatrixF& frames, const std::map<std::size_t, int>& labels,
                              std::span<const int> phonemes, double threshold) {
  if (static_cast<std::size_t>(frames.rows()) != phonemes.size()) throw ShapeError("alignment/frame count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t aligned = 0, hit = 0;
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    const int ph = phonemes[static_cast<std::size_t>(t)];
    if (ph < 0) continue;
    ++aligned;
    for (const auto& [feature, label] : labels) {
      if (label == ph && frames(t, static_cast<Eigen::Index>(feature)) > threshold) {
        ++hit;
        break;
      }
    }
  }
  return aligned == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(aligned);
}

}  // namespace audiosae::probing
