#include "audiosae/trf.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

namespace audiosae::trf {

namespace {

using Complex = std::complex<double>;

void require_finite(std::span<const double> x, const std::string& what) {
  for (double v : x) {
    if (!std::isfinite(v)) throw ValidationError(what + ": non-finite sample");
  }
}

// Analog Butterworth prototype poles in the left half plane, one per
// conjugate pair.
std::vector<Complex> prototype_poles(int order) {
  if (order <= 0 || order % 2 != 0) throw ValidationError("butterworth: order must be a positive even number");
  std::vector<Complex> poles;
  for (int k = 0; k < order / 2; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order);
    poles.push_back(std::polar(1.0, theta));
  }
  return poles;
}

void check_cutoff(double cutoff_hz, double rate) {
  if (!(rate > 0.0) || !(cutoff_hz > 0.0) || !(cutoff_hz < rate / 2.0)) {
    throw ValidationError("butterworth: cutoff must lie strictly between 0 and Nyquist");
  }
}

Biquad section_from_pole(Complex analog_pole, double rate, bool highpass) {
  const double k = 2.0 * rate;
  const Complex z = (k + analog_pole) / (k - analog_pole);
  Biquad q{};
  q.a1 = -2.0 * z.real();
  q.a2 = std::norm(z);
  if (highpass) {
    const double g = (1.0 - q.a1 + q.a2) / 4.0;
    q.b0 = g;
    q.b1 = -2.0 * g;
    q.b2 = g;
  } else {
    const double g = (1.0 + q.a1 + q.a2) / 4.0;
    q.b0 = g;
    q.b1 = 2.0 * g;
    q.b2 = g;
  }
  return q;
}

// Transposed direct form II, states carried across calls.
void run_sections(std::span<const Biquad> sections, std::vector<double>& x, std::vector<std::array<double, 2>> state) {
  for (std::size_t s = 0; s < sections.size(); ++s) {
    const auto& q = sections[s];
    double z1 = state[s][0], z2 = state[s][1];
    for (double& v : x) {
      const double y = q.b0 * v + z1;
      z1 = q.b1 * v - q.a1 * y + z2;
      z2 = q.b2 * v - q.a2 * y;
      v = y;
    }
  }
}

// Steady-state section states for a unit step at the cascade input.
std::vector<std::array<double, 2>> step_states(std::span<const Biquad> sections) {
  std::vector<std::array<double, 2>> zi(sections.size());
  double level = 1.0;
  for (std::size_t s = 0; s < sections.size(); ++s) {
    const auto& q = sections[s];
    const double gain = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
    const double z2 = q.b2 - q.a2 * gain;
    const double z1 = q.b1 - q.a1 * gain + z2;
    zi[s] = {z1 * level, z2 * level};
    level *= gain;
  }
  return zi;
}

std::vector<std::array<double, 2>> scaled(std::vector<std::array<double, 2>> zi, double by) {
  for (auto& z : zi) {
    z[0] *= by;
    z[1] *= by;
  }
  return zi;
}

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

}  // namespace

void TimeSeries::validate() const {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw ValidationError("time series '" + id + "': rate must be positive");
  require_finite(samples, "time series '" + id + "'");
}

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double rate) {
  check_cutoff(cutoff_hz, rate);
  const double warped = 2.0 * rate * std::tan(std::numbers::pi * cutoff_hz / rate);
  std::vector<Biquad> out;
  for (const auto& p : prototype_poles(order)) out.push_back(section_from_pole(warped * p, rate, false));
  return out;
}

std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double rate) {
  check_cutoff(cutoff_hz, rate);
  const double warped = 2.0 * rate * std::tan(std::numbers::pi * cutoff_hz / rate);
  std::vector<Biquad> out;
  for (const auto& p : prototype_poles(order)) out.push_back(section_from_pole(warped / p, rate, true));
  return out;
}

double magnitude_response(std::span<const Biquad> sections, double freq_hz, double rate) {
  const Complex zinv = std::polar(1.0, -2.0 * std::numbers::pi * freq_hz / rate);
  Complex h = 1.0;
  for (const auto& q : sections) {
    h *= (q.b0 + q.b1 * zinv + q.b2 * zinv * zinv) / (1.0 + q.a1 * zinv + q.a2 * zinv * zinv);
  }
  return std::abs(h);
}

std::vector<double> filtfilt(std::span<const Biquad> sections, std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  const std::size_t want = 3 * (2 * sections.size() + 1);
  const std::size_t pad = std::min(want, n - 1);

  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  const auto zi = step_states(sections);
  run_sections(sections, ext, scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  run_sections(sections, ext, scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

TimeSeries bandpass(const TimeSeries& series, double low_hz, double high_hz) {
  series.validate();
  if (!(low_hz > 0.0) || !(high_hz > low_hz) || !(high_hz < series.rate / 2.0)) {
    throw ValidationError("bandpass: need 0 < low < high < Nyquist");
  }
  auto sections = butterworth_highpass(kFilterOrder, low_hz, series.rate);
  const auto lp = butterworth_lowpass(kFilterOrder, high_hz, series.rate);
  sections.insert(sections.end(), lp.begin(), lp.end());
  TimeSeries out = series;
  out.samples = filtfilt(sections, series.samples);
  return out;
}

TimeSeries resample(const TimeSeries& series, double target_rate) {
  series.validate();
  if (!(target_rate > 0.0)) throw ValidationError("resample: target rate must be positive");
  TimeSeries out;
  out.id = series.id;
  out.rate = target_rate;
  if (target_rate == series.rate) {
    out.samples = series.samples;
    return out;
  }
  const auto& x = series.samples;
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(x.size()) * target_rate / series.rate));
  out.samples.resize(n_out);

  // Anti-aliasing cutoff in cycles per input sample, a little under the
  // lower Nyquist, with a Hann-windowed sinc spanning 16 zero crossings.
  const double ratio = std::min(1.0, target_rate / series.rate);
  const double fc = 0.45 * ratio;
  const double half_width = 16.0 / (2.0 * fc);
  const double step = series.rate / target_rate;
  for (std::size_t k = 0; k < n_out; ++k) {
    const double centre = static_cast<double>(k) * step;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(centre - half_width)));
    const auto hi = std::min<std::ptrdiff_t>(n - 1, static_cast<std::ptrdiff_t>(std::floor(centre + half_width)));
    double acc = 0.0, wsum = 0.0;
    for (std::ptrdiff_t j = lo; j <= hi; ++j) {
      const double d = static_cast<double>(j) - centre;
      const double w = sinc(2.0 * fc * d) * 0.5 * (1.0 + std::cos(std::numbers::pi * d / half_width));
      acc += w * x[static_cast<std::size_t>(j)];
      wsum += w;
    }
    out.samples[k] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of an empty series");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

TimeSeries normalize_response(const TimeSeries& series) {
  series.validate();
  const double med = quantile(series.samples, 0.5);
  const double iqr = quantile(series.samples, 0.75) - quantile(series.samples, 0.25);
  if (!(iqr > 0.0)) throw ValidationError("normalize_response: zero interquartile range");
  TimeSeries out = series;
  for (double& v : out.samples) v = (v - med) / iqr;
  return out;
}

TimeSeries normalize_stimulus(const TimeSeries& series) {
  series.validate();
  if (series.samples.empty()) throw ValidationError("normalize_stimulus: empty series");
  const double mx = *std::max_element(series.samples.begin(), series.samples.end());
  if (!(mx > 0.0)) throw ValidationError("normalize_stimulus: maximum must be positive");
  TimeSeries out = series;
  for (double& v : out.samples) v /= mx;
  return out;
}

std::pair<TimeSeries, TimeSeries> split_dev_test(const TimeSeries& series, double dev_seconds) {
  series.validate();
  const auto cut = static_cast<std::size_t>(std::llround(dev_seconds * series.rate));
  if (cut == 0 || cut >= series.samples.size()) {
    throw ValidationError("split_dev_test: development split must be shorter than the series");
  }
  TimeSeries dev{{series.samples.begin(), series.samples.begin() + static_cast<std::ptrdiff_t>(cut)}, series.rate,
                 series.id};
  TimeSeries test{{series.samples.begin() + static_cast<std::ptrdiff_t>(cut), series.samples.end()}, series.rate,
                  series.id};
  return {std::move(dev), std::move(test)};
}

// ---------------------------------------------------------------------------

std::vector<int> lag_grid(double min_ms, double max_ms, double rate) {
  if (!(rate > 0.0) || !(max_ms >= min_ms)) throw ValidationError("lag grid: need min <= max and rate > 0");
  const int lo = static_cast<int>(std::ceil(min_ms * rate / 1000.0 - 1e-9));
  const int hi = static_cast<int>(std::floor(max_ms * rate / 1000.0 + 1e-9));
  if (hi < lo) throw ValidationError("lag grid: range contains no sample lag");
  std::vector<int> lags(static_cast<std::size_t>(hi - lo + 1));
  std::iota(lags.begin(), lags.end(), lo);
  return lags;
}

MatrixD lagged_design(std::span<const double> stimulus, std::span<const int> lags) {
  const auto n = static_cast<std::ptrdiff_t>(stimulus.size());
  MatrixD X = MatrixD::Zero(n, static_cast<Eigen::Index>(lags.size()));
  for (std::size_t l = 0; l < lags.size(); ++l) {
    for (std::ptrdiff_t t = 0; t < n; ++t) {
      const std::ptrdiff_t u = t - lags[l];
      if (u >= 0 && u < n) X(t, static_cast<Eigen::Index>(l)) = stimulus[static_cast<std::size_t>(u)];
    }
  }
  return X;
}

std::vector<double> predict(std::span<const double> stimulus, std::span<const int> lags, const VectorD& weights,
                            double intercept) {
  if (static_cast<std::size_t>(weights.size()) != lags.size()) throw ShapeError("predict: weights/lags mismatch");
  const auto n = static_cast<std::ptrdiff_t>(stimulus.size());
  std::vector<double> out(stimulus.size(), intercept);
  for (std::size_t l = 0; l < lags.size(); ++l) {
    const double w = weights(static_cast<Eigen::Index>(l));
    const std::ptrdiff_t lag = lags[l];
    for (std::ptrdiff_t t = std::max<std::ptrdiff_t>(0, lag); t < std::min(n, n + lag); ++t) {
      out[static_cast<std::size_t>(t)] += w * stimulus[static_cast<std::size_t>(t - lag)];
    }
  }
  return out;
}

TrfDesign::TrfDesign(std::span<const double> stimulus, std::vector<int> lags, double lambda, bool standardize)
    : stimulus_(stimulus.begin(), stimulus.end()), lags_(std::move(lags)), lambda_(lambda), standardize_(standardize) {
  require_finite(stimulus_, "stimulus");
  if (lags_.empty()) throw ValidationError("TRF: empty lag grid");
  if (!(lambda_ >= 0.0)) throw ValidationError("TRF: ridge parameter must be nonnegative");
  const auto n = static_cast<std::ptrdiff_t>(stimulus_.size());
  for (int lag : lags_) {
    if (std::abs(static_cast<std::ptrdiff_t>(lag)) >= n) throw ValidationError("TRF: lag range exceeds signal length");
  }
  const auto L = static_cast<Eigen::Index>(lags_.size());
  const auto& s = stimulus_;

  // Column products are autocorrelations of s restricted to the rows where
  // both lagged copies are inside the signal. Compute each full-overlap
  // autocorrelation once and subtract the short edge pieces.
  const int lag_lo = *std::min_element(lags_.begin(), lags_.end());
  const int lag_hi = *std::max_element(lags_.begin(), lags_.end());
  const auto max_delta = static_cast<std::size_t>(lag_hi - lag_lo);
  std::vector<double> full(max_delta + 1, 0.0);
  for (std::size_t d = 0; d <= max_delta; ++d) {
    double acc = 0.0;
    for (std::ptrdiff_t u = 0; u + static_cast<std::ptrdiff_t>(d) < n; ++u) {
      acc += s[static_cast<std::size_t>(u)] * s[static_cast<std::size_t>(u) + d];
    }
    full[d] = acc;
  }
  gram_.resize(L, L);
  for (Eigen::Index i = 0; i < L; ++i) {
    for (Eigen::Index j = i; j < L; ++j) {
      const std::ptrdiff_t a = std::max(lags_[static_cast<std::size_t>(i)], lags_[static_cast<std::size_t>(j)]);
      const std::ptrdiff_t b = std::min(lags_[static_cast<std::size_t>(i)], lags_[static_cast<std::size_t>(j)]);
      const std::ptrdiff_t d = a - b;
      if (d >= n) {
        gram_(i, j) = gram_(j, i) = 0.0;
        continue;
      }
      const std::ptrdiff_t lo = std::min(std::max<std::ptrdiff_t>(0, -a), n - d);
      const std::ptrdiff_t hi = std::max(n - a + std::min<std::ptrdiff_t>(0, b), lo);
      double acc = full[static_cast<std::size_t>(d)];
      for (std::ptrdiff_t u = 0; u < lo; ++u) acc -= s[static_cast<std::size_t>(u)] * s[static_cast<std::size_t>(u + d)];
      for (std::ptrdiff_t u = hi; u < n - d; ++u) {
        acc -= s[static_cast<std::size_t>(u)] * s[static_cast<std::size_t>(u + d)];
      }
      gram_(i, j) = gram_(j, i) = acc;
    }
  }

  std::vector<double> prefix(stimulus_.size() + 1, 0.0);
  for (std::size_t t = 0; t < stimulus_.size(); ++t) prefix[t + 1] = prefix[t] + s[t];
  col_sum_.resize(L);
  for (Eigen::Index l = 0; l < L; ++l) {
    const std::ptrdiff_t lag = lags_[static_cast<std::size_t>(l)];
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -lag);
    const std::ptrdiff_t hi = std::min(n, n - lag);
    col_sum_(l) = prefix[static_cast<std::size_t>(hi)] - prefix[static_cast<std::size_t>(lo)];
  }

  MatrixD A;
  const double rows = static_cast<double>(n);
  if (standardize_) {
    mean_ = col_sum_ / rows;
    scale_.resize(L);
    for (Eigen::Index l = 0; l < L; ++l) {
      const double var = gram_(l, l) / rows - mean_(l) * mean_(l);
      const double sd = var > 0.0 ? std::sqrt(var) : 0.0;
      // A constant column carries nothing once centred; leave it unscaled so
      // the system stays well posed under a positive ridge.
      scale_(l) = sd > 1e-12 * (1.0 + std::abs(mean_(l))) ? sd : 1.0;
    }
    A = (gram_ - rows * mean_ * mean_.transpose()).array() / (scale_ * scale_.transpose()).array();
  } else {
    mean_ = VectorD::Zero(L);
    scale_ = VectorD::Ones(L);
    A = gram_;
  }
  A.diagonal().array() += lambda_;
  factor_.compute(A);
  const VectorD diag = factor_.vectorD().cwiseAbs();
  const double top = std::max(diag.maxCoeff(), 1e-300);
  if (factor_.info() != Eigen::Success || !(diag.minCoeff() > 1e-12 * top)) {
    throw RuntimeFailure("TRF: singular system (constant stimulus or zero ridge)");
  }
}

MatrixD TrfDesign::cross(const MatrixD& R) const {
  const auto n = static_cast<std::ptrdiff_t>(stimulus_.size());
  if (R.rows() != n) throw ShapeError("TRF: response length differs from stimulus length");
  MatrixD out = MatrixD::Zero(static_cast<Eigen::Index>(lags_.size()), R.cols());
  for (std::size_t l = 0; l < lags_.size(); ++l) {
    const std::ptrdiff_t lag = lags_[l];
    auto row = out.row(static_cast<Eigen::Index>(l));
    for (std::ptrdiff_t t = std::max<std::ptrdiff_t>(0, lag); t < std::min(n, n + lag); ++t) {
      row.noalias() += stimulus_[static_cast<std::size_t>(t - lag)] * R.row(t);
    }
  }
  return out;
}

TrfDesign::Solution TrfDesign::solve(const MatrixD& R) const {
  require_finite({R.data(), static_cast<std::size_t>(R.size())}, "response");
  MatrixD b = cross(R);
  const double rows = static_cast<double>(stimulus_.size());
  VectorD r_mean = VectorD::Zero(R.cols());
  if (standardize_) {
    r_mean = R.colwise().mean().transpose();
    b -= rows * mean_ * r_mean.transpose();
    b.array().colwise() /= scale_.array();
  }
  MatrixD v = factor_.solve(b);
  v.array().colwise() /= scale_.array();
  Solution out;
  out.intercept = standardize_ ? VectorD(r_mean - v.transpose() * mean_) : VectorD::Zero(R.cols());
  out.weights = std::move(v);
  return out;
}

TrfModel fit_trf(const TimeSeries& stimulus, const TimeSeries& response, const TrfOptions& options) {
  stimulus.validate();
  response.validate();
  if (stimulus.rate != response.rate) throw ValidationError("fit_trf: stimulus and response rates differ");
  if (stimulus.samples.size() != response.samples.size()) {
    throw ValidationError("fit_trf: stimulus and response lengths differ");
  }
  auto lags = lag_grid(options.min_lag_ms, options.max_lag_ms, stimulus.rate);
  const TrfDesign design(stimulus.samples, lags, options.lambda, options.standardize);
  const Eigen::Map<const MatrixD> R(response.samples.data(), static_cast<Eigen::Index>(response.samples.size()), 1);
  const auto sol = design.solve(R);
  TrfModel m;
  m.lags = std::move(lags);
  m.rate = stimulus.rate;
  m.weights = sol.weights.col(0);
  m.intercept = sol.intercept(0);
  m.lambda = options.lambda;
  m.subject = response.id;
  m.feature = stimulus.id;
  return m;
}

double select_lambda(std::span<const double> fit_stimulus, const MatrixD& fit_responses,
                     std::span<const double> held_stimulus, const MatrixD& held_responses, std::span<const int> lags,
                     std::span<const double> grid, bool standardize) {
  if (grid.empty()) throw ValidationError("select_lambda: empty grid");
  if (fit_responses.cols() != held_responses.cols()) throw ShapeError("select_lambda: subject count mismatch");
  std::vector<int> lag_vec(lags.begin(), lags.end());
  double best = grid[0];
  double best_err = std::numeric_limits<double>::infinity();
  for (double lambda : grid) {
    double err = 0.0;
    try {
      const TrfDesign design(fit_stimulus, lag_vec, lambda, standardize);
      const auto sol = design.solve(fit_responses);
      for (Eigen::Index c = 0; c < held_responses.cols(); ++c) {
        const auto pred = predict(held_stimulus, lags, sol.weights.col(c), sol.intercept(c));
        for (std::size_t t = 0; t < pred.size(); ++t) {
          const double e = held_responses(static_cast<Eigen::Index>(t), c) - pred[t];
          err += e * e;
        }
      }
    } catch (const RuntimeFailure&) {
      continue;
    }
    if (err < best_err) {
      best_err = err;
      best = lambda;
    }
  }
  return best;
}

ExtremaLags extrema_lags(const VectorD& w) {
  if (w.size() == 0) throw ValidationError("extrema_lags: empty TRF");
  ExtremaLags e;
  for (Eigen::Index i = 1; i < w.size(); ++i) {
    if (w(i) < w(static_cast<Eigen::Index>(e.min_index))) e.min_index = static_cast<std::size_t>(i);
    if (w(i) > w(static_cast<Eigen::Index>(e.max_index))) e.max_index = static_cast<std::size_t>(i);
  }
  return e;
}

ExtremaLags extrema_lags(std::span<const TrfModel> dev_trfs) {
  if (dev_trfs.empty()) throw ValidationError("extrema_lags: no TRFs");
  VectorD mean = VectorD::Zero(dev_trfs[0].weights.size());
  for (const auto& m : dev_trfs) {
    if (m.weights.size() != mean.size() || m.lags != dev_trfs[0].lags) throw ShapeError("extrema_lags: lag grids differ");
    mean += m.weights;
  }
  return extrema_lags(VectorD(mean / static_cast<double>(dev_trfs.size())));
}

// ---------------------------------------------------------------------------

double one_sided_t_pvalue(std::span<const double> values, Tail tail) {
  const auto n = values.size();
  if (n < 2) throw ValidationError("t-test needs at least 2 subjects");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  const double signed_mean = tail == Tail::greater ? mean : -mean;
  if (!(sd > 0.0)) return signed_mean > 0.0 ? 0.0 : 1.0;
  const double t = signed_mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  return boost::math::cdf(boost::math::complement(dist, t));
}

HolmResult holm(std::span<const double> pvalues, double alpha) {
  const std::size_t m = pvalues.size();
  for (double p : pvalues) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("holm: p-values must lie in [0, 1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
  HolmResult r{std::vector<bool>(m, false), std::vector<double>(m, 1.0)};
  bool stopped = false;
  double running = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double p = pvalues[order[i]];
    const auto remaining = static_cast<double>(m - i);
    running = std::max(running, std::min(1.0, remaining * p));
    r.adjusted[order[i]] = running;
    if (!stopped && p <= alpha / remaining) {
      r.reject[order[i]] = true;
    } else {
      stopped = true;
    }
  }
  return r;
}

nlohmann::json to_json(const TestOutcome& o) {
  return {{"feature", o.feature},       {"tau_min_ms", o.tau_min_ms},           {"tau_max_ms", o.tau_max_ms},
          {"p_min", o.p_min},           {"p_max", o.p_max},                     {"significant_min", o.significant_min},
          {"significant_max", o.significant_max}, {"significant", o.significant()}};
}

FeatureTrfs fit_feature(const std::string& feature, std::span<const double> dev_stimulus,
                        std::span<const double> test_stimulus, const MatrixD& dev_responses,
                        const MatrixD& test_responses, const TrfOptions& options) {
  FeatureTrfs out;
  out.feature = feature;
  out.lags = lag_grid(options.min_lag_ms, options.max_lag_ms, kTrfRate);
  out.dev = TrfDesign(dev_stimulus, out.lags, options.lambda, options.standardize).solve(dev_responses).weights;
  out.test = TrfDesign(test_stimulus, out.lags, options.lambda, options.standardize).solve(test_responses).weights;
  return out;
}

TestOutcome test_feature(const FeatureTrfs& trfs) {
  if (trfs.dev.cols() != trfs.test.cols()) throw ShapeError("test_feature: subject counts differ between splits");
  if (trfs.test.cols() < 2) throw ValidationError("test_feature: at least 2 subjects required");
  const auto ext = extrema_lags(VectorD(trfs.dev.rowwise().mean()));
  TestOutcome o;
  o.feature = trfs.feature;
  o.tau_min_ms = 1000.0 * trfs.lags[ext.min_index] / trfs.rate;
  o.tau_max_ms = 1000.0 * trfs.lags[ext.max_index] / trfs.rate;
  const VectorD at_max = trfs.test.row(static_cast<Eigen::Index>(ext.max_index)).transpose();
  const VectorD at_min = trfs.test.row(static_cast<Eigen::Index>(ext.min_index)).transpose();
  o.p_max = one_sided_t_pvalue({at_max.data(), static_cast<std::size_t>(at_max.size())}, Tail::greater);
  o.p_min = one_sided_t_pvalue({at_min.data(), static_cast<std::size_t>(at_min.size())}, Tail::less);
  return o;
}

void apply_holm(std::vector<TestOutcome>& outcomes, double alpha) {
  std::vector<double> p;
  p.reserve(2 * outcomes.size());
  for (const auto& o : outcomes) {
    p.push_back(o.p_max);
    p.push_back(o.p_min);
  }
  const auto h = holm(p, alpha);
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    outcomes[i].significant_max = h.reject[2 * i];
    outcomes[i].significant_min = h.reject[2 * i + 1];
  }
}

StudyResult run_study(const StudyInput& in, const TrfOptions& options, double alpha) {
  const std::size_t f = in.features.size();
  if (in.dev_stimuli.size() != f || in.test_stimuli.size() != f) throw ShapeError("run_study: stimuli per feature");
  if (in.dev_responses.cols() != in.test_responses.cols()) throw ShapeError("run_study: subject count mismatch");
  if (in.dev_responses.cols() < 2) throw ValidationError("run_study: at least 2 subjects required");
  StudyResult r;
  r.trfs.resize(f);
  r.outcomes.resize(f);
  parallel_for(f, default_workers(), [&](std::size_t i) {
    r.trfs[i] = fit_feature(in.features[i], in.dev_stimuli[i], in.test_stimuli[i], in.dev_responses,
                            in.test_responses, options);
    r.outcomes[i] = test_feature(r.trfs[i]);
  });
  apply_holm(r.outcomes, alpha);
  return r;
}

std::vector<double> activation_rates(const MatrixF& codes, double frame_rate, double threshold) {
  if (!(frame_rate > 0.0)) throw ValidationError("activation_rates: frame rate must be positive");
  if (codes.rows() == 0) throw ValidationError("activation_rates: no frames");
  const double seconds = static_cast<double>(codes.rows()) / frame_rate;
  std::vector<double> out(static_cast<std::size_t>(codes.cols()));
  for (Eigen::Index j = 0; j < codes.cols(); ++j) {
    out[static_cast<std::size_t>(j)] =
        static_cast<double>((codes.col(j).array() > static_cast<float>(threshold)).count()) / seconds;
  }
  return out;
}

std::vector<std::size_t> preselect_features(const MatrixF& codes, double frame_rate, double min_rate) {
  const auto rates = activation_rates(codes, frame_rate);
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < rates.size(); ++j) {
    if (rates[j] >= min_rate) keep.push_back(j);
  }
  return keep;
}

// ---------------------------------------------------------------------------

namespace {

void apply_header(TimeSeries& ts, const nlohmann::json& h, const std::filesystem::path& path) {
  if (!h.contains("rate")) throw ValidationError(path.string() + ": header lacks 'rate'");
  ts.rate = h.at("rate").get<double>();
  ts.id = h.value("channel", h.value("id", path.stem().string()));
}

}  // namespace

TimeSeries read_series(const std::filesystem::path& path) {
  TimeSeries ts;
  if (path.extension() == ".csv") {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::string line;
    bool have_header = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (line[0] == '#') {
        if (have_header || lineno != 1) throw ValidationError(path.string() + ": header must be the first line");
        try {
          apply_header(ts, nlohmann::json::parse(line.substr(1)), path);
        } catch (const nlohmann::json::exception& e) {
          throw ValidationError(path.string() + ": bad header: " + e.what());
        }
        have_header = true;
        continue;
      }
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(line, &used);
      } catch (const std::exception&) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": not a number");
      }
      if (line.find_first_not_of(" \t", used) != std::string::npos) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected one value per line");
      }
      ts.samples.push_back(v);
    }
    if (!have_header) throw ValidationError(path.string() + ": missing '# {\"rate\": ...}' header");
  } else {
    auto header_path = path;
    header_path.replace_extension(".json");
    std::ifstream hin(header_path);
    if (!hin) throw ValidationError("missing header " + header_path.string());
    try {
      apply_header(ts, nlohmann::json::parse(hin), path);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(header_path.string() + ": " + e.what());
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    const auto bytes = std::filesystem::file_size(path);
    if (bytes % sizeof(float) != 0) throw ValidationError(path.string() + ": size is not a multiple of 4 bytes");
    std::vector<float> raw(bytes / sizeof(float));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    ts.samples.assign(raw.begin(), raw.end());
  }
  ts.validate();
  return ts;
}

void write_series_csv(const std::filesystem::path& path, const TimeSeries& series, const std::string& channel) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  nlohmann::json h{{"rate", series.rate}, {"channel", channel.empty() ? series.id : channel}};
  out << "# " << h.dump() << '\n';
  out.precision(17);
  for (double v : series.samples) out << v << '\n';
}

void write_trf_csv(std::ostream& out, const TrfModel& model) {
  out << "lag_ms,weight\n";
  out.precision(10);
  for (std::size_t i = 0; i < model.lags.size(); ++i) {
    out << model.lag_ms(i) << ',' << model.weights(static_cast<Eigen::Index>(i)) << '\n';
  }
}

}  // namespace audiosae::trf
