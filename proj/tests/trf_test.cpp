#include "audiosae/trf.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "test_util.hpp"

namespace audiosae::trf {
namespace {

std::vector<double> sine(double freq, double rate, double seconds, double phase = 0.0) {
  std::vector<double> x(static_cast<std::size_t>(std::llround(rate * seconds)));
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate + phase);
  }
  return x;
}

double rms(std::span<const double> x, std::size_t skip) {
  double acc = 0.0;
  for (std::size_t i = skip; i + skip < x.size(); ++i) acc += x[i] * x[i];
  return std::sqrt(acc / static_cast<double>(x.size() - 2 * skip));
}

double correlation(std::span<const double> a, std::span<const double> b) {
  const Eigen::Map<const VectorD> x(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<const VectorD> y(b.data(), static_cast<Eigen::Index>(b.size()));
  const VectorD xc = x.array() - x.mean();
  const VectorD yc = y.array() - y.mean();
  return xc.dot(yc) / (xc.norm() * yc.norm());
}

std::vector<double> white(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> z(0.0, sd);
  std::vector<double> x(n);
  for (auto& v : x) v = z(rng);
  return x;
}

// Prewarped analog Butterworth magnitude, evaluated directly.
double analytic_lowpass(double f, double fc, double rate, int order) {
  const double r = std::tan(std::numbers::pi * f / rate) / std::tan(std::numbers::pi * fc / rate);
  return 1.0 / std::sqrt(1.0 + std::pow(r, 2 * order));
}
double analytic_highpass(double f, double fc, double rate, int order) {
  const double r = std::tan(std::numbers::pi * fc / rate) / std::tan(std::numbers::pi * f / rate);
  return 1.0 / std::sqrt(1.0 + std::pow(r, 2 * order));
}

TEST(Butterworth, MatchesAnalyticMagnitude) {
  const double rate = 512.0;
  const auto lp = butterworth_lowpass(4, 8.0, rate);
  const auto hp = butterworth_highpass(4, 1.0, rate);
  for (double f : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 40.0, 200.0}) {
    EXPECT_NEAR(magnitude_response(lp, f, rate), analytic_lowpass(f, 8.0, rate, 4), 1e-9) << f;
    EXPECT_NEAR(magnitude_response(hp, f, rate), analytic_highpass(f, 1.0, rate, 4), 1e-9) << f;
  }
  EXPECT_THROW(butterworth_lowpass(3, 8.0, rate), ValidationError);
  EXPECT_THROW(butterworth_lowpass(4, 300.0, rate), ValidationError);
}

TEST(Bandpass, ZeroPhaseResponseMeetsContract) {
  for (double rate : {128.0, 512.0}) {
    auto sections = butterworth_highpass(kFilterOrder, 1.0, rate);
    const auto lp = butterworth_lowpass(kFilterOrder, 8.0, rate);
    sections.insert(sections.end(), lp.begin(), lp.end());
    // Forward-backward squares the single-pass magnitude.
    auto db = [&](double f) { return 20.0 * std::log10(std::pow(magnitude_response(sections, f, rate), 2)); };
    EXPECT_LT(std::abs(db(std::sqrt(8.0))), 1.0);
    EXPECT_LT(std::abs(db(4.0)), 1.0);
    EXPECT_LE(db(0.5), -40.0);
    EXPECT_LE(db(16.0), -40.0);
  }
}

TEST(Bandpass, SineProbes) {
  const double rate = 512.0;
  const TimeSeries in4{sine(4.0, rate, 20.0), rate, "pz"};
  const auto out4 = bandpass(in4);
  const std::size_t skip = static_cast<std::size_t>(4 * rate);
  EXPECT_NEAR(rms(out4.samples, skip) / rms(in4.samples, skip), 1.0, 0.1);
  EXPECT_GT(correlation(out4.samples, in4.samples), 0.99);

  const TimeSeries in30{sine(30.0, rate, 20.0), rate, "pz"};
  EXPECT_LT(rms(bandpass(in30).samples, skip) / rms(in30.samples, skip), 0.01);

  const TimeSeries zero{std::vector<double>(2000, 0.0), rate, "pz"};
  const auto z = bandpass(zero);
  EXPECT_TRUE(std::all_of(z.samples.begin(), z.samples.end(), [](double v) { return v == 0.0; }));

  EXPECT_THROW(bandpass(in4, 8.0, 1.0), ValidationError);
  EXPECT_THROW(bandpass(in4, 1.0, 256.0), ValidationError);
  EXPECT_THROW(bandpass(in4, 0.0, 8.0), ValidationError);
}

TEST(Filtfilt, LengthAndShortInputs) {
  const auto sec = butterworth_lowpass(4, 8.0, 128.0);
  for (std::size_t n : {1u, 2u, 5u, 100u}) {
    std::vector<double> x(n, 1.0);
    const auto y = filtfilt(sec, x);
    ASSERT_EQ(y.size(), n);
    // DC gain of a lowpass is one, and steady-state initial conditions leave
    // a constant untouched.
    for (double v : y) EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(Resample, IdentityAndConstant) {
  std::mt19937_64 rng(1);
  const TimeSeries x{white(300, rng), 128.0, "a"};
  EXPECT_EQ(resample(x, 128.0).samples, x.samples);

  const TimeSeries c{std::vector<double>(5120, 2.5), 512.0, "c"};
  const auto r = resample(c, 128.0);
  ASSERT_EQ(r.samples.size(), 1280u);
  for (double v : r.samples) EXPECT_NEAR(v, 2.5, 1e-12);
  const auto up = resample(TimeSeries{std::vector<double>(100, -1.0), 50.0, "c"}, 128.0);
  for (double v : up.samples) EXPECT_NEAR(v, -1.0, 1e-12);
}

TEST(Resample, SineAgainstAnalytic) {
  const TimeSeries x{sine(2.0, 512.0, 30.0), 512.0, "s"};
  const auto y = resample(x, 128.0);
  EXPECT_EQ(y.rate, 128.0);
  EXPECT_LE(std::abs(y.duration() - x.duration()), 1.0 / 128.0);
  EXPECT_GT(correlation(y.samples, sine(2.0, 128.0, 30.0)), 0.999);
}

TEST(Resample, DurationPreservedForOddRates) {
  for (double src : {500.0, 1000.0, 44.1, 256.0, 100.0}) {
    const TimeSeries x{std::vector<double>(1237, 0.0), src, "z"};
    const auto y = resample(x, 128.0);
    EXPECT_LE(std::abs(y.duration() - x.duration()), 1.0 / 128.0) << src;
  }
}

TEST(Quantile, LinearInterpolation) {
  // numpy.quantile defaults
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({7, 1, 3}, 0.75), 5.0);
  EXPECT_DOUBLE_EQ(quantile({4}, 0.9), 4.0);
}

TEST(NormalizeResponse, Cases) {
  const TimeSeries x{{1, 2, 3, 4, 5}, 128.0, "r"};
  const auto y = normalize_response(x);
  EXPECT_EQ(y.samples, (std::vector<double>{-1, -0.5, 0, 0.5, 1}));
  EXPECT_DOUBLE_EQ(quantile(y.samples, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(quantile(y.samples, 0.75) - quantile(y.samples, 0.25), 1.0);
  EXPECT_EQ(normalize_response(y).samples, y.samples);
  EXPECT_THROW(normalize_response(TimeSeries{{3, 3, 3, 3}, 128.0, "c"}), ValidationError);

  std::mt19937_64 rng(2);
  const auto z = normalize_response(TimeSeries{white(999, rng, 4.0), 128.0, "w"});
  EXPECT_NEAR(quantile(z.samples, 0.5), 0.0, 1e-12);
  EXPECT_NEAR(quantile(z.samples, 0.75) - quantile(z.samples, 0.25), 1.0, 1e-12);
}

TEST(NormalizeStimulus, Cases) {
  EXPECT_EQ(normalize_stimulus(TimeSeries{{0, 2, 4}, 128.0, "s"}).samples, (std::vector<double>{0, 0.5, 1}));
  const TimeSeries unit{{0.25, 1, 0}, 128.0, "s"};
  EXPECT_EQ(normalize_stimulus(unit).samples, unit.samples);
  EXPECT_THROW(normalize_stimulus(TimeSeries{{0, 0, 0}, 128.0, "s"}), ValidationError);
  EXPECT_THROW(normalize_stimulus(TimeSeries{{-1, -2}, 128.0, "s"}), ValidationError);
}

TEST(TimeSeriesValidation, RejectsBadInput) {
  EXPECT_THROW(TimeSeries({1.0}, 0.0, "x").validate(), ValidationError);
  EXPECT_THROW(TimeSeries({std::nan("")}, 10.0, "x").validate(), ValidationError);
}

TEST(SplitDevTest, SixOfFifteenMinutes) {
  const TimeSeries x{std::vector<double>(15 * 60 * 128, 0.0), 128.0, "r"};
  const auto [dev, test] = split_dev_test(x);
  EXPECT_EQ(dev.samples.size(), 6u * 60 * 128);
  EXPECT_EQ(test.samples.size(), 9u * 60 * 128);
  EXPECT_THROW(split_dev_test(x, 2000.0), ValidationError);
}

TEST(LagGrid, DefaultSpacing) {
  const auto lags = lag_grid(0.0, 500.0, kTrfRate);
  ASSERT_EQ(lags.size(), 65u);
  EXPECT_EQ(lags.front(), 0);
  EXPECT_EQ(lags.back(), 64);
  TrfModel m;
  m.lags = lags;
  EXPECT_DOUBLE_EQ(m.lag_ms(1), 7.8125);
  EXPECT_DOUBLE_EQ(m.lag_ms(64), 500.0);
  EXPECT_EQ(lag_grid(-100.0, 0.0, 128.0).front(), -12);
  EXPECT_THROW(lag_grid(10.0, 0.0, 128.0), ValidationError);
}

TEST(TrfDesign, GramAndCrossMatchDenseDesign) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<int> len(8, 60);
    const auto n = static_cast<std::size_t>(len(rng));
    const auto s = white(n, rng);
    std::uniform_int_distribution<int> lag(-static_cast<int>(n) + 1, static_cast<int>(n) - 1);
    int a = lag(rng), b = lag(rng);
    if (a > b) std::swap(a, b);
    b = std::min(b, a + 20);
    std::vector<int> lags;
    for (int l = a; l <= b; ++l) lags.push_back(l);
    const TrfDesign d(s, lags, 1.0, false);
    const MatrixD X = lagged_design(s, lags);
    EXPECT_LT((d.gram() - X.transpose() * X).cwiseAbs().maxCoeff(), 1e-10);
    const MatrixD R = testing::random_matrix<MatrixD>(static_cast<Eigen::Index>(n), 3, rng);
    EXPECT_LT((d.cross(R) - X.transpose() * R).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(FitTrf, ZeroRidgeMatchesNormalEquations) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = white(200, rng);
    const auto r = white(200, rng);
    const std::vector<int> lags{-2, -1, 0, 1, 2, 3, 4, 5};
    const MatrixD X = lagged_design(s, lags);
    const Eigen::Map<const VectorD> rv(r.data(), 200);

    const VectorD raw = (X.transpose() * X).ldlt().solve(X.transpose() * rv);
    const auto sol = TrfDesign(s, lags, 0.0, false).solve(rv);
    EXPECT_LT((sol.weights.col(0) - raw).norm(), 1e-8 * raw.norm());
    EXPECT_EQ(sol.intercept(0), 0.0);

    // Standardized columns at zero ridge give ordinary least squares with an
    // intercept in the original units.
    MatrixD Xi(200, 9);
    Xi.leftCols(8) = X;
    Xi.col(8).setOnes();
    const VectorD ols = (Xi.transpose() * Xi).ldlt().solve(Xi.transpose() * rv);
    const auto std_sol = TrfDesign(s, lags, 0.0, true).solve(rv);
    EXPECT_LT((std_sol.weights.col(0) - ols.head(8)).norm(), 1e-8 * ols.norm());
    EXPECT_NEAR(std_sol.intercept(0), ols(8), 1e-8 * ols.norm());
  }
}

TEST(FitTrf, RidgeMatchesPenalizedNormalEquations) {
  std::mt19937_64 rng(5);
  const auto s = white(150, rng);
  const auto r = white(150, rng);
  const std::vector<int> lags{0, 1, 2, 3};
  const MatrixD X = lagged_design(s, lags);
  const Eigen::Map<const VectorD> rv(r.data(), 150);
  const VectorD expect = (X.transpose() * X + 7.0 * MatrixD::Identity(4, 4)).ldlt().solve(X.transpose() * rv);
  EXPECT_LT((TrfDesign(s, lags, 7.0, false).solve(rv).weights.col(0) - expect).norm(), 1e-10);
}

TEST(FitTrf, IdentityFilter) {
  std::mt19937_64 rng(6);
  const auto s = white(128 * 60, rng);
  TrfOptions opt;
  opt.lambda = 0.0;
  const auto m = fit_trf(TimeSeries{s, kTrfRate, "f"}, TimeSeries{s, kTrfRate, "subj"}, opt);
  EXPECT_NEAR(m.weights(0), 1.0, 1e-6);
  EXPECT_LT(m.weights.tail(m.weights.size() - 1).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_EQ(m.subject, "subj");
  EXPECT_EQ(m.feature, "f");
}

VectorD planted_kernel(const std::vector<int>& lags) {
  VectorD w(static_cast<Eigen::Index>(lags.size()));
  for (std::size_t i = 0; i < lags.size(); ++i) {
    const double ms = 1000.0 * lags[i] / kTrfRate;
    w(static_cast<Eigen::Index>(i)) =
        std::exp(-std::pow((ms - 150.0) / 40.0, 2)) - 0.5 * std::exp(-std::pow((ms - 320.0) / 50.0, 2));
  }
  return w;
}

// Response = kernel * stimulus + noise at the requested SNR.
std::vector<double> planted_response(std::span<const double> s, const std::vector<int>& lags, const VectorD& w,
                                     double snr_db, std::mt19937_64& rng) {
  auto r = predict(s, lags, w);
  double power = 0.0;
  for (double v : r) power += v * v;
  power /= static_cast<double>(r.size());
  std::normal_distribution<double> z(0.0, std::sqrt(power / std::pow(10.0, snr_db / 10.0)));
  for (double& v : r) v += z(rng);
  return r;
}

TEST(FitTrf, PlantedKernelRecovered) {
  std::mt19937_64 rng(7);
  const auto lags = lag_grid(0.0, 500.0, kTrfRate);
  const VectorD w = planted_kernel(lags);
  const auto s = white(128 * 120, rng);
  const auto r = planted_response(s, lags, w, 10.0, rng);
  const auto m = fit_trf(TimeSeries{s, kTrfRate, "f"}, TimeSeries{r, kTrfRate, "s"});
  EXPECT_GT(correlation({m.weights.data(), lags.size()}, {w.data(), lags.size()}), 0.95);

  const auto ext = extrema_lags(m.weights);
  EXPECT_NEAR(m.lag_ms(ext.max_index), 150.0, 1000.0 / kTrfRate + 1e-9);
}

TEST(FitTrf, ZeroResponseAndLinearity) {
  std::mt19937_64 rng(8);
  const auto s = white(2000, rng);
  const TimeSeries stim{s, kTrfRate, "f"};
  for (double lambda : {0.01, 1.0, 10.0}) {
    TrfOptions opt;
    opt.lambda = lambda;
    const auto m = fit_trf(stim, TimeSeries{std::vector<double>(2000, 0.0), kTrfRate, "z"}, opt);
    EXPECT_EQ(m.weights.cwiseAbs().maxCoeff(), 0.0);
  }
  const auto r1 = white(2000, rng), r2 = white(2000, rng);
  std::vector<double> sum(2000);
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = r1[i] + r2[i];
  for (bool standardize : {false, true}) {
    TrfOptions opt;
    opt.standardize = standardize;
    const auto a = fit_trf(stim, TimeSeries{r1, kTrfRate, "a"}, opt);
    const auto b = fit_trf(stim, TimeSeries{r2, kTrfRate, "b"}, opt);
    const auto c = fit_trf(stim, TimeSeries{sum, kTrfRate, "c"}, opt);
    EXPECT_LT((c.weights - a.weights - b.weights).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(c.intercept, a.intercept + b.intercept, 1e-10);
  }
}

TEST(FitTrf, Errors) {
  const TimeSeries constant{std::vector<double>(500, 1.0), kTrfRate, "c"};
  std::mt19937_64 rng(9);
  const TimeSeries r{white(500, rng), kTrfRate, "r"};
  TrfOptions opt;
  opt.lambda = 0.0;
  EXPECT_THROW(fit_trf(constant, r, opt), RuntimeFailure);
  EXPECT_NO_THROW(fit_trf(constant, r));
  EXPECT_THROW(fit_trf(TimeSeries{white(400, rng), kTrfRate, "s"}, r), ValidationError);
  EXPECT_THROW(fit_trf(TimeSeries{white(500, rng), 100.0, "s"}, r), ValidationError);
  const TimeSeries tiny{white(30, rng), kTrfRate, "t"};
  EXPECT_THROW(fit_trf(tiny, tiny), ValidationError);
}

TEST(SelectLambda, PrefersLargeRidgeOnPureNoise) {
  std::mt19937_64 rng(10);
  const auto lags = lag_grid(0.0, 500.0, kTrfRate);
  const auto s1 = white(1500, rng), s2 = white(1500, rng);
  MatrixD r1(1500, 3), r2(1500, 3);
  for (Eigen::Index c = 0; c < 3; ++c) {
    const auto a = white(1500, rng), b = white(1500, rng);
    r1.col(c) = Eigen::Map<const VectorD>(a.data(), 1500);
    r2.col(c) = Eigen::Map<const VectorD>(b.data(), 1500);
  }
  EXPECT_EQ(select_lambda(s1, r1, s2, r2, lags, kLambdaGrid), 10.0);

  const VectorD w = planted_kernel(lags);
  for (Eigen::Index c = 0; c < 3; ++c) {
    const auto a = planted_response(s1, lags, w, 30.0, rng), b = planted_response(s2, lags, w, 30.0, rng);
    r1.col(c) = Eigen::Map<const VectorD>(a.data(), 1500);
    r2.col(c) = Eigen::Map<const VectorD>(b.data(), 1500);
  }
  EXPECT_LT(select_lambda(s1, r1, s2, r2, lags, kLambdaGrid), 10.0);
}

TEST(ExtremaLags, Cases) {
  VectorD up(5);
  up << -2, -1, 0, 1, 2;
  auto e = extrema_lags(up);
  EXPECT_EQ(e.min_index, 0u);
  EXPECT_EQ(e.max_index, 4u);
  e = extrema_lags(VectorD(VectorD::Constant(6, 0.3)));
  EXPECT_EQ(e.min_index, 0u);
  EXPECT_EQ(e.max_index, 0u);
  VectorD ties(4);
  ties << 0, 5, -1, 5;
  EXPECT_EQ(extrema_lags(ties).max_index, 1u);

  // Averaging across subjects happens before the argmax.
  TrfModel a, b;
  a.lags = b.lags = {0, 1, 2};
  a.weights = VectorD(3);
  b.weights = VectorD(3);
  a.weights << 0, 3, 0;
  b.weights << 0, -2, 0.5;
  const std::vector<TrfModel> set{a, b};
  EXPECT_EQ(extrema_lags(set).max_index, 1u);
  b.lags = {0, 1, 3};
  EXPECT_THROW(extrema_lags(std::vector<TrfModel>{a, b}), ShapeError);
}

TEST(TTest, ClosedFormAtTwoDegreesOfFreedom) {
  // Student t with 2 df: upper tail = (1 - t / sqrt(t^2 + 2)) / 2.
  const std::vector<double> v{1, 2, 3};
  const double t = 2.0 / (1.0 / std::sqrt(3.0));
  const double expect = 0.5 * (1.0 - t / std::sqrt(t * t + 2.0));
  EXPECT_NEAR(one_sided_t_pvalue(v, Tail::greater), expect, 1e-12);
  EXPECT_NEAR(one_sided_t_pvalue(v, Tail::less), 1.0 - expect, 1e-12);
  EXPECT_EQ(one_sided_t_pvalue(std::vector<double>{0, 0, 0}, Tail::greater), 1.0);
  EXPECT_EQ(one_sided_t_pvalue(std::vector<double>{0, 0, 0}, Tail::less), 1.0);
  EXPECT_THROW(one_sided_t_pvalue(std::vector<double>{1.0}, Tail::less), ValidationError);
}

TEST(Holm, HandAppliedStepDown) {
  const std::vector<double> p{0.04, 0.01, 0.03};
  const auto h = holm(p);
  EXPECT_EQ(h.reject, (std::vector<bool>{false, true, false}));
  EXPECT_NEAR(h.adjusted[1], 0.03, 1e-15);
  EXPECT_NEAR(h.adjusted[2], 0.06, 1e-15);
  EXPECT_NEAR(h.adjusted[0], 0.06, 1e-15);
  EXPECT_THROW(holm(std::vector<double>{1.5}), ValidationError);
}

TEST(Holm, RejectionsAgreeWithAdjustedAndNeverExceedBonferroniReach) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(12);
    for (auto& x : p) x = u(rng);
    const auto h = holm(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_EQ(h.reject[i], h.adjusted[i] <= 0.05);
      // Bonferroni rejections are always Holm rejections.
      if (p[i] <= 0.05 / 12.0) EXPECT_TRUE(h.reject[i]);
    }
  }
}

StudyInput simulate_study(std::size_t subjects, std::size_t features, double seconds_dev, double seconds_test,
                          int planted, std::mt19937_64& rng) {
  StudyInput in;
  const auto lags = lag_grid(0.0, 500.0, kTrfRate);
  const VectorD w = planted_kernel(lags);
  const auto n_dev = static_cast<std::size_t>(seconds_dev * kTrfRate);
  const auto n_test = static_cast<std::size_t>(seconds_test * kTrfRate);
  for (std::size_t f = 0; f < features; ++f) {
    in.features.push_back("f" + std::to_string(f));
    in.dev_stimuli.push_back(white(n_dev, rng));
    in.test_stimuli.push_back(white(n_test, rng));
  }
  in.dev_responses.resize(static_cast<Eigen::Index>(n_dev), static_cast<Eigen::Index>(subjects));
  in.test_responses.resize(static_cast<Eigen::Index>(n_test), static_cast<Eigen::Index>(subjects));
  for (std::size_t c = 0; c < subjects; ++c) {
    auto dev = white(n_dev, rng, 3.0), test = white(n_test, rng, 3.0);
    if (planted >= 0) {
      const auto pd = predict(in.dev_stimuli[static_cast<std::size_t>(planted)], lags, w);
      const auto pt = predict(in.test_stimuli[static_cast<std::size_t>(planted)], lags, w);
      for (std::size_t t = 0; t < n_dev; ++t) dev[t] += pd[t];
      for (std::size_t t = 0; t < n_test; ++t) test[t] += pt[t];
    }
    in.dev_responses.col(static_cast<Eigen::Index>(c)) = Eigen::Map<const VectorD>(dev.data(), static_cast<Eigen::Index>(n_dev));
    in.test_responses.col(static_cast<Eigen::Index>(c)) = Eigen::Map<const VectorD>(test.data(), static_cast<Eigen::Index>(n_test));
  }
  return in;
}

TEST(Study, PlantedFeatureFlagged) {
  std::mt19937_64 rng(12);
  const auto in = simulate_study(19, 6, 20.0, 30.0, 2, rng);
  const auto r = run_study(in);
  ASSERT_EQ(r.outcomes.size(), 6u);
  EXPECT_TRUE(r.outcomes[2].significant_max);
  EXPECT_NEAR(r.outcomes[2].tau_max_ms, 150.0, 7.8125 + 1e-9);
  EXPECT_NEAR(r.outcomes[2].tau_min_ms, 320.0, 2 * 7.8125 + 1e-9);
  for (const auto& o : r.outcomes) {
    EXPECT_GE(o.p_max, 0.0);
    EXPECT_LE(o.p_max, 1.0);
  }
  const auto j = to_json(r.outcomes[2]);
  EXPECT_EQ(j.at("feature"), "f2");
  EXPECT_TRUE(j.at("significant").get<bool>());
}

TEST(Study, AllZeroTrfsGiveNoRejections) {
  FeatureTrfs t;
  t.feature = "z";
  t.lags = lag_grid(0.0, 500.0, kTrfRate);
  t.dev = MatrixD::Zero(65, 19);
  t.test = MatrixD::Zero(65, 19);
  std::vector<TestOutcome> out{test_feature(t), test_feature(t)};
  apply_holm(out);
  for (const auto& o : out) EXPECT_FALSE(o.significant());

  t.dev = MatrixD::Zero(65, 1);
  t.test = MatrixD::Zero(65, 1);
  EXPECT_THROW(test_feature(t), ValidationError);
}

TEST(Study, ExtremaComeFromDevSplitOnly) {
  // Dev TRFs peak at lag 3, test TRFs peak elsewhere; the tested lag stays 3.
  FeatureTrfs t;
  t.feature = "x";
  t.lags = {0, 1, 2, 3, 4};
  t.dev = MatrixD::Zero(5, 3);
  t.dev.row(3).setConstant(1.0);
  t.dev.row(1).setConstant(-1.0);
  t.test = MatrixD::Zero(5, 3);
  t.test.row(0) << 5, 6, 7;
  const auto o = test_feature(t);
  EXPECT_DOUBLE_EQ(o.tau_max_ms, 3 * 1000.0 / kTrfRate);
  EXPECT_DOUBLE_EQ(o.tau_min_ms, 1 * 1000.0 / kTrfRate);
  EXPECT_EQ(o.p_max, 1.0);
}

TEST(Preselect, RateThreshold) {
  MatrixF codes = MatrixF::Zero(100, 3);  // 2 s at 50 fps
  for (int t = 0; t < 100; t += 10) codes(t, 0) = 1.0f;  // 5 per second
  codes(0, 1) = 1.0f;                                    // 0.5 per second
  codes(3, 2) = codes(60, 2) = 0.5f;                     // exactly 1 per second
  const auto rates = activation_rates(codes, 50.0);
  EXPECT_DOUBLE_EQ(rates[0], 5.0);
  EXPECT_DOUBLE_EQ(rates[1], 0.5);
  EXPECT_EQ(preselect_features(codes, 50.0), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(preselect_features(codes, 50.0, 0.1), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(SeriesIo, CsvAndRawRoundTrip) {
  testing::TempDir dir;
  const TimeSeries ts{{0.5, -1.25, 3.0}, 512.0, "Pz"};
  write_series_csv(dir / "s01.csv", ts);
  const auto back = read_series(dir / "s01.csv");
  EXPECT_EQ(back.samples, ts.samples);
  EXPECT_EQ(back.rate, 512.0);
  EXPECT_EQ(back.id, "Pz");

  {
    std::ofstream raw(dir / "s02.f32", std::ios::binary);
    const float v[3] = {1.0f, 2.0f, -0.5f};
    raw.write(reinterpret_cast<const char*>(v), sizeof v);
    std::ofstream h(dir / "s02.json");
    h << R"({"rate": 128, "channel": "Cz"})";
  }
  const auto raw = read_series(dir / "s02.f32");
  EXPECT_EQ(raw.samples, (std::vector<double>{1.0, 2.0, -0.5}));
  EXPECT_EQ(raw.id, "Cz");

  {
    std::ofstream bad(dir / "bad.csv");
    bad << "1\n2\n";
  }
  EXPECT_THROW(read_series(dir / "bad.csv"), ValidationError);
  {
    std::ofstream bad(dir / "bad2.csv");
    bad << "# {\"rate\": 10}\n1,2\n";
  }
  EXPECT_THROW(read_series(dir / "bad2.csv"), ValidationError);
  EXPECT_THROW(read_series(dir / "missing.f32"), ValidationError);
}

TEST(TrfCsv, Format) {
  TrfModel m;
  m.lags = {0, 1};
  m.weights = VectorD(2);
  m.weights << 0.5, -0.25;
  std::ostringstream out;
  write_trf_csv(out, m);
  EXPECT_EQ(out.str(), "lag_ms,weight\n0,0.5\n7.8125,-0.25\n");
}

}  // namespace
}  // namespace audiosae::trf
