#include "audiosae/sae.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "oracles.hpp"
#include "test_util.hpp"

namespace audiosae::sae {
namespace {

using testing::random_matrix;

SaeModel identity_model(std::size_t d, std::size_t k) {
  auto m = SaeModel::zeros(d, d, {ActivationKind::batch_topk, k, {}});
  m.encoder_weight.setIdentity();
  m.decoder_weight.setIdentity();
  m.input_normalization = false;
  return m;
}

BasicSaeModel<double> random_model(std::size_t d, std::size_t D, std::size_t k, std::mt19937_64& rng) {
  auto m = BasicSaeModel<double>::zeros(d, D, {ActivationKind::batch_topk, k, {}});
  m.encoder_weight = random_matrix<MatrixD>(D, d, rng);
  m.encoder_bias = random_matrix<MatrixD>(D, 1, rng, -0.1, 0.1).col(0);
  m.decoder_weight = random_matrix<MatrixD>(d, D, rng);
  m.decoder_bias = random_matrix<MatrixD>(d, 1, rng, -0.1, 0.1).col(0);
  return m;
}

TEST(NormalizeInput, UnitVectorUnchanged) {
  VectorF x(3);
  x << 1, 0, 0;
  const auto out = normalize_input(x);
  EXPECT_FALSE(out.was_zero);
  EXPECT_EQ(out.value, x);
}

TEST(NormalizeInput, ThreeFourFive) {
  VectorD x(2);
  x << 3, 4;
  const auto out = normalize_input(x);
  EXPECT_NEAR(out.value(0), 0.6, 1e-15);
  EXPECT_NEAR(out.value(1), 0.8, 1e-15);
}

TEST(NormalizeInput, ZeroVectorFlagged) {
  const VectorF x = VectorF::Zero(4);
  const auto out = normalize_input(x);
  EXPECT_TRUE(out.was_zero);
  EXPECT_EQ(out.value, x);
  MatrixF rows(2, 2);
  rows << 0, 0, 3, 4;
  EXPECT_EQ(normalize_rows(rows), 1u);
  EXPECT_FLOAT_EQ(rows(1, 1), 0.8f);
}

TEST(NormalizeInput, NonFiniteRejected) {
  VectorF x(2);
  x << 1, std::numeric_limits<float>::infinity();
  EXPECT_THROW(normalize_input(x), ValidationError);
}

TEST(Encode, ZeroInputZeroBias) {
  std::mt19937_64 rng(1);
  auto m = SaeModel::zeros(3, 6, {ActivationKind::batch_topk, 2, {}});
  m.encoder_weight = random_matrix<MatrixF>(6, 3, rng);
  const MatrixF pre = encode(m, MatrixF(MatrixF::Zero(4, 3)));
  EXPECT_TRUE(pre.isZero(0));
}

TEST(Encode, IdentityWeightsPassThrough) {
  std::mt19937_64 rng(2);
  const auto m = identity_model(5, 5);
  const MatrixF X = random_matrix<MatrixF>(3, 5, rng);
  EXPECT_EQ(encode(m, X), X);
}

TEST(Encode, MatchesNaiveMatmul) {
  std::mt19937_64 rng(3);
  auto m = SaeModel::zeros(3, 7, {ActivationKind::batch_topk, 2, {}});
  m.encoder_weight = random_matrix<MatrixF>(7, 3, rng);
  m.encoder_bias = random_matrix<MatrixF>(7, 1, rng).col(0);
  const MatrixF X = random_matrix<MatrixF>(2, 3, rng);
  const MatrixF ref = oracle::naive_affine(X, m.encoder_weight, m.encoder_bias);
  EXPECT_LT((encode(m, X) - ref).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Encode, ShapeMismatch) {
  const auto m = identity_model(4, 2);
  EXPECT_THROW(encode(m, MatrixF(MatrixF::Zero(2, 3))), ShapeError);
  EXPECT_THROW(decode(m, MatrixF(MatrixF::Zero(2, 3))), ShapeError);
}

TEST(Encode, IsAffineInInputs) {
  std::mt19937_64 rng(4);
  auto m = random_model(4, 9, 2, rng);
  const MatrixD X1 = random_matrix<MatrixD>(3, 4, rng), X2 = random_matrix<MatrixD>(3, 4, rng);
  const double a = 0.7, b = -1.3;
  MatrixD lhs = encode(m, MatrixD(a * X1 + b * X2));
  lhs.rowwise() -= m.encoder_bias.transpose();
  MatrixD p1 = encode(m, X1), p2 = encode(m, X2);
  p1.rowwise() -= m.encoder_bias.transpose();
  p2.rowwise() -= m.encoder_bias.transpose();
  EXPECT_LT((lhs - (a * p1 + b * p2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BatchTopK, WorkedExample) {
  MatrixF pre(2, 3);
  pre << 3, 1, 0.5, 2, 0.1, 4;
  MatrixF expect(2, 3);
  expect << 3, 1, 0, 2, 0, 4;
  EXPECT_EQ(batch_topk(pre, 2), expect);
}

TEST(BatchTopK, SaturationEqualsRelu) {
  std::mt19937_64 rng(5);
  const MatrixF pre = random_matrix<MatrixF>(4, 6, rng);
  EXPECT_EQ(batch_topk(pre, 6), pre.cwiseMax(0.0f));
}

TEST(BatchTopK, AllNegativeGivesZero) {
  const MatrixF pre = MatrixF::Constant(3, 4, -1.0f);
  EXPECT_TRUE(batch_topk(pre, 2).isZero(0));
}

TEST(BatchTopK, TiesBreakTowardsLowestIndex) {
  MatrixF pre = MatrixF::Constant(2, 3, 1.0f);
  MatrixF expect(2, 3);
  expect << 1, 1, 0, 0, 0, 0;
  EXPECT_EQ(batch_topk(pre, 1), expect);
}

TEST(BatchTopK, MatchesSortOracleAndL0Budget) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> dim(1, 12), kd(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const int B = dim(rng), D = dim(rng);
    const auto k = static_cast<std::size_t>(kd(rng));
    const MatrixF pre = random_matrix<MatrixF>(B, D, rng);
    const MatrixF codes = batch_topk(pre, k);
    EXPECT_EQ(codes, oracle::sort_topk(pre, k * B));
    const auto positives = static_cast<std::size_t>((pre.array() > 0).count());
    EXPECT_EQ(static_cast<std::size_t>((codes.array() != 0).count()), std::min(k * B, positives));
  }
}

TEST(TopKPerRow, Argmax) {
  MatrixF pre(1, 3);
  pre << 3, 1, 0.5;
  MatrixF expect(1, 3);
  expect << 3, 0, 0;
  EXPECT_EQ(topk_per_row(pre, 1), expect);
}

TEST(TopKPerRow, SaturationEqualsRelu) {
  std::mt19937_64 rng(7);
  const MatrixF pre = random_matrix<MatrixF>(3, 5, rng);
  EXPECT_EQ(topk_per_row(pre, 8), pre.cwiseMax(0.0f));
}

TEST(TopKPerRow, MatchesSortOracle) {
  std::mt19937_64 rng(8);
  const MatrixF pre = random_matrix<MatrixF>(4, 8, rng);
  EXPECT_EQ(topk_per_row(pre, 3), oracle::sort_topk_rows(pre, 3));
}

TEST(JumpRelu, GatesOnThreshold) {
  MatrixF pre(1, 3);
  pre << 0.5, 0.2, -1;
  const std::vector<double> theta{0.3, 0.3, 0.0};
  MatrixF expect(1, 3);
  expect << 0.5, 0, 0;
  EXPECT_EQ(jump_relu(pre, theta), expect);
}

TEST(JumpRelu, MonotoneInPreActivation) {
  const std::vector<double> theta{0.25};
  float last = 0.0f;
  for (float v = -1.0f; v <= 1.0f; v += 0.01f) {
    MatrixF pre(1, 1);
    pre << v;
    const float out = jump_relu(pre, theta)(0, 0);
    EXPECT_GE(out, last);
    last = out;
  }
}

TEST(Decode, ZeroCodesGiveBias) {
  std::mt19937_64 rng(9);
  auto m = SaeModel::zeros(3, 5, {ActivationKind::batch_topk, 2, {}});
  m.decoder_weight = random_matrix<MatrixF>(3, 5, rng);
  m.decoder_bias << 1, 2, 3;
  const MatrixF out = decode(m, MatrixF(MatrixF::Zero(4, 5)));
  for (Eigen::Index r = 0; r < 4; ++r) EXPECT_EQ(VectorF(out.row(r).transpose()), m.decoder_bias);
}

TEST(Decode, IdentityRoundTrip) {
  std::mt19937_64 rng(10);
  const auto m = identity_model(6, 6);
  const MatrixF X = random_matrix<MatrixF>(4, 6, rng, 0.1, 1.0);
  EXPECT_EQ(decode(m, activate(m, encode(m, X))), X);
}

TEST(Decode, MatchesNaiveMatmul) {
  std::mt19937_64 rng(11);
  auto m = SaeModel::zeros(4, 9, {ActivationKind::batch_topk, 2, {}});
  m.decoder_weight = random_matrix<MatrixF>(4, 9, rng);
  m.decoder_bias = random_matrix<MatrixF>(4, 1, rng).col(0);
  const MatrixF codes = random_matrix<MatrixF>(3, 9, rng, 0.0, 2.0);
  const MatrixF ref = oracle::naive_affine(codes, m.decoder_weight, m.decoder_bias);
  EXPECT_LT((decode(m, codes) - ref).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Loss, Cases) {
  std::mt19937_64 rng(12);
  const MatrixF X = random_matrix<MatrixF>(5, 3, rng);
  EXPECT_EQ(loss(X, X), 0.0f);
  MatrixF a(1, 2), b = MatrixF::Zero(1, 2);
  a << 1, 0;
  EXPECT_FLOAT_EQ(loss(a, b), 1.0f);
  for (int i = 0; i < 20; ++i) {
    EXPECT_GE(loss(random_matrix<MatrixF>(3, 4, rng), random_matrix<MatrixF>(3, 4, rng)), 0.0f);
  }
  EXPECT_THROW(loss(a, MatrixF(MatrixF::Zero(2, 2))), ShapeError);
}

TEST(Backward, IdentityConfigurationIsStationary) {
  std::mt19937_64 rng(13);
  const auto m = identity_model(5, 5).cast<double>();
  const MatrixD X = random_matrix<MatrixD>(3, 5, rng, 0.1, 1.0);
  const auto trace = forward(m, X);
  EXPECT_EQ(trace.loss, 0.0);
  const auto g = backward(m, X, trace);
  EXPECT_TRUE(g.encoder_weight.isZero(0));
  EXPECT_TRUE(g.encoder_bias.isZero(0));
  EXPECT_TRUE(g.decoder_weight.isZero(0));
  EXPECT_TRUE(g.decoder_bias.isZero(0));
}

TEST(Backward, DecoderBiasHandFormula) {
  std::mt19937_64 rng(14);
  const auto m = random_model(4, 8, 2, rng);
  const MatrixD X = random_matrix<MatrixD>(1, 4, rng);
  const auto trace = forward(m, X);
  const auto g = backward(m, X, trace);
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_NEAR(g.decoder_bias(i), 2.0 * (trace.reconstruction(0, i) - X(0, i)), 1e-14);
  }
}

TEST(Backward, MatchesCentralDifferences) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 3; ++trial) {
    const auto m = random_model(8, 32, 4, rng);
    const MatrixD X = random_matrix<MatrixD>(6, 8, rng);
    const auto trace = forward(m, X);
    const auto g = backward(m, X, trace);
    const double h = 1e-4, floor = 1e-8;
    using M = BasicSaeModel<double>;
    const auto ew = oracle::central_difference_check(m, X, 4, [](M& x) -> MatrixD& { return x.encoder_weight; },
                                                     g.encoder_weight, h, floor);
    const auto eb = oracle::central_difference_check(m, X, 4, [](M& x) -> VectorD& { return x.encoder_bias; },
                                                     g.encoder_bias, h, floor);
    const auto dw = oracle::central_difference_check(m, X, 4, [](M& x) -> MatrixD& { return x.decoder_weight; },
                                                     g.decoder_weight, h, floor);
    const auto db = oracle::central_difference_check(m, X, 4, [](M& x) -> VectorD& { return x.decoder_bias; },
                                                     g.decoder_bias, h, floor);
    EXPECT_LT(ew.max_relative_error, 1e-5);
    EXPECT_LT(eb.max_relative_error, 1e-5);
    EXPECT_LT(dw.max_relative_error, 1e-5);
    EXPECT_LT(db.max_relative_error, 1e-5);
  }
}

TEST(EncodeCodes, PerAudioPoolingBudgetsEachAudio) {
  auto m = identity_model(3, 1);
  MatrixF X(4, 3);
  // audio 0 has large values, audio 1 small ones
  X << 9, 8, 7, 9, 8, 7, 1, 2, 3, 1, 2, 3;
  const std::vector<FrameRange> audios{{0, 2}, {2, 4}};
  const MatrixF per_audio = encode_codes(m, X, audios, Pooling::per_audio);
  EXPECT_EQ((per_audio.topRows(2).array() != 0).count(), 2);
  EXPECT_EQ((per_audio.bottomRows(2).array() != 0).count(), 2);
  const MatrixF pooled = encode_codes(m, X, audios, Pooling::per_batch);
  EXPECT_EQ((pooled.topRows(2).array() != 0).count(), 4);
  EXPECT_EQ((pooled.bottomRows(2).array() != 0).count(), 0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testing::TempDir dir;
  std::mt19937_64 rng(16);
  Checkpoint ck;
  ck.model = random_model(5, 20, 3, rng).cast<float>();
  ck.model.input_normalization = true;
  ck.metadata = {{"note", "unit"}, {"step", 7}};
  ck.extra.push_back({"adam.first.encoder_weight", random_matrix<MatrixF>(20, 5, rng)});
  save_checkpoint(dir / "m.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.model.encoder_weight, ck.model.encoder_weight);
  EXPECT_EQ(back.model.encoder_bias, ck.model.encoder_bias);
  EXPECT_EQ(back.model.decoder_weight, ck.model.decoder_weight);
  EXPECT_EQ(back.model.decoder_bias, ck.model.decoder_bias);
  EXPECT_EQ(back.model.rule.k, 3u);
  EXPECT_TRUE(back.model.input_normalization);
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(back.extra, ck.extra);

  save_checkpoint(dir / "m2.ckpt", back);
  EXPECT_EQ(std::filesystem::file_size(dir / "m.ckpt"), std::filesystem::file_size(dir / "m2.ckpt"));
}

TEST(Checkpoint, JumpReluThresholdsPersist) {
  testing::TempDir dir;
  Checkpoint ck;
  ck.model = SaeModel::zeros(2, 3, {ActivationKind::jump_relu, 1, {0.25, 0.5, 0.0}});
  save_checkpoint(dir / "j.ckpt", ck);
  const auto back = load_checkpoint(dir / "j.ckpt");
  EXPECT_EQ(back.model.rule.kind, ActivationKind::jump_relu);
  EXPECT_EQ(back.model.rule.thresholds, ck.model.rule.thresholds);
}

TEST(Checkpoint, RejectsGarbage) {
  testing::TempDir dir;
  {
    std::ofstream out(dir / "g.ckpt", std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir / "g.ckpt"), ValidationError);
}

TEST(Model, ValidateCatchesBadParameters) {
  auto m = SaeModel::zeros(2, 4, {ActivationKind::batch_topk, 1, {}});
  EXPECT_NO_THROW(m.validate());
  m.decoder_bias(0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(m.validate(), ValidationError);
  auto j = SaeModel::zeros(2, 2, {ActivationKind::jump_relu, 1, {0.1, -0.1}});
  EXPECT_THROW(j.validate(), ValidationError);
}

}  // namespace
}  // namespace audiosae::sae
