#include "audiosae/feature_stats.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "test_util.hpp"

namespace audiosae::features {
namespace {

using Bool = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense features x items boolean matrix from a sparse one.
Bool dense(const FeatureActivationMatrix& m) {
  Bool out = Bool::Constant(static_cast<Eigen::Index>(m.feature_count()), static_cast<Eigen::Index>(m.item_count), false);
  for (std::size_t f = 0; f < m.feature_count(); ++f) {
    for (auto i : m.active[f]) out(static_cast<Eigen::Index>(f), i) = true;
  }
  return out;
}

double brute_iou(const Bool& a, Eigen::Index i, const Bool& b, Eigen::Index j) {
  int inter = 0, uni = 0;
  for (Eigen::Index t = 0; t < a.cols(); ++t) {
    inter += a(i, t) && b(j, t);
    uni += a(i, t) || b(j, t);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

std::vector<std::size_t> brute_coverage(const Bool& a, const Bool& b, double theta, bool same) {
  std::vector<std::size_t> out;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      if (same && i == j) continue;
      if (brute_iou(a, i, b, j) > theta) {
        out.push_back(static_cast<std::size_t>(i));
        break;
      }
    }
  }
  return out;
}

FeatureActivationMatrix random_activation(std::size_t features, std::size_t items, double density,
                                          std::mt19937_64& rng) {
  std::bernoulli_distribution on(density);
  MatrixF codes = MatrixF::Zero(static_cast<Eigen::Index>(items), static_cast<Eigen::Index>(features));
  for (Eigen::Index i = 0; i < codes.size(); ++i) codes.data()[i] = on(rng) ? 1.0f : 0.0f;
  return binarize(codes, 0.0);
}

FeatureActivationMatrix from_sets(std::size_t items, std::vector<std::vector<std::uint32_t>> sets) {
  FeatureActivationMatrix m;
  m.item_count = items;
  m.active = std::move(sets);
  return m;
}

TEST(Binarize, Cases) {
  MatrixF v(1, 2);
  v << 0.05f, 0.15f;
  const auto dense_mask = binarize_dense(v, 0.1);
  EXPECT_FALSE(dense_mask(0, 0));
  EXPECT_TRUE(dense_mask(0, 1));
  EXPECT_FALSE(binarize_dense(MatrixF::Zero(3, 3), 0.0).any());
  const auto m = binarize(v, 0.1);
  EXPECT_EQ(m.item_count, 1u);
  EXPECT_TRUE(m.active[0].empty());
  EXPECT_EQ(m.active[1], std::vector<std::uint32_t>{0});
  EXPECT_THROW(binarize(v, -0.1), ValidationError);
}

TEST(Iou, Cases) {
  const std::vector<std::uint32_t> a{1, 2, 3}, b{2, 3, 4}, c{7, 8}, none{};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, c), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 0.5);
  EXPECT_DOUBLE_EQ(iou(none, none), 0.0);
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937_64 rng(1);
  const auto m = random_activation(30, 40, 0.3, rng);
  for (std::size_t i = 0; i < 30; ++i) {
    for (std::size_t j = 0; j < 30; ++j) {
      const double x = iou(m.active[i], m.active[j]);
      EXPECT_EQ(x, iou(m.active[j], m.active[i]));
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(Coverage, SelfCoverageCountsActiveFeatures) {
  std::mt19937_64 rng(2);
  auto m = random_activation(20, 50, 0.2, rng);
  m.active[3].clear();
  const auto c = coverage(m, m);
  EXPECT_EQ(c.count, m.alive_count());
  EXPECT_DOUBLE_EQ(c.fraction_of_alive(), 1.0);
}

TEST(Coverage, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dens(0.05, 0.6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_activation(5, 20, dens(rng), rng);
    const auto b = random_activation(7, 20, dens(rng), rng);
    for (double theta : {0.0, 0.3, 0.5}) {
      EXPECT_EQ(coverage(a, b, theta).indices, brute_coverage(dense(a), dense(b), theta, false));
    }
  }
}

TEST(Coverage, MonotoneInB) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = random_activation(15, 30, 0.3, rng);
    auto b = random_activation(4, 30, 0.3, rng);
    std::size_t last = coverage(a, b).count;
    for (int add = 0; add < 6; ++add) {
      b.active.push_back(random_activation(1, 30, 0.3, rng).active[0]);
      const std::size_t now = coverage(a, b).count;
      EXPECT_GE(now, last);
      last = now;
    }
  }
}

TEST(Coverage, ItemAxisMismatch) {
  const auto a = from_sets(10, {{1}});
  const auto b = from_sets(11, {{1}});
  EXPECT_THROW(coverage(a, b), ShapeError);
}

TEST(Duplicates, Cases) {
  const auto disjoint = from_sets(10, {{0, 1}, {2, 3}, {4}});
  EXPECT_EQ(duplicates(disjoint).count, 0u);
  const auto twins = from_sets(10, {{0, 1, 2}, {5}, {0, 1, 2}});
  const auto d = duplicates(twins);
  EXPECT_EQ(d.count, 2u);
  EXPECT_EQ(d.indices, (std::vector<std::size_t>{0, 2}));
}

TEST(Duplicates, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_activation(20, 50, 0.4, rng);
    EXPECT_EQ(duplicates(a, 0.3).indices, brute_coverage(dense(a), dense(a), 0.3, true));
  }
}

TEST(Pooling, AudioLevelIsOrOfFrames) {
  std::mt19937_64 rng(6);
  const auto frames = random_activation(12, 40, 0.1, rng);
  const std::vector<FrameRange> audios{{0, 7}, {7, 20}, {20, 21}, {21, 40}};
  const auto pooled = pool_audios(frames, audios);
  EXPECT_EQ(pooled.level, Level::audio);
  EXPECT_EQ(pooled.item_count, 4u);
  for (std::size_t f = 0; f < 12; ++f) {
    for (std::size_t a = 0; a < audios.size(); ++a) {
      bool any = false;
      for (std::size_t t = audios[a].start; t < audios[a].end; ++t) any = any || frames.get(f, t);
      EXPECT_EQ(pooled.get(f, a), any);
    }
  }
}

TEST(Pooling, CoarserFrameGrid) {
  const auto fine = from_sets(8, {{0, 1, 5}, {7}});
  const auto coarse = pool_to_rate(fine, 100.0, 50.0, 4);
  EXPECT_EQ(coarse.active[0], (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(coarse.active[1], (std::vector<std::uint32_t>{3}));
}

TEST(DomainFrequencies, Counting) {
  // 10 audios of 5 frames; feature 0 fires everywhere, feature 1 on one frame,
  // feature 2 never
  MatrixF codes = MatrixF::Zero(50, 3);
  codes.col(0).setConstant(2.0f);
  codes(12, 1) = 0.5f;
  std::vector<FrameRange> audios;
  for (std::size_t a = 0; a < 10; ++a) audios.push_back({a * 5, a * 5 + 5});
  const std::vector<DomainCodes> doms{{"speech", codes, audios}};
  const auto f = domain_frequencies(doms);
  EXPECT_DOUBLE_EQ(f.frame(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(f.audio(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(f.frame(1, 0), 1.0 / 50);
  EXPECT_DOUBLE_EQ(f.audio(1, 0), 0.1);
  EXPECT_DOUBLE_EQ(f.frame(2, 0), 0.0);
  EXPECT_DOUBLE_EQ(f.mean_value(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(f.mean_value(1, 0), 0.5);

  const std::vector<DomainCodes> empty{{"music", MatrixF(0, 3), {}}};
  EXPECT_THROW(domain_frequencies(empty), ValidationError);
}

TEST(AssignDomains, WorkedExamples) {
  MatrixD f(3, 3);
  f << 0.3, 0.05, 0.02,  //
      0.0, 0.0, 0.0,     //
      0.10, 0.09, 0.08;
  const std::vector<std::string> combo{"speech", "sounds", "music"};
  const auto a = assign_domains(f, combo, kFrameThresholds);
  EXPECT_EQ(a.label[0], "speech");
  EXPECT_EQ(a.confidence[0], 0);
  EXPECT_EQ(a.color[0], base_color("speech"));
  EXPECT_EQ(a.label[1], "dead");
  EXPECT_EQ(a.label[2], "unassigned");
  EXPECT_EQ(a.confidence[2], -1);
  EXPECT_THROW(assign_domains(MatrixD(3, 0), {}, kFrameThresholds), ValidationError);
}

TEST(AssignDomains, ConfidenceDimsColor) {
  MatrixD f(2, 2);
  f << 0.15, 0.0,  //
      0.0, 0.05;
  const auto a = assign_domains(f, {"speech", "music"}, kFrameThresholds);
  EXPECT_EQ(a.confidence[0], 1);
  EXPECT_EQ(a.label[1], "music");
  EXPECT_EQ(a.confidence[1], 2);
  const auto base = base_color("music");
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(a.color[1][c], base[c] * 0.6, 1e-12);
}

TEST(AssignDomains, EqualMarginOnTheBoundaryAssigns) {
  MatrixD f(1, 2);
  f << 0.3, 0.1;  // margin 0.2 up to rounding
  EXPECT_EQ(assign_domains(f, {"speech", "sounds"}, kFrameThresholds).confidence[0], 0);
}

TEST(AssignDomains, InvariantToDomainOrder) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 0.4);
  MatrixD f(200, 3);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = u(rng);
  f.row(5).setZero();
  f.row(6) << 0.2, 0.2, 0.0;  // tie is unassigned in every order
  std::vector<std::string> combo{"speech", "sounds", "music"};
  std::vector<int> perm{0, 1, 2};
  const auto ref = assign_domains(f, combo, kFrameThresholds);
  EXPECT_EQ(ref.label[6], "unassigned");
  while (std::next_permutation(perm.begin(), perm.end())) {
    MatrixD g(f.rows(), 3);
    std::vector<std::string> c2;
    for (int c = 0; c < 3; ++c) {
      g.col(c) = f.col(perm[c]);
      c2.push_back(combo[perm[c]]);
    }
    const auto other = assign_domains(g, c2, kFrameThresholds);
    EXPECT_EQ(other.label, ref.label);
    EXPECT_EQ(other.confidence, ref.confidence);
  }
}

TEST(AssignDomains, AggregationFillsUnassigned) {
  const std::vector<std::string> all{"speech", "sounds", "music"};
  // feature 0 speech-only, feature 1 speech+sounds but not music, feature 2 dead
  MatrixD f(3, 3);
  f << 0.5, 0.0, 0.0,  //
      0.3, 0.3, 0.0,   //
      0.0, 0.0, 0.0;
  DomainFrequencies freqs;
  freqs.domains = all;
  freqs.frame = f;
  freqs.audio = f;
  freqs.mean_value = f;
  const auto three = assign_domains(freqs, Level::frame, all, kFrameThresholds);
  EXPECT_EQ(three.label[1], "unassigned");
  std::vector<DomainAssignment> pairs;
  for (const auto& combo : domain_combinations(all)) {
    if (combo.size() == 2) pairs.push_back(assign_domains(freqs, Level::frame, combo, kFrameThresholds));
  }
  ASSERT_EQ(pairs.size(), 3u);
  const auto final = aggregate_assignments(three, pairs);
  EXPECT_EQ(final.label[0], "speech");
  EXPECT_EQ(final.source[0], "speech+sounds+music");
  // [speech, music] puts feature 1 on speech; [speech, sounds] leaves it unassigned
  EXPECT_EQ(final.label[1], "speech");
  EXPECT_EQ(final.source[1], "speech+music");
  EXPECT_EQ(final.label[2], "dead");
}

TEST(DomainCombinations, Order) {
  const auto c = domain_combinations({"speech", "sounds", "music"});
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[0], (std::vector<std::string>{"speech", "sounds", "music"}));
  EXPECT_EQ(c[1], (std::vector<std::string>{"speech", "sounds"}));
  EXPECT_EQ(c[2], (std::vector<std::string>{"speech", "music"}));
  EXPECT_EQ(c[3], (std::vector<std::string>{"sounds", "music"}));
}

TEST(Venn, Cases) {
  const FeatureSets disjoint{{"speech", {0}}, {"sounds", {1}}, {"music", {2}}};
  const auto v = venn_counts(disjoint);
  for (const auto& [k, n] : v.intersections) EXPECT_EQ(n, 0u) << k;
  EXPECT_EQ(v.exclusive.at("music"), 1u);

  const FeatureSets subset{{"speech", {}}, {"sounds", {1, 2}}, {"music", {1, 2, 3, 4}}};
  const auto s = venn_counts(subset);
  EXPECT_EQ(s.intersections.at("music&sounds"), s.sizes.at("sounds"));
  EXPECT_EQ(s.exclusive.at("music"), 2u);
}

TEST(Venn, MatchesSetOracle) {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution in(0.3);
  for (int trial = 0; trial < 50; ++trial) {
    std::set<std::size_t> sp, so, mu;
    for (std::size_t f = 0; f < 60; ++f) {
      if (in(rng)) sp.insert(f);
      if (in(rng)) so.insert(f);
      if (in(rng)) mu.insert(f);
    }
    const FeatureSets sets{{"speech", {sp.begin(), sp.end()}}, {"sounds", {so.begin(), so.end()}},
                           {"music", {mu.begin(), mu.end()}}};
    const auto v = venn_counts(sets);
    auto inter = [](const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
      std::set<std::size_t> out;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.begin()));
      return out;
    };
    EXPECT_EQ(v.sizes.at("speech"), sp.size());
    EXPECT_EQ(v.intersections.at("music&sounds"), inter(mu, so).size());
    EXPECT_EQ(v.intersections.at("music&speech"), inter(mu, sp).size());
    EXPECT_EQ(v.intersections.at("sounds&speech"), inter(so, sp).size());
    EXPECT_EQ(v.intersections.at("music&sounds&speech"), inter(inter(mu, so), sp).size());
    std::size_t only_music = 0;
    for (auto f : mu) only_music += !so.count(f) && !sp.count(f);
    EXPECT_EQ(v.exclusive.at("music"), only_music);
  }
}

TEST(LayerRatio, Counting) {
  std::vector<std::size_t> music(20);
  std::iota(music.begin(), music.end(), std::size_t{0});
  const std::vector<FeatureSets> layers{{{"speech", {}}, {"sounds", {}}, {"music", {}}},
                                        {{"speech", {50}}, {"sounds", {50}}, {"music", music}}};
  const auto r = layer_specialization_ratio(layers, 100);
  EXPECT_EQ(r[0].at("music"), 0.0);
  EXPECT_EQ(r[0].at("speech"), 0.0);
  EXPECT_DOUBLE_EQ(r[1].at("music"), 0.20);
  EXPECT_EQ(r[1].at("speech"), 0.0);
}

TEST(Reports, CoverageJsonRoundTrip) {
  CoverageResult c;
  c.count = 3164;
  c.alive = 6000;
  c.indices = {1, 2, 3};
  const auto j = coverage_report({"hubert", "hubert2", "12", "audioset", 0.5}, c, 6144);
  EXPECT_EQ(j.at("covered"), 3164);
  EXPECT_EQ(j.at("features"), 6144);
  EXPECT_EQ(nlohmann::json::parse(j.dump()), j);
}

}  // namespace
}  // namespace audiosae::features
