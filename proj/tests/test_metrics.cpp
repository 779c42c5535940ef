#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "adapterlab/adapter.hpp"
#include "adapterlab/metrics.hpp"
#include "support.hpp"

using namespace adapterlab;
using testing_support::bit_equal;
using testing_support::random_tensor;
using testing_support::tiny_config;

namespace {

GaussianStats stats_1d(double mu, double sd) {
  GaussianStats g;
  g.mean = Eigen::VectorXd::Constant(1, mu);
  g.cov = Eigen::MatrixXd::Constant(1, 1, sd * sd);
  g.count = 100;
  return g;
}

GaussianStats random_stats(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  GaussianStats g;
  g.mean.resize(static_cast<Eigen::Index>(dim));
  Eigen::MatrixXd a(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) {
    g.mean(static_cast<Eigen::Index>(i)) = rng.normal();
    for (std::size_t j = 0; j < dim; ++j) a(i, j) = rng.normal();
  }
  g.cov = a * a.transpose() / static_cast<double>(dim);
  g.count = 10 * dim;
  return g;
}

double variance(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

struct Fixture {
  UNet model{tiny_config(), 3};
  PromptEncoder encoder{tiny_config().cond_dim, 4};
  NoiseSchedule schedule = NoiseSchedule::linear();
  PersonalizationTask task = [] {
    ClassSpec c;
    c.count = 6;
    return build_personalization_task(5, 8, c);
  }();
};

}  // namespace

TEST(Extractor, DeterministicAndSized) {
  const FeatureExtractor a(7), b(7), c(8);
  const Tensor im = random_tensor({3, 8, 8}, 1, 0.5);
  const auto fa = a.features(im);
  EXPECT_EQ(fa.size(), FeatureExtractor::kDim);
  EXPECT_EQ(fa, b.features(im));
  EXPECT_NE(fa, c.features(im));
  EXPECT_EQ(a.features(std::vector<Tensor>{im, im}).size(), 2u);
  EXPECT_THROW(a.features(random_tensor({3, 6, 6}, 2)), DimensionError);
}

TEST(Similarity, HandTable) {
  // cosines: (1,0)-(0,1) = 0, (1,0)-(1,1) = (1,1)-(0,1) = 1/sqrt2, (1,1)-(1,1) = 1
  const std::vector<std::vector<double>> gen = {{1, 0}, {1, 1}}, ref = {{0, 1}, {1, 1}};
  EXPECT_NEAR(clip_similarity(gen, ref), (1.0 + std::sqrt(2.0)) / 4.0, 1e-15);
}

TEST(Similarity, IdentityOrthogonalityAndScale) {
  const std::vector<std::vector<double>> one = {{0.3, -2.0, 1.0}};
  EXPECT_NEAR(clip_similarity(one, one), 1.0, 1e-15);
  EXPECT_EQ(clip_similarity({{1, 0, 0}, {0, 2, 0}}, {{0, 0, 5}}), 0.0);
  const std::vector<std::vector<double>> g = {{1, 2, 3}, {-1, 0.5, 2}}, r = {{0.2, -1, 4}};
  const std::vector<std::vector<double>> g_scaled = {{3, 6, 9}, {-0.5, 0.25, 1}};
  EXPECT_NEAR(clip_similarity(g, r), clip_similarity(g_scaled, r), 1e-15);
}

TEST(Similarity, BoundedOnImages) {
  const FeatureExtractor fx(9);
  std::vector<Tensor> a, b;
  for (std::uint64_t i = 0; i < 4; ++i) {
    a.push_back(random_tensor({3, 8, 8}, 10 + i, 0.5));
    b.push_back(random_tensor({3, 8, 8}, 20 + i, 0.5));
  }
  const double s = clip_similarity(a, b, fx);
  EXPECT_GE(s, -1.0);
  EXPECT_LE(s, 1.0);
  EXPECT_NEAR(clip_similarity({a[0]}, {a[0]}, fx), 1.0, 1e-12);
}

TEST(Similarity, Errors) {
  EXPECT_THROW(clip_similarity(std::vector<std::vector<double>>{}, {{1.0}}), DataError);
  EXPECT_THROW(clip_similarity({{0.0, 0.0}}, {{1.0, 0.0}}), DataError);
  EXPECT_THROW(clip_similarity({{1.0, 0.0}}, {{1.0, 0.0, 0.0}}), DimensionError);
}

TEST(GaussianFit, UnbiasedCovariance) {
  const std::vector<std::vector<double>> s = {{1, 2}, {3, 0}, {5, 4}};
  const auto g = GaussianStats::from_samples(s);
  EXPECT_NEAR(g.mean(0), 3.0, 1e-15);
  EXPECT_NEAR(g.mean(1), 2.0, 1e-15);
  // deviations (-2,0), (0,-2), (2,2) over n - 1 = 2
  EXPECT_NEAR(g.cov(0, 0), 4.0, 1e-14);
  EXPECT_NEAR(g.cov(1, 1), 4.0, 1e-14);
  EXPECT_NEAR(g.cov(0, 1), 2.0, 1e-14);
  EXPECT_EQ(g.cov(0, 1), g.cov(1, 0));
  EXPECT_TRUE(g.well_conditioned());
  EXPECT_FALSE(GaussianStats::from_samples({{1, 2, 3}, {0, 1, 1}}).well_conditioned());
  EXPECT_THROW(GaussianStats::from_samples({{1.0}}), DataError);
  EXPECT_THROW(GaussianStats::from_samples({{1.0}, {1.0, 2.0}}), DimensionError);
}

TEST(Frechet, IdenticalStatsGiveZero) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = random_stats(12, seed);
    EXPECT_LE(std::abs(frechet_distance(g, g)), 1e-8);
  }
}

TEST(Frechet, OneDimensionalClosedForm) {
  Rng rng(30);
  for (int k = 0; k < 100; ++k) {
    const double ma = rng.normal(), mb = rng.normal();
    const double sa = rng.uniform(0.01, 3.0), sb = rng.uniform(0.01, 3.0);
    const double expect = (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
    EXPECT_NEAR(frechet_distance(stats_1d(ma, sa), stats_1d(mb, sb)), expect, 1e-8);
  }
}

TEST(Frechet, IsotropicCovarianceCancels) {
  GaussianStats a, b;
  a.mean = Eigen::VectorXd::LinSpaced(6, -1.0, 1.0);
  b.mean = Eigen::VectorXd::Constant(6, 0.25);
  a.cov = b.cov = 0.7 * Eigen::MatrixXd::Identity(6, 6);
  EXPECT_NEAR(frechet_distance(a, b), (a.mean - b.mean).squaredNorm(), 1e-12);
}

TEST(Frechet, SymmetricAndNonnegative) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = random_stats(8, 100 + seed), b = random_stats(8, 200 + seed);
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    EXPECT_NEAR(ab, ba, 1e-8);
    EXPECT_GE(ab, 0.0);
  }
}

TEST(Frechet, Errors) {
  EXPECT_THROW(frechet_distance(random_stats(3, 1), random_stats(4, 2)), DimensionError);
  GaussianStats bad = stats_1d(0.0, 1.0);
  bad.cov(0, 0) = -1.0;
  EXPECT_THROW(frechet_distance(bad, stats_1d(0.0, 1.0)), NumericError);
  // rank-deficient covariances sit within the clamp tolerance
  const auto flat = GaussianStats::from_samples({{1, 1}, {2, 2}, {3, 3}});
  EXPECT_NO_THROW(frechet_distance(flat, flat));
}

TEST(DiffMap, EqualPromptsGiveZero) {
  Fixture f;
  const auto p = model_predictor(f.model, nullptr);
  const Tensor m = noise_diff_map(p, f.schedule, f.encoder, f.task.regularization[0], 500,
                                  "a photo of dog", "a photo of dog", 1);
  EXPECT_EQ(m.shape(), (Shape{8, 8}));
  for (double v : m.data()) EXPECT_EQ(v, 0.0);
}

TEST(DiffMap, DeterministicAndNonnegative) {
  Fixture f;
  const auto p = model_predictor(f.model, nullptr);
  const auto& im = f.task.regularization[1];
  const Tensor a = noise_diff_map(p, f.schedule, f.encoder, im, 300, "a photo of [V] pentagon",
                                  "a photo of pentagon", 2);
  const Tensor b = noise_diff_map(p, f.schedule, f.encoder, im, 300, "a photo of [V] pentagon",
                                  "a photo of pentagon", 2);
  EXPECT_TRUE(bit_equal(a, b));
  double total = 0.0;
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    total += v;
  }
  EXPECT_GT(total, 0.0);
}

TEST(DiffMap, MatchesDirectComputation) {
  Fixture f;
  const auto p = model_predictor(f.model, nullptr);
  const auto& im = f.task.regularization[2];
  const std::string pa = "a photo of [V] pentagon", pb = "a photo of pentagon";
  const Tensor m = noise_diff_map(p, f.schedule, f.encoder, im, 400, pa, pb, 3);
  Rng rng(3);
  const Tensor x_t = q_sample(f.schedule, im, 400, rng.normal_tensor(im.shape()));
  const Tensor ea = p(x_t, 400.0, f.encoder.encode(pa)), eb = p(x_t, 400.0, f.encoder.encode(pb));
  for (std::size_t i = 0; i < 64; ++i) {
    double sq = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) sq += std::pow(ea[ch * 64 + i] - eb[ch * 64 + i], 2);
    EXPECT_NEAR(m[i], std::sqrt(sq), 1e-14);
  }
  const Tensor swapped = noise_diff_map(p, f.schedule, f.encoder, im, 400, pb, pa, 3);
  EXPECT_LT(testing_support::max_abs_diff(m, swapped), 1e-15);
}

TEST(DiffScore, ZeroInitBankEqualsBaseline) {
  Fixture f;
  DiffScoreConfig cfg;
  cfg.max_images = 3;
  cfg.seeds = {0, 1};
  const double base = diff_score(model_predictor(f.model, nullptr), f.schedule, f.encoder, f.task, cfg);
  for (const char* text : {"in=CA_c,out=CA_out,act=identity,s=1,r=2",
                           "in=Res_in,out=Res_out,act=relu,s=1,r=1"}) {
    AdapterBank bank(f.model, DesignPoint::parse(text), 6);
    const double with = diff_score(model_predictor(f.model, &bank), f.schedule, f.encoder, f.task, cfg);
    EXPECT_EQ(with, base) << text;
  }
  EXPECT_GE(base, 0.0);
  cfg.seeds.clear();
  EXPECT_THROW(diff_score(model_predictor(f.model, nullptr), f.schedule, f.encoder, f.task, cfg),
               ConfigError);
}

TEST(DiffScore, MoreSeedsLowerVariance) {
  Fixture f;
  const auto p = model_predictor(f.model, nullptr);
  auto scores = [&](std::size_t per_trial) {
    std::vector<double> out;
    for (std::uint64_t trial = 0; trial < 8; ++trial) {
      DiffScoreConfig cfg;
      cfg.t_set = {600};
      cfg.max_images = 2;
      cfg.seeds.clear();
      for (std::size_t k = 0; k < per_trial; ++k) cfg.seeds.push_back(1000 * trial + k);
      out.push_back(diff_score(p, f.schedule, f.encoder, f.task, cfg));
    }
    return out;
  };
  EXPECT_LT(variance(scores(10)), variance(scores(2)));
}
