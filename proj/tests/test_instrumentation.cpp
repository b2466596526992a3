#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dypo/instrumentation.hpp"
#include "dypo/trainer.hpp"
#include "test_util.hpp"

using namespace dypo;
using namespace dypo::testing;

namespace {

SparseGradient fixed_vector() {
  SparseGradient v(4);
  auto r = v.row({1, 0});
  r[0] = 1.5;
  r[2] = -2.0;
  v.row({1, 3})[1] = 0.5;
  return v;
}

TEST(Variance, ConstantSamplerIsZero) {
  const auto v = fixed_vector();
  Rng rng(1);
  const auto est = estimate_variance([&](Rng&) { return v; }, 100, rng);
  EXPECT_NEAR(est.scalar_variance, 0.0, 1e-24);
  EXPECT_EQ(est.sample_count, 100u);
}

TEST(Variance, TwoPointDistribution) {
  const auto v = fixed_vector();
  Rng rng(2);
  const auto est = estimate_variance([&](Rng& r) { return scaled(v, uniform_index(r, 2) ? 1.0 : -1.0); }, 10000, rng);
  EXPECT_NEAR(est.scalar_variance, v.squared_norm(), 3.0 * est.standard_error + 1e-12);
  EXPECT_GT(est.standard_error, 0.0);
}

TEST(Variance, Preconditions) {
  Rng rng(3);
  EXPECT_THROW(estimate_variance([](Rng&) { return SparseGradient(4); }, 29, rng), InputError);
  std::vector<SparseGradient> bad(5, fixed_vector());
  bad[2].row({1, 0})[0] = std::nan("");
  EXPECT_THROW(estimate_variance_from_samples(bad), DataError);
}

TEST(Variance, OrderInvariantAndRootNRate) {
  Rng rng(4);
  std::normal_distribution<double> n;
  std::vector<SparseGradient> samples;
  for (int i = 0; i < 4000; ++i) {
    SparseGradient g(4);
    for (double& x : g.row({2, 1})) x = n(rng);
    samples.push_back(g);
  }
  const auto a = estimate_variance_from_samples(samples);
  auto shuffled = samples;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto b = estimate_variance_from_samples(shuffled);
  EXPECT_NEAR(a.scalar_variance, b.scalar_variance, 1e-12 * a.scalar_variance);
  EXPECT_NEAR(a.scalar_variance, 4.0, 4.0 * a.standard_error);
  const auto quarter = estimate_variance_from_samples(std::span<const SparseGradient>(samples).first(1000));
  const double ratio = quarter.standard_error / a.standard_error;
  EXPECT_GT(ratio, 1.6);
  EXPECT_LT(ratio, 2.5);
}

TEST(ScoreVariance, UniformSingleStepIsExact) {
  PolicyParams p(small_shape(1));
  Rng rng(5);
  const auto e = estimate_score_variance(p, 7, 100, rng);
  EXPECT_NEAR(e.value, 0.75, 1e-12);
}

TEST(ScoreVariance, NearDeterministicVanishes) {
  PolicyParams p(small_shape(1));
  p.mutable_logits({7, 4})[1] = 40.0;
  Rng rng(6);
  EXPECT_LT(estimate_score_variance(p, 7, 100, rng).value, 1e-12);
}

TEST(ScoreVariance, EnumerationMatchesClosedForm) {
  Rng rng(7);
  for (std::size_t vocab = 2; vocab <= 8; ++vocab) {
    const PolicyShape shape{vocab, 1, static_cast<Token>(vocab - 1), 1};
    const auto p = random_policy(shape, 3, 2.0, rng);
    const auto probs = p.probabilities({3, vocab});
    double enumerated = 0.0, closed = 0.0, sum_sq = 0.0;
    for (double q : probs) sum_sq += q * q;
    for (Token a = 0; a < vocab; ++a) {
      enumerated += probs[a] * score(p, 3, Trajectory{{a}, a == vocab - 1}).squared_norm();
      closed += probs[a] * (sum_sq - probs[a] * probs[a] + (1 - probs[a]) * (1 - probs[a]));
    }
    EXPECT_NEAR(enumerated, closed, 1e-12);
  }
}

TEST(ScoreVariance, StableAcrossSeeds) {
  Rng r0(8);
  const auto p = random_policy(small_shape(4), 3, 1.0, r0);
  Rng a(1), b(2);
  const auto ea = estimate_score_variance(p, 3, 20000, a), eb = estimate_score_variance(p, 3, 20000, b);
  EXPECT_NEAR(ea.value, eb.value, 3.0 * std::hypot(ea.standard_error, eb.standard_error));
}

TEST(Eta, AuxMatchesIndependentRecomputation) {
  const ArithmeticTask task;
  Rng rng(9);
  const auto q = task.generate_query(3, rng);
  const auto ctx = detail::all_contexts(task.policy_shape(), q.id);
  const auto p = detail::random_params(task.policy_shape(), ctx, 1.0, rng);
  const ReferencePolicy ref(detail::perturbed(p, 0.5, rng));
  GroupRollout g;
  g.query = q;
  g.trajectories = sample_group(p, q.id, 8, rng);
  g.rewards = {1, 0, 0, 1, 0, 1, 0, 0};
  const auto pairs = build_pairs(g, 64, rng);
  MixConfig cfg;
  cfg.beta_gal = 0.7;
  double eta = 0.0;
  for (const auto& pr : pairs) {
    const double d = log_prob(p, q.id, pr.success) - log_prob(ref.params(), q.id, pr.success) -
                     log_prob(p, q.id, pr.failure) + log_prob(ref.params(), q.id, pr.failure);
    const double w = 1.0 - 1.0 / (1.0 + std::exp(-0.7 * d));
    eta += w * w;
  }
  EXPECT_NEAR(gal_loss_grad(p, ref, pairs, q, cfg).aux.at("eta_contribution"), eta / pairs.size(), 1e-15);
}

TEST(VarianceBench, NearOneAlphaTracksGrpo) {
  TrainConfig cfg;
  Trainer t(cfg);
  MixConfig mix = cfg.mix;
  mix.alpha = 0.999;
  Rng rng(10);
  const auto rep = variance_ordering_bench(t.params(), t.reference(), t.task(), t.pool(), mix, cfg.k, 2000, rng);
  const double ratio = rep.mix.scalar_variance / rep.grpo.scalar_variance;
  EXPECT_GE(ratio, 0.95);
  EXPECT_LE(ratio, 1.05);
  EXPECT_EQ(rep.mid_groups, 2000u);
  EXPECT_GT(rep.eta, 0.0);
  EXPECT_LT(rep.eta, 1.0);
}

TEST(VarianceBench, Preconditions) {
  TrainConfig cfg;
  Trainer t(cfg);
  Rng rng(11);
  EXPECT_THROW(variance_ordering_bench(t.params(), t.reference(), t.task(), std::span<const Query>{}, cfg.mix, 8, 10,
                                       rng),
               InputError);
  EXPECT_THROW(variance_ordering_bench(t.params(), t.reference(), t.task(), t.pool(), cfg.mix, 8, 10, rng, 5),
               BenchError);
}

TEST(GrpoVariance, DoublingGroupSizeHalvesVariance) {
  TrainConfig cfg;
  Trainer t(cfg);
  // The L=3 queries sit closest to a success rate of one half under the prior.
  const Query* q = nullptr;
  for (const auto& c : t.pool())
    if (c.chain_length == 3) q = &c;
  ASSERT_NE(q, nullptr);
  Rng rng(12);
  const auto v8 = grpo_variance(t.params(), t.task(), *q, 8, 10000, cfg.mix.xi, false, rng);
  const auto v16 = grpo_variance(t.params(), t.task(), *q, 16, 10000, cfg.mix.xi, false, rng);
  const double ratio = v8.scalar_variance / v16.scalar_variance;
  EXPECT_GT(ratio, 1.8);
  EXPECT_LT(ratio, 2.2);
}

TEST(BiasLaw, ReproducesBothEndpoints) {
  const auto cfg = BiasTestbedConfig::isotropic(8, 1.0, 1.0);
  const std::vector<std::size_t> ms{1, 2, 4, 8, 16};
  Rng rng(13);
  const auto rep = bias_law_bench(cfg, ms, 100000, rng);
  ASSERT_EQ(rep.rows.size(), 5u);
  EXPECT_NEAR(rep.rows[0].mean_squared_bias, 2.0, 0.02 * 2.0);
  EXPECT_TRUE(rep.strictly_decreasing());
  EXPECT_NEAR(rep.slope, -1.0, 0.1);
  for (const auto& r : rep.rows) EXPECT_NEAR(r.mean_squared_bias, r.analytic, 0.05 * r.analytic);
}

TEST(BiasLaw, Preconditions) {
  const auto cfg = BiasTestbedConfig::isotropic(8, 1.0, 1.0);
  Rng rng(14);
  EXPECT_THROW(bias_law_bench(cfg, std::vector<std::size_t>{}, 100000, rng), InputError);
  EXPECT_THROW(bias_law_bench(cfg, std::vector<std::size_t>{1}, 9999, rng), InputError);
}

std::vector<StepMetrics> sample_rows() {
  std::vector<StepMetrics> rows;
  for (std::size_t i = 0; i < 5; ++i) {
    StepMetrics m;
    m.step = i;
    m.mean_reward = 0.1 * i + 1.0 / 3.0;
    m.easy = i;
    m.hard = 4 - i;
    m.mid = 2;
    m.offline_ratio = static_cast<double>(m.hard) / 6.0;
    m.mean_entropy = std::exp(-static_cast<double>(i));
    m.grad_norm = std::sqrt(2.0) * i;
    m.eta = 1e-17 * i;
    m.kl = 0.1 + 1e-300;
    rows.push_back(m);
  }
  return rows;
}

TEST(MetricsCsv, EmptyIsHeaderOnly) {
  EXPECT_EQ(metrics_to_csv({}), std::string(kMetricsHeader) + "\n");
  EXPECT_TRUE(parse_metrics_csv(metrics_to_csv({})).empty());
}

TEST(MetricsCsv, RoundTripIsExact) {
  const auto rows = sample_rows();
  const auto dir = std::filesystem::temp_directory_path() / "dypo_metrics_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "metrics.csv").string();
  write_metrics(path, rows);
  const auto back = read_metrics(path);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].step, rows[i].step);
    EXPECT_EQ(back[i].mean_reward, rows[i].mean_reward);
    EXPECT_EQ(back[i].offline_ratio, rows[i].offline_ratio);
    EXPECT_EQ(back[i].mean_entropy, rows[i].mean_entropy);
    EXPECT_EQ(back[i].grad_norm, rows[i].grad_norm);
    EXPECT_EQ(back[i].easy, rows[i].easy);
    EXPECT_EQ(back[i].hard, rows[i].hard);
    EXPECT_EQ(back[i].mid, rows[i].mid);
    EXPECT_EQ(back[i].eta, rows[i].eta);
    EXPECT_EQ(back[i].kl, rows[i].kl);
    EXPECT_GE(back[i].offline_ratio, 0.0);
    EXPECT_LE(back[i].offline_ratio, 1.0);
  }
  std::filesystem::remove_all(dir);
}

TEST(MetricsCsv, Errors) {
  EXPECT_THROW(write_metrics("/nonexistent-dir/x/metrics.csv", sample_rows()), IoError);
  EXPECT_THROW(parse_metrics_csv("wrong,header\n"), DataError);
  EXPECT_THROW(parse_metrics_csv(std::string(kMetricsHeader) + "\n1,2,3\n"), DataError);
}

TEST(Dynamics, SummaryOfSyntheticCurve) {
  std::vector<StepMetrics> rows(200);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].step = i;
    rows[i].offline_ratio = i < 100 ? 0.5 : 0.1;
    rows[i].mean_reward = static_cast<double>(i) / 200.0;
    rows[i].mean_entropy = 1.0;
    rows[i].grad_norm = (i % 2) ? 1.0 : 3.0;
  }
  const auto s = summarize_dynamics(rows);
  EXPECT_EQ(s.steps, 200u);
  EXPECT_NEAR(s.offline_first10, 0.5, 1e-12);
  EXPECT_NEAR(s.offline_last100, 0.1, 1e-12);
  EXPECT_NEAR(s.offline_first_quarter, 0.5, 1e-12);
  EXPECT_NEAR(s.offline_final_quarter, 0.1, 1e-12);
  EXPECT_DOUBLE_EQ(s.entropy_final_quarter, 1.0);
  EXPECT_LT(s.reward_first_quarter, s.reward_final_quarter);
  // Alternating +-2 steps.
  EXPECT_NEAR(s.grad_norm_step_std, 2.0 * std::sqrt(100.0 / 99.0), 1e-12);
  EXPECT_EQ(summarize_dynamics({}).steps, 0u);
}

}  // namespace
