#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "dypo/gradcheck.hpp"
#include "dypo/objectives.hpp"

using namespace dypo;

namespace {

struct Fixture {
  ArithmeticTask task;
  Query query;
  PolicyParams params;
  ReferencePolicy ref;

  explicit Fixture(std::uint64_t seed, std::size_t chain = 3) {
    Rng rng(seed);
    query = task.generate_query(chain, rng);
    const auto ctx = detail::all_contexts(task.policy_shape(), query.id);
    params = detail::random_params(task.policy_shape(), ctx, 1.0, rng);
    ref = ReferencePolicy(detail::perturbed(params, 0.3, rng));
  }

  GroupRollout group(std::vector<RewardValue> rewards, Rng& rng) const {
    GroupRollout g;
    g.query = query;
    g.trajectories = sample_group(params, query.id, rewards.size(), rng);
    g.rewards = std::move(rewards);
    for (const auto& t : g.trajectories) g.behavior_log_probs.push_back(step_log_probs(params, query.id, t));
    return g;
  }
};

double max_abs_diff(const SparseGradient& a, const SparseGradient& b) { return std::sqrt(squared_distance(a, b)); }

TEST(Standardize, Examples) {
  for (double a : standardize_advantages(std::vector<double>{1, 1, 1, 1}, 1e-4)) EXPECT_EQ(a, 0.0);
  const auto adv = standardize_advantages(std::vector<double>{1, 0, 1, 0}, 1e-4);
  const double v = 0.5 / (0.5 + 1e-4);
  EXPECT_NEAR(adv[0], v, 1e-15);
  EXPECT_NEAR(adv[1], -v, 1e-15);
  EXPECT_NEAR(v, 0.99980, 1e-5);
  EXPECT_THROW(standardize_advantages(std::vector<double>{1}, 1e-4), InputError);
}

TEST(Standardize, RandomGroupsHaveZeroMeanAndShrunkStd) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> r(2 + uniform_index(rng, 15));
    for (auto& x : r) x = static_cast<double>(uniform_index(rng, 2));
    double mu = 0, var = 0;
    for (double x : r) mu += x;
    mu /= r.size();
    for (double x : r) var += (x - mu) * (x - mu);
    const double sigma = std::sqrt(var / r.size());
    const auto adv = standardize_advantages(r, 1e-4);
    double m = 0, s = 0;
    for (double a : adv) m += a;
    m /= adv.size();
    for (double a : adv) s += (a - m) * (a - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(s / adv.size()), sigma / (sigma + 1e-4), 1e-9);
  }
}

TEST(Sft, SingleTeacherIsPlainNll) {
  Fixture f(2);
  const auto teachers = make_teachers(1, f.task.family(), 17);
  Rng rng(3);
  const auto rep = sft_loss_grad(f.params, f.task, f.query, teachers, rng);
  EXPECT_NEAR(rep.loss, -log_prob(f.params, f.query.id, f.query.ground_truth), 1e-12);
  EXPECT_EQ(max_abs_diff(rep.gradient, scaled(score(f.params, f.query.id, f.query.ground_truth), -1.0)), 0.0);
  EXPECT_EQ(rep.aux.at("teacher_index"), 0.0);
}

TEST(Sft, TeacherChoiceIsUniform) {
  Fixture f(4);
  const auto teachers = make_teachers(4, f.task.family(), 17);
  Rng rng(5);
  std::vector<int> hist(4, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    ++hist[static_cast<int>(sft_loss_grad(f.params, f.task, f.query, teachers, rng).aux.at("teacher_index"))];
  for (int h : hist) EXPECT_NEAR(static_cast<double>(h) / n, 0.25, 0.01);
  EXPECT_THROW(sft_loss_grad(f.params, f.task, f.query, std::span<const TeacherOracle>{}, rng), ConfigError);
}

GradCheckConfig small_check() {
  GradCheckConfig c;
  c.instances = 25;
  return c;
}

TEST(GradCheck, SftMatchesFiniteDifferences) { EXPECT_LT(check_sft_gradient(small_check()).max_rel_error, 1e-6); }
TEST(GradCheck, GrpoMatchesFiniteDifferences) { EXPECT_LT(check_grpo_gradient(small_check()).max_rel_error, 1e-6); }
TEST(GradCheck, GalMatchesFiniteDifferences) { EXPECT_LT(check_gal_gradient(small_check()).max_rel_error, 1e-6); }
TEST(GradCheck, DypoMatchesFiniteDifferences) { EXPECT_LT(check_dypo_gradient(small_check()).max_rel_error, 1e-6); }

TEST(Grpo, OnPolicyLossIsZero) {
  Fixture f(6);
  Rng rng(7);
  auto g = f.group({1, 0, 0, 1, 1, 0, 0, 0}, rng);
  populate_advantages(g, 1e-4);
  const ReferencePolicy same(f.params);
  for (auto anchor : {RatioAnchor::kBehavior, RatioAnchor::kReference})
    for (auto level : {RatioLevel::kToken, RatioLevel::kTrajectory}) {
      MixConfig cfg;
      cfg.ratio_anchor = anchor;
      cfg.ratio_level = level;
      const auto rep = grpo_loss_grad(f.params, same, g, cfg);
      EXPECT_NEAR(rep.loss, 0.0, 1e-12);
      EXPECT_NEAR(rep.aux.at("mean_ratio"), 1.0, 1e-12);
      EXPECT_EQ(rep.aux.at("kl_value"), 0.0);
    }
}

TEST(Grpo, ZeroAdvantageGivesOnlyKlGradient) {
  Fixture f(8);
  Rng rng(9);
  auto g = f.group({1, 1, 1, 1}, rng);
  populate_advantages(g, 1e-4);
  MixConfig cfg;
  cfg.beta_kl = 0.0;
  EXPECT_EQ(grpo_loss_grad(f.params, f.ref, g, cfg).gradient.norm(), 0.0);
  cfg.beta_kl = 0.05;
  const auto contexts = visited_contexts(f.params.shape(), f.query.id, g.trajectories);
  const auto rep = grpo_loss_grad(f.params, f.ref, g, cfg);
  EXPECT_NEAR(max_abs_diff(rep.gradient, scaled(kl_gradient(f.params, f.ref, contexts), 0.05)), 0.0, 1e-15);
}

TEST(Grpo, RequiresAdvantages) {
  Fixture f(10);
  Rng rng(11);
  auto g = f.group({1, 0, 1, 0}, rng);
  EXPECT_THROW(grpo_loss_grad(f.params, f.ref, g, MixConfig{}), StateError);
  EXPECT_THROW(grpo_policy_gradient(f.params, g), StateError);
}

TEST(Grpo, ClippingCountsAndFreezesGradient) {
  Fixture f(12);
  Rng rng(13);
  auto g = f.group({1, 0, 0, 0}, rng);
  populate_advantages(g, 1e-4);
  // Shift the behavior log-probs so every ratio is e^1 > 1 + eps: the positive advantage is clipped.
  for (auto& lp : g.behavior_log_probs)
    for (auto& x : lp) x -= 1.0;
  MixConfig cfg;
  cfg.beta_kl = 0.0;
  const auto rep = grpo_loss_grad(f.params, f.ref, g, cfg);
  EXPECT_NEAR(rep.aux.at("clip_fraction"), 1.0 * g.trajectories[0].size() /
                                               (g.trajectories[0].size() + g.trajectories[1].size() +
                                                g.trajectories[2].size() + g.trajectories[3].size()),
              1e-12);
  // Only the three failures carry gradient.
  SparseGradient expect(f.params.vocab());
  for (std::size_t i = 1; i < 4; ++i) {
    const auto& tr = g.trajectories[i];
    const double w = -0.25 / tr.size() * (*g.advantages)[i] * std::exp(1.0);
    for (std::size_t t = 0; t < tr.size(); ++t)
      accumulate_step_score(f.params, context_at(f.params.shape(), f.query.id, tr.tokens, t), tr.tokens[t], w, expect);
  }
  EXPECT_LT(max_abs_diff(rep.gradient, expect), 1e-12);
}

TEST(GrpoPolicyGradient, TermByTerm) {
  Fixture f(14);
  Rng rng(15);
  auto g = f.group({1, 0, 1, 1, 0, 0}, rng);
  populate_advantages(g, 1e-4);
  SparseGradient expect(f.params.vocab());
  for (std::size_t i = 0; i < g.size(); ++i)
    expect.add_scaled(score(f.params, f.query.id, g.trajectories[i]), (*g.advantages)[i] / g.size());
  EXPECT_LT(max_abs_diff(grpo_policy_gradient(f.params, g), expect), 1e-14);

  auto flat = f.group({0, 0, 0, 0}, rng);
  populate_advantages(flat, 1e-4);
  EXPECT_EQ(grpo_policy_gradient(f.params, flat).norm(), 0.0);
}

TEST(Gal, SymmetricStart) {
  Fixture f(16);
  Rng rng(17);
  auto g = f.group({1, 0, 1, 0}, rng);
  const auto pairs = build_pairs(g, 64, rng);
  const ReferencePolicy same(f.params);
  const auto rep = gal_loss_grad(f.params, same, pairs, f.query, MixConfig{});
  EXPECT_NEAR(rep.loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(rep.aux.at("mean_weight"), 0.5, 1e-12);
  EXPECT_NEAR(rep.aux.at("eta_contribution"), 0.25, 1e-12);
  EXPECT_EQ(rep.aux.at("pair_count"), 4.0);
}

TEST(Gal, Errors) {
  Fixture f(18);
  Rng rng(19);
  auto g = f.group({1, 0, 1, 0}, rng);
  EXPECT_THROW(gal_loss_grad(f.params, f.ref, std::vector<PreferencePair>{}, f.query, MixConfig{}), InputError);
  std::vector<PreferencePair> bad{{g.trajectories[1], g.trajectories[0], 0, 1}};
  EXPECT_THROW(gal_loss_grad(f.params, f.ref, bad, f.query, MixConfig{}), InputError);
}

TEST(Gal, WeightsStrictlyInsideUnitInterval) {
  Rng rng(20);
  for (int i = 0; i < 200; ++i) {
    Fixture f(100 + i);
    auto g = f.group({1, 0, 0, 1, 0, 1, 1, 0}, rng);
    const auto rep = gal_loss_grad(f.params, f.ref, build_pairs(g, 64, rng), f.query, MixConfig{});
    EXPECT_GT(rep.aux.at("min_weight"), 0.0);
    EXPECT_LT(rep.aux.at("max_weight"), 1.0);
  }
}

TEST(Gal, AnnealsAsSuccessIsPreferred) {
  Fixture f(21);
  const ReferencePolicy ref(f.params);
  const auto& shape = f.params.shape();
  // Success and failure differ in the first token.
  const Trajectory success{{0, 1, f.task.stop()}, true};
  const Trajectory failure{{2, 1, f.task.stop()}, true};
  const std::vector<PreferencePair> pairs{{success, failure}};
  double prev_eta = 1.0, prev_norm = 1e300;
  for (double t = 0.0; t <= 20.0; t += 1.0) {
    PolicyParams p = f.params;
    for (std::size_t i = 0; i < success.size(); ++i)
      p.mutable_logits(context_at(shape, f.query.id, success.tokens, i))[success.tokens[i]] += t;
    const auto rep = gal_loss_grad(p, ref, pairs, f.query, MixConfig{});
    const double eta = rep.aux.at("eta_contribution");
    EXPECT_LT(eta, prev_eta);
    EXPECT_LT(rep.gradient.norm(), prev_norm);
    prev_eta = eta;
    prev_norm = rep.gradient.norm();
  }
  EXPECT_LT(prev_eta, 1e-3);
  EXPECT_LT(prev_norm, 1e-3);
}

GroupRollout pattern_group(std::size_t succ, std::size_t fail) {
  GroupRollout g;
  for (std::size_t i = 0; i < succ + fail; ++i) {
    g.trajectories.push_back(Trajectory{{static_cast<Token>(i)}, true});
    g.rewards.push_back(i < succ ? 1 : 0);
  }
  return g;
}

TEST(BuildPairs, FullProduct) {
  const auto g = pattern_group(3, 5);
  Rng rng(1);
  const auto pairs = build_pairs(g, 100, rng);
  ASSERT_EQ(pairs.size(), 15u);
  std::set<std::pair<Token, Token>> seen;
  for (const auto& p : pairs) {
    EXPECT_LT(p.success.tokens[0], 3);
    EXPECT_GE(p.failure.tokens[0], 3);
    seen.insert({p.success.tokens[0], p.failure.tokens[0]});
  }
  EXPECT_EQ(seen.size(), 15u);
}

TEST(BuildPairs, CapGivesDistinctPairs) {
  const auto g = pattern_group(4, 4);
  Rng rng(2);
  const auto pairs = build_pairs(g, 8, rng);
  ASSERT_EQ(pairs.size(), 8u);
  std::set<std::pair<Token, Token>> seen;
  for (const auto& p : pairs) seen.insert({p.success.tokens[0], p.failure.tokens[0]});
  EXPECT_EQ(seen.size(), 8u);
}

TEST(BuildPairs, SubsetIsUniform) {
  const auto g = pattern_group(4, 4);
  std::map<std::pair<Token, Token>, int> hits;
  const int n = 100000;
  for (int s = 0; s < n; ++s) {
    Rng rng(s);
    for (const auto& p : build_pairs(g, 8, rng)) ++hits[{p.success.tokens[0], p.failure.tokens[0]}];
  }
  ASSERT_EQ(hits.size(), 16u);
  for (const auto& [pair, h] : hits) EXPECT_NEAR(static_cast<double>(h) / n, 0.5, 0.01);
}

TEST(BuildPairs, DeterministicAndRejectsNonMid) {
  const auto g = pattern_group(5, 3);
  Rng a(9), b(9);
  const auto pa = build_pairs(g, 4, a), pb = build_pairs(g, 4, b);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].success, pb[i].success);
  Rng rng(1);
  EXPECT_THROW(build_pairs(pattern_group(4, 0), 8, rng), StateError);
  EXPECT_THROW(build_pairs(pattern_group(0, 4), 8, rng), StateError);
}

SparseGradient random_gradient(Rng& rng) {
  std::normal_distribution<double> n;
  SparseGradient g(4);
  for (std::uint64_t c = 0; c < 3; ++c)
    for (double& v : g.row({1, c + uniform_index(rng, 3)})) v = n(rng);
  return g;
}

TEST(MixedGradient, ConvexCombination) {
  Rng rng(3);
  const auto a = random_gradient(rng), b = random_gradient(rng);
  EXPECT_LT(max_abs_diff(mixed_gradient(a, SparseGradient(4), 0.5), scaled(a, 0.5)), 1e-15);
  const auto m = mixed_gradient(a, b, 0.999);
  EXPECT_LE(max_abs_diff(m, a), 0.001 * a.norm() + 0.001 * b.norm() + 1e-15);
  const auto c = mixed_gradient(a, b, 0.3);
  for (const auto& ctx : {ContextKey{1, 0}, ContextKey{1, 1}, ContextKey{1, 2}, ContextKey{1, 3}, ContextKey{1, 4}})
    for (Token t = 0; t < 4; ++t) EXPECT_EQ(c.at(ctx, t), 0.3 * a.at(ctx, t) + 0.7 * b.at(ctx, t));
  EXPECT_THROW(mixed_gradient(a, b, 0.0), ConfigError);
  EXPECT_THROW(mixed_gradient(a, b, 1.0), ConfigError);
}

TEST(DypoStep, EasyIsDiscarded) {
  Fixture f(22);
  Rng rng(23), t(1), p(2);
  const auto g = f.group({1, 1, 1, 1}, rng);
  const auto teachers = make_teachers(4, f.task.family(), 17);
  const auto rep = dypo_step_loss(f.params, f.ref, f.task, g, teachers, MixConfig{}, {t, p});
  EXPECT_EQ(rep.loss, 0.0);
  EXPECT_TRUE(rep.gradient.empty());
  EXPECT_EQ(report_grade(rep), Grade::kEasy);
}

TEST(DypoStep, HardScalesSft) {
  Fixture f(24);
  Rng rng(25);
  const auto g = f.group({0, 0, 0, 0}, rng);
  const auto teachers = make_teachers(4, f.task.family(), 17);
  MixConfig cfg;
  cfg.gamma = 2.0;
  Rng t1(5), p1(6), t2(5);
  const auto rep = dypo_step_loss(f.params, f.ref, f.task, g, teachers, cfg, {t1, p1});
  const auto sft = sft_loss_grad(f.params, f.task, f.query, teachers, t2);
  EXPECT_EQ(rep.loss, 2.0 * sft.loss);
  EXPECT_EQ(max_abs_diff(rep.gradient, scaled(sft.gradient, 2.0)), 0.0);
  EXPECT_EQ(report_grade(rep), Grade::kHard);
}

TEST(DypoStep, MidRecomposes) {
  Fixture f(26);
  Rng rng(27);
  auto g = f.group({1, 0, 0, 1, 0, 0, 0, 0}, rng);
  const auto teachers = make_teachers(4, f.task.family(), 17);
  MixConfig cfg;
  cfg.alpha = 0.3;
  Rng t1(5), p1(6), p2(6);
  const auto rep = dypo_step_loss(f.params, f.ref, f.task, g, teachers, cfg, {t1, p1});
  populate_advantages(g, cfg.xi);
  const auto grpo = grpo_loss_grad(f.params, f.ref, g, cfg);
  const auto gal = gal_loss_grad(f.params, f.ref, build_pairs(g, cfg.pair_cap, p2), f.query, cfg);
  EXPECT_NEAR(rep.loss, 0.3 * grpo.loss + 0.7 * gal.loss, 1e-12);
  SparseGradient expect = scaled(grpo.gradient, 0.3);
  expect.add_scaled(gal.gradient, 0.7);
  EXPECT_LT(max_abs_diff(rep.gradient, expect), 1e-12);
  EXPECT_EQ(report_grade(rep), Grade::kMid);
}

}  // namespace
