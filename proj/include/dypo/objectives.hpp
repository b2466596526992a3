#pragma once

// Loss values and exact gradients for every training pathway.
//
// Every gradient here is the gradient of the returned loss (descent
// direction), except grpo_policy_gradient which returns the ascent-form
// estimator (1/k) sum_i A_i * score_i used by the variance analyses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dypo/error.hpp"
#include "dypo/gradient.hpp"
#include "dypo/grading.hpp"
#include "dypo/policy.hpp"
#include "dypo/random.hpp"
#include "dypo/task_env.hpp"

namespace dypo {

enum class RatioLevel { kToken, kTrajectory };

// Which policy the importance ratio in the clipped surrogate is taken against.
// kReference: pi_theta / pi_ref. kBehavior: pi_theta / pi_old, with pi_old the
// policy that sampled the group (recorded log-probs).
enum class RatioAnchor { kReference, kBehavior };

inline RatioLevel parse_ratio_level(const std::string& s) {
  if (s == "token") return RatioLevel::kToken;
  if (s == "trajectory") return RatioLevel::kTrajectory;
  throw ConfigError("mix.ratio_level must be 'token' or 'trajectory', got '" + s + "'");
}
inline const char* to_string(RatioLevel r) { return r == RatioLevel::kToken ? "token" : "trajectory"; }

inline RatioAnchor parse_ratio_anchor(const std::string& s) {
  if (s == "reference") return RatioAnchor::kReference;
  if (s == "behavior") return RatioAnchor::kBehavior;
  throw ConfigError("mix.ratio_anchor must be 'reference' or 'behavior', got '" + s + "'");
}
inline const char* to_string(RatioAnchor r) { return r == RatioAnchor::kReference ? "reference" : "behavior"; }

struct MixConfig {
  double alpha = 0.5;
  double gamma = 1.0;
  double beta_gal = 1.0;
  double beta_kl = 0.01;
  double epsilon_clip = 0.2;
  double xi = 1e-4;
  std::size_t pair_cap = 64;
  RatioLevel ratio_level = RatioLevel::kToken;
  RatioAnchor ratio_anchor = RatioAnchor::kBehavior;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("mix.alpha must be in (0, 1)");
    if (!(gamma > 0.0)) throw ConfigError("mix.gamma must be > 0");
    if (!(beta_gal > 0.0)) throw ConfigError("mix.beta_gal must be > 0");
    if (!(beta_kl >= 0.0)) throw ConfigError("mix.beta_kl must be >= 0");
    if (!(epsilon_clip > 0.0 && epsilon_clip < 1.0)) throw ConfigError("mix.epsilon_clip must be in (0, 1)");
    if (!(xi > 0.0)) throw ConfigError("mix.xi must be > 0");
    if (pair_cap < 1) throw ConfigError("mix.pair_cap must be >= 1");
  }

  bool operator==(const MixConfig&) const = default;
};

struct LossReport {
  double loss = 0.0;
  SparseGradient gradient;
  std::map<std::string, double> aux;

  double aux_or(const std::string& key, double fallback) const {
    auto it = aux.find(key);
    return it == aux.end() ? fallback : it->second;
  }
};

struct GroupRollout {
  Query query;
  std::vector<Trajectory> trajectories;
  std::vector<RewardValue> rewards;
  std::optional<std::vector<double>> advantages;
  // log pi_old(a_t | c_t) of the sampling policy, one vector per trajectory.
  std::vector<std::vector<double>> behavior_log_probs;

  std::size_t size() const { return trajectories.size(); }
};

inline GroupRollout rollout_group(const ArithmeticTask& task, const PolicyParams& params, const Query& query,
                                  std::size_t k, Rng& rng) {
  GroupRollout g;
  g.query = query;
  g.trajectories = sample_group(params, query.id, k, rng);
  g.rewards = task.rewards(query, g.trajectories);
  for (const auto& t : g.trajectories) g.behavior_log_probs.push_back(step_log_probs(params, query.id, t));
  return g;
}

// (R_i - mu) / (sigma + xi) with population mean and standard deviation.
inline std::vector<double> standardize_advantages(std::span<const double> rewards, double xi) {
  if (rewards.size() < 2) throw InputError("advantage standardization needs k >= 2");
  if (!(xi > 0.0)) throw ConfigError("xi must be > 0");
  const double k = static_cast<double>(rewards.size());
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= k;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  const double sigma = std::sqrt(var / k);
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mu) / (sigma + xi));
  return out;
}

inline void populate_advantages(GroupRollout& group, double xi) {
  std::vector<double> r(group.rewards.begin(), group.rewards.end());
  group.advantages = standardize_advantages(r, xi);
}

inline void check_group(const GroupRollout& group) {
  if (group.trajectories.size() < 2) throw InputError("group needs k >= 2 trajectories");
  if (group.rewards.size() != group.trajectories.size())
    throw InputError("group rewards and trajectories differ in length");
}

inline const std::vector<double>& require_advantages(const GroupRollout& group) {
  check_group(group);
  if (!group.advantages) throw StateError("group advantages are not populated");
  if (group.advantages->size() != group.trajectories.size())
    throw StateError("group advantages have the wrong length");
  return *group.advantages;
}

// Multi-teacher SFT: the target is a demonstration from a uniformly drawn teacher.
inline LossReport sft_loss_grad(const PolicyParams& params, const ArithmeticTask& task, const Query& query,
                                std::span<const TeacherOracle> teachers, Rng& rng) {
  if (teachers.empty()) throw ConfigError("SFT needs at least one teacher");
  const std::size_t idx = uniform_index(rng, teachers.size());
  const Trajectory target = teacher_sample(task, teachers[idx], query, rng);
  LossReport rep;
  rep.loss = -log_prob(params, query.id, target);
  rep.gradient = scaled(score(params, query.id, target), -1.0);
  rep.aux["teacher_index"] = static_cast<double>(idx);
  rep.aux["target_length"] = static_cast<double>(target.size());
  return rep;
}

// Clipped surrogate plus exact KL penalty over the contexts the group visited.
// At a clip kink the unclipped branch is used.
inline LossReport grpo_loss_grad(const PolicyParams& params, const ReferencePolicy& ref,
                                 const GroupRollout& group, const MixConfig& cfg) {
  const auto& adv = require_advantages(group);
  const auto& shape = params.shape();
  const QueryId q = group.query.id;
  const std::size_t k = group.size();
  const double inv_k = 1.0 / static_cast<double>(k);
  const double lo = 1.0 - cfg.epsilon_clip;
  const double hi = 1.0 + cfg.epsilon_clip;

  if (cfg.ratio_anchor == RatioAnchor::kBehavior && group.behavior_log_probs.size() != k)
    throw StateError("behavior log-probs missing for ratio_anchor=behavior");

  LossReport rep;
  rep.gradient = SparseGradient(params.vocab());
  double surrogate = 0.0;
  double ratio_sum = 0.0;
  std::size_t ratio_count = 0;
  std::size_t clipped = 0;

  for (std::size_t i = 0; i < k; ++i) {
    const auto& traj = group.trajectories[i];
    const auto lp = step_log_probs(params, q, traj);
    const auto anchor = cfg.ratio_anchor == RatioAnchor::kReference ? step_log_probs(ref.params(), q, traj)
                                                                      : group.behavior_log_probs[i];
    if (anchor.size() != lp.size()) throw StateError("behavior log-probs do not match trajectory length");
    const double a = adv[i];

    if (cfg.ratio_level == RatioLevel::kToken) {
      const double inv_t = 1.0 / static_cast<double>(traj.size());
      double term = 0.0;
      for (std::size_t t = 0; t < traj.size(); ++t) {
        const double r = std::exp(lp[t] - anchor[t]);
        const double unclipped = r * a;
        const double clip = std::clamp(r, lo, hi) * a;
        ratio_sum += r;
        ++ratio_count;
        if (unclipped <= clip) {
          term += unclipped;
          if (a != 0.0)
            accumulate_step_score(params, context_at(shape, q, traj.tokens, t), traj.tokens[t],
                                  -inv_k * inv_t * a * r, rep.gradient);
        } else {
          term += clip;
          ++clipped;
        }
      }
      surrogate += inv_t * term;
    } else {
      double log_ratio = 0.0;
      for (std::size_t t = 0; t < traj.size(); ++t) log_ratio += lp[t] - anchor[t];
      const double r = std::exp(log_ratio);
      const double unclipped = r * a;
      const double clip = std::clamp(r, lo, hi) * a;
      ratio_sum += r;
      ++ratio_count;
      if (unclipped <= clip) {
        surrogate += unclipped;
        if (a != 0.0) rep.gradient.add_scaled(score(params, q, traj), -inv_k * a * r);
      } else {
        surrogate += clip;
        ++clipped;
      }
    }
  }

  const auto contexts = visited_contexts(shape, q, group.trajectories);
  const double kl = kl_to_reference(params, ref, contexts);
  rep.loss = -inv_k * surrogate + cfg.beta_kl * kl;
  if (cfg.beta_kl > 0.0) rep.gradient.add_scaled(kl_gradient(params, ref, contexts), cfg.beta_kl);
  rep.aux["kl_value"] = kl;
  rep.aux["mean_ratio"] = ratio_count ? ratio_sum / static_cast<double>(ratio_count) : 1.0;
  rep.aux["clip_fraction"] = ratio_count ? static_cast<double>(clipped) / static_cast<double>(ratio_count) : 0.0;
  return rep;
}

// Unclipped on-policy estimator (1/k) sum_i A_i * grad log pi(tau_i | q).
inline SparseGradient grpo_policy_gradient(const PolicyParams& params, const GroupRollout& group) {
  const auto& adv = require_advantages(group);
  SparseGradient g(params.vocab());
  const double inv_k = 1.0 / static_cast<double>(group.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (adv[i] == 0.0) continue;
    const auto& traj = group.trajectories[i];
    for (std::size_t t = 0; t < traj.size(); ++t)
      accumulate_step_score(params, context_at(params.shape(), group.query.id, traj.tokens, t), traj.tokens[t],
                            inv_k * adv[i], g);
  }
  return g;
}

struct PreferencePair {
  Trajectory success;
  Trajectory failure;
  RewardValue success_reward = 1;
  RewardValue failure_reward = 0;
};

// Success x failure pairs of a Mid group: the full product when it fits under
// pair_cap, otherwise a uniformly random subset of exactly pair_cap pairs.
inline std::vector<PreferencePair> build_pairs(const GroupRollout& group, std::size_t pair_cap, Rng& rng) {
  check_group(group);
  if (pair_cap < 1) throw ConfigError("pair_cap must be >= 1");
  if (grade(group.rewards) != Grade::kMid) throw StateError("pairs can only be built from a Mid group");
  std::vector<std::size_t> succ, fail;
  for (std::size_t i = 0; i < group.size(); ++i) (group.rewards[i] == 1 ? succ : fail).push_back(i);

  const std::size_t total = succ.size() * fail.size();
  std::vector<std::size_t> chosen(total);
  for (std::size_t i = 0; i < total; ++i) chosen[i] = i;
  if (total > pair_cap) {
    // Partial Fisher-Yates: the first pair_cap slots are a uniform subset.
    for (std::size_t i = 0; i < pair_cap; ++i) std::swap(chosen[i], chosen[i + uniform_index(rng, total - i)]);
    chosen.resize(pair_cap);
    std::sort(chosen.begin(), chosen.end());
  }
  std::vector<PreferencePair> pairs;
  pairs.reserve(chosen.size());
  for (std::size_t c : chosen) {
    const std::size_t s = succ[c / fail.size()];
    const std::size_t f = fail[c % fail.size()];
    pairs.push_back({group.trajectories[s], group.trajectories[f], group.rewards[s], group.rewards[f]});
  }
  return pairs;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// -log sigmoid(z)
inline double softplus_neg(double z) { return z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

// Group Alignment Loss: mean over pairs of -log sigmoid(beta * d), with d the
// difference of policy/reference log-ratios between the success and the
// failure. Gradient: -beta * (1 - sigmoid(beta d)) * (score_s - score_f), averaged.
inline LossReport gal_loss_grad(const PolicyParams& params, const ReferencePolicy& ref,
                                std::span<const PreferencePair> pairs, const Query& query, const MixConfig& cfg) {
  if (pairs.empty()) throw InputError("GAL needs at least one (success, failure) pair");
  for (const auto& p : pairs)
    if (!(p.success_reward > p.failure_reward))
      throw InputError("GAL pair violates the reward ordering R(success) > R(failure)");

  const double beta = cfg.beta_gal;
  const double inv_m = 1.0 / static_cast<double>(pairs.size());
  LossReport rep;
  rep.gradient = SparseGradient(params.vocab());
  double loss = 0.0, eta = 0.0, wsum = 0.0, dsum = 0.0;
  double wmin = 1.0, wmax = 0.0;
  for (const auto& p : pairs) {
    const double d = (log_prob(params, query.id, p.success) - log_prob(ref.params(), query.id, p.success)) -
                     (log_prob(params, query.id, p.failure) - log_prob(ref.params(), query.id, p.failure));
    const double z = beta * d;
    const double w = sigmoid(-z);
    loss += softplus_neg(z);
    eta += w * w;
    wsum += w;
    dsum += d;
    wmin = std::min(wmin, w);
    wmax = std::max(wmax, w);
    const double c = -beta * w * inv_m;
    rep.gradient.add_scaled(score(params, query.id, p.success), c);
    rep.gradient.add_scaled(score(params, query.id, p.failure), -c);
  }
  rep.loss = loss * inv_m;
  rep.aux["eta_contribution"] = eta * inv_m;
  rep.aux["mean_weight"] = wsum * inv_m;
  rep.aux["min_weight"] = wmin;
  rep.aux["max_weight"] = wmax;
  rep.aux["mean_margin"] = dsum * inv_m;
  rep.aux["pair_count"] = static_cast<double>(pairs.size());
  return rep;
}

inline SparseGradient mixed_gradient(const SparseGradient& g_grpo, const SparseGradient& g_gal, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("mixing coefficient alpha must be in (0, 1)");
  SparseGradient out(g_grpo.vocab() ? g_grpo.vocab() : g_gal.vocab());
  out.add_scaled(g_grpo, alpha);
  out.add_scaled(g_gal, 1.0 - alpha);
  return out;
}

// Randomness consumed by one routed step: teacher choice and demo style for
// Hard groups, pair subsampling for Mid groups.
struct StepStreams {
  Rng& teacher;
  Rng& pairs;
};

// Routed loss for one query: Easy -> 0, Hard -> gamma * SFT,
// Mid -> alpha * GRPO + (1 - alpha) * GAL.
inline LossReport dypo_step_loss(const PolicyParams& params, const ReferencePolicy& ref, const ArithmeticTask& task,
                                 const GroupRollout& group, std::span<const TeacherOracle> teachers,
                                 const MixConfig& cfg, StepStreams streams) {
  check_group(group);
  const Grade g = grade(group.rewards);
  LossReport rep;
  rep.gradient = SparseGradient(params.vocab());
  rep.aux["grade"] = static_cast<double>(g);

  switch (route(g)) {
    case Route::kDiscard:
      break;
    case Route::kSft: {
      auto sft = sft_loss_grad(params, task, group.query, teachers, streams.teacher);
      rep.loss = cfg.gamma * sft.loss;
      rep.gradient.add_scaled(sft.gradient, cfg.gamma);
      rep.aux["teacher_index"] = sft.aux["teacher_index"];
      break;
    }
    case Route::kMixedRl: {
      GroupRollout local;
      const GroupRollout* use = &group;
      if (!group.advantages) {
        local = group;
        populate_advantages(local, cfg.xi);
        use = &local;
      }
      auto grpo = grpo_loss_grad(params, ref, *use, cfg);
      const auto pairs = build_pairs(*use, cfg.pair_cap, streams.pairs);
      auto gal = gal_loss_grad(params, ref, pairs, group.query, cfg);
      rep.loss = cfg.alpha * grpo.loss + (1.0 - cfg.alpha) * gal.loss;
      rep.gradient = mixed_gradient(grpo.gradient, gal.gradient, cfg.alpha);
      rep.aux["kl_value"] = grpo.aux["kl_value"];
      rep.aux["mean_ratio"] = grpo.aux["mean_ratio"];
      rep.aux["eta_contribution"] = gal.aux["eta_contribution"];
      rep.aux["pair_count"] = gal.aux["pair_count"];
      rep.aux["min_weight"] = gal.aux["min_weight"];
      rep.aux["max_weight"] = gal.aux["max_weight"];
      break;
    }
  }
  return rep;
}

inline Grade report_grade(const LossReport& rep) { return static_cast<Grade>(static_cast<int>(rep.aux.at("grade"))); }

}  // namespace dypo
