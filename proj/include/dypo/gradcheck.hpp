#pragma once

// Central finite-difference checks of the analytic loss gradients on random
// non-saturated instances.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dypo/objectives.hpp"
#include "dypo/policy.hpp"
#include "dypo/random.hpp"
#include "dypo/task_env.hpp"

namespace dypo {

using LossFn = std::function<double(const PolicyParams&)>;

// Central differences of `loss` over every entry of the given context rows.
inline SparseGradient fd_gradient(const PolicyParams& params, std::span<const ContextKey> contexts,
                                  const LossFn& loss, double eps) {
  PolicyParams p = params;
  SparseGradient g(params.vocab());
  for (const auto& ctx : contexts) {
    auto out = g.row(ctx);
    for (std::size_t a = 0; a < params.vocab(); ++a) {
      auto row = p.mutable_logits(ctx);
      const double orig = row[a];
      row[a] = orig + eps;
      const double up = loss(p);
      p.mutable_logits(ctx)[a] = orig - eps;
      const double down = loss(p);
      p.mutable_logits(ctx)[a] = orig;
      out[a] = (up - down) / (2.0 * eps);
    }
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const SparseGradient& a, const SparseGradient& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale < 1e-300) return 0.0;
  return std::sqrt(squared_distance(a, b)) / scale;
}

struct GradCheckConfig {
  std::size_t instances = 100;
  double eps = 1e-5;
  // GRPO instances with any ratio closer than this to a clip boundary are redrawn.
  double clip_margin = 1e-3;
  std::uint64_t seed = 1;
  std::size_t k = 8;
  std::size_t teachers = 4;
  MixConfig mix;
  TaskConfig task;
};

struct GradCheckResult {
  std::string objective;
  std::size_t instances = 0;
  std::size_t redrawn = 0;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
};

namespace detail {

inline std::vector<ContextKey> all_contexts(const PolicyShape& shape, QueryId q) {
  std::vector<ContextKey> out;
  // Every history of length history_order over the V+1 symbols, including BOS.
  const std::uint64_t base = shape.vocab + 1;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < shape.history_order; ++i) total *= base;
  for (std::uint64_t h = 0; h < total; ++h) out.push_back({q, h});
  return out;
}

inline PolicyParams random_params(const PolicyShape& shape, std::span<const ContextKey> contexts, double scale,
                                  Rng& rng) {
  std::normal_distribution<double> n(0.0, scale);
  PolicyParams p(shape);
  for (const auto& c : contexts)
    for (double& v : p.mutable_logits(c)) v = n(rng);
  return p;
}

inline PolicyParams perturbed(const PolicyParams& base, double scale, Rng& rng) {
  std::normal_distribution<double> n(0.0, scale);
  PolicyParams p = base;
  for (const auto& [ctx, row] : base.table()) {
    auto dst = p.mutable_logits(ctx);
    for (std::size_t a = 0; a < row.size(); ++a) dst[a] += n(rng);
  }
  return p;
}

// Random binary rewards; with mid_only both classes are present.
inline std::vector<RewardValue> random_rewards(std::size_t k, bool mid_only, Rng& rng) {
  std::vector<RewardValue> r(k);
  do {
    for (auto& v : r) v = static_cast<RewardValue>(uniform_index(rng, 2));
  } while (mid_only && grade(r) != Grade::kMid);
  return r;
}

inline bool near_clip(const PolicyParams& params, const ReferencePolicy& ref, const GroupRollout& g,
                      const MixConfig& cfg, double margin) {
  const double lo = 1.0 - cfg.epsilon_clip, hi = 1.0 + cfg.epsilon_clip;
  auto close = [&](double r) { return std::abs(r - lo) < margin || std::abs(r - hi) < margin; };
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto lp = step_log_probs(params, g.query.id, g.trajectories[i]);
    const auto anchor = cfg.ratio_anchor == RatioAnchor::kReference
                            ? step_log_probs(ref.params(), g.query.id, g.trajectories[i])
                            : g.behavior_log_probs[i];
    if (cfg.ratio_level == RatioLevel::kToken) {
      for (std::size_t t = 0; t < lp.size(); ++t)
        if (close(std::exp(lp[t] - anchor[t]))) return true;
    } else {
      double s = 0.0;
      for (std::size_t t = 0; t < lp.size(); ++t) s += lp[t] - anchor[t];
      if (close(std::exp(s))) return true;
    }
  }
  return false;
}

struct Instance {
  Query query;
  PolicyParams params;
  ReferencePolicy ref;
  GroupRollout group;
  std::vector<ContextKey> contexts;
};

inline Instance random_instance(const ArithmeticTask& task, const GradCheckConfig& cfg, bool mid_only, Rng& rng) {
  Instance in;
  in.query = task.generate_query(1 + uniform_index(rng, task.max_chain()), rng);
  const auto shape = task.policy_shape();
  in.contexts = all_contexts(shape, in.query.id);
  in.params = random_params(shape, in.contexts, 1.0, rng);
  in.ref = ReferencePolicy(perturbed(in.params, 0.3, rng));
  const PolicyParams behavior = perturbed(in.params, 0.1, rng);
  in.group.query = in.query;
  in.group.trajectories = sample_group(in.params, in.query.id, cfg.k, rng);
  in.group.rewards = random_rewards(cfg.k, mid_only, rng);
  for (const auto& t : in.group.trajectories) in.group.behavior_log_probs.push_back(step_log_probs(behavior, in.query.id, t));
  populate_advantages(in.group, cfg.mix.xi);
  return in;
}

inline void record(GradCheckResult& res, double err) {
  res.max_rel_error = std::max(res.max_rel_error, err);
  res.mean_rel_error += err;
  ++res.instances;
}

inline void finish(GradCheckResult& res) {
  if (res.instances) res.mean_rel_error /= static_cast<double>(res.instances);
}

}  // namespace detail

inline GradCheckResult check_sft_gradient(const GradCheckConfig& cfg) {
  const ArithmeticTask task(cfg.task);
  const auto teachers = make_teachers(cfg.teachers, task.family(), 17);
  Rng rng = substream(cfg.seed, "gradcheck.sft");
  GradCheckResult res{"sft"};
  for (std::size_t i = 0; i < cfg.instances; ++i) {
    auto in = detail::random_instance(task, cfg, false, rng);
    const Rng draw = rng;
    Rng r0 = draw;
    const auto rep = sft_loss_grad(in.params, task, in.query, teachers, r0);
    const auto fd = fd_gradient(in.params, in.contexts, [&](const PolicyParams& p) {
      Rng r = draw;
      return sft_loss_grad(p, task, in.query, teachers, r).loss;
    }, cfg.eps);
    detail::record(res, relative_error(rep.gradient, fd));
  }
  detail::finish(res);
  return res;
}

// Cycles through the four ratio conventions (token/trajectory x reference/behavior).
inline GradCheckResult check_grpo_gradient(const GradCheckConfig& cfg) {
  const ArithmeticTask task(cfg.task);
  Rng rng = substream(cfg.seed, "gradcheck.grpo");
  GradCheckResult res{"grpo"};
  std::size_t i = 0;
  while (res.instances < cfg.instances) {
    MixConfig mix = cfg.mix;
    mix.ratio_level = (i & 1) ? RatioLevel::kTrajectory : RatioLevel::kToken;
    mix.ratio_anchor = (i & 2) ? RatioAnchor::kReference : RatioAnchor::kBehavior;
    auto in = detail::random_instance(task, cfg, false, rng);
    if (detail::near_clip(in.params, in.ref, in.group, mix, cfg.clip_margin)) {
      ++res.redrawn;
      continue;
    }
    ++i;
    const auto rep = grpo_loss_grad(in.params, in.ref, in.group, mix);
    const auto fd = fd_gradient(in.params, in.contexts, [&](const PolicyParams& p) {
      return grpo_loss_grad(p, in.ref, in.group, mix).loss;
    }, cfg.eps);
    detail::record(res, relative_error(rep.gradient, fd));
  }
  detail::finish(res);
  return res;
}

inline GradCheckResult check_gal_gradient(const GradCheckConfig& cfg) {
  const ArithmeticTask task(cfg.task);
  Rng rng = substream(cfg.seed, "gradcheck.gal");
  GradCheckResult res{"gal"};
  for (std::size_t i = 0; i < cfg.instances; ++i) {
    auto in = detail::random_instance(task, cfg, true, rng);
    const auto pairs = build_pairs(in.group, cfg.mix.pair_cap, rng);
    const auto rep = gal_loss_grad(in.params, in.ref, pairs, in.query, cfg.mix);
    const auto fd = fd_gradient(in.params, in.contexts, [&](const PolicyParams& p) {
      return gal_loss_grad(p, in.ref, pairs, in.query, cfg.mix).loss;
    }, cfg.eps);
    detail::record(res, relative_error(rep.gradient, fd));
  }
  detail::finish(res);
  return res;
}

// Random reward patterns, so all three routes are exercised.
inline GradCheckResult check_dypo_gradient(const GradCheckConfig& cfg) {
  const ArithmeticTask task(cfg.task);
  const auto teachers = make_teachers(cfg.teachers, task.family(), 17);
  Rng rng = substream(cfg.seed, "gradcheck.dypo");
  GradCheckResult res{"dypo"};
  while (res.instances < cfg.instances) {
    auto in = detail::random_instance(task, cfg, false, rng);
    if (detail::near_clip(in.params, in.ref, in.group, cfg.mix, cfg.clip_margin)) {
      ++res.redrawn;
      continue;
    }
    const Rng t0 = substream(rng(), "teacher"), p0 = substream(rng(), "pairs");
    auto eval = [&](const PolicyParams& p) {
      Rng t = t0, q = p0;
      return dypo_step_loss(p, in.ref, task, in.group, teachers, cfg.mix, {t, q});
    };
    const auto rep = eval(in.params);
    const auto fd = fd_gradient(in.params, in.contexts, [&](const PolicyParams& p) { return eval(p).loss; }, cfg.eps);
    detail::record(res, relative_error(rep.gradient, fd));
  }
  detail::finish(res);
  return res;
}

inline std::vector<GradCheckResult> run_grad_checks(const GradCheckConfig& cfg) {
  return {check_sft_gradient(cfg), check_grpo_gradient(cfg), check_gal_gradient(cfg), check_dypo_gradient(cfg)};
}

}  // namespace dypo
