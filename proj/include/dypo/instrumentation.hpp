#pragma once

// Monte Carlo instrumentation: gradient-estimator variance, score-function
// second moment, the variance-ordering and ensemble-bias benches, and the
// per-step metrics CSV.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dypo/error.hpp"
#include "dypo/gradient.hpp"
#include "dypo/grading.hpp"
#include "dypo/objectives.hpp"
#include "dypo/policy.hpp"
#include "dypo/random.hpp"
#include "dypo/task_env.hpp"

namespace dypo {

struct VarianceEstimate {
  SparseGradient mean_gradient;
  // E||g - E g||^2 with (n - 1) normalization.
  double scalar_variance = 0.0;
  std::size_t sample_count = 0;
  // Delete-one jackknife standard error of scalar_variance.
  double standard_error = 0.0;
};

inline VarianceEstimate estimate_variance_from_samples(std::span<const SparseGradient> samples) {
  const std::size_t n = samples.size();
  if (n < 3) throw InputError("variance estimation needs at least 3 samples");
  for (const auto& g : samples)
    if (!g.all_finite()) throw DataError("gradient sample has non-finite entries");

  VarianceEstimate est;
  est.sample_count = n;
  est.mean_gradient = SparseGradient(samples.front().vocab());
  for (const auto& g : samples) est.mean_gradient.add_scaled(g, 1.0);
  est.mean_gradient.scale(1.0 / static_cast<double>(n));

  std::vector<double> dev(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dev[i] = squared_distance(samples[i], est.mean_gradient);
    total += dev[i];
  }
  const double nd = static_cast<double>(n);
  est.scalar_variance = total / (nd - 1.0);

  // Removing sample i lowers the sum of squared deviations by n/(n-1) * dev_i.
  std::vector<double> loo(n);
  double loo_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loo[i] = (total - nd / (nd - 1.0) * dev[i]) / (nd - 2.0);
    loo_mean += loo[i];
  }
  loo_mean /= nd;
  double ss = 0.0;
  for (double v : loo) ss += (v - loo_mean) * (v - loo_mean);
  est.standard_error = std::sqrt((nd - 1.0) / nd * ss);
  return est;
}

using GradientSampler = std::function<SparseGradient(Rng&)>;

// Draws n gradients from the sampler at fixed parameters.
inline VarianceEstimate estimate_variance(const GradientSampler& sampler, std::size_t n_samples, Rng& rng) {
  if (n_samples < 30) throw InputError("estimate_variance needs n_samples >= 30");
  std::vector<SparseGradient> samples;
  samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) samples.push_back(sampler(rng));
  return estimate_variance_from_samples(samples);
}

struct ScalarEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

inline ScalarEstimate mean_and_stderr(std::span<const double> xs) {
  ScalarEstimate e;
  if (xs.empty()) return e;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) e.value += x;
  e.value /= n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - e.value) * (x - e.value);
    e.standard_error = std::sqrt(ss / (n - 1.0) / n);
  }
  return e;
}

// Sigma_s = E ||grad log pi(tau | q)||^2 over tau ~ pi.
inline ScalarEstimate estimate_score_variance(const PolicyParams& params, QueryId query, std::size_t n_samples,
                                              Rng& rng) {
  if (n_samples < 30) throw InputError("estimate_score_variance needs n_samples >= 30");
  std::vector<double> sq(n_samples);
  for (auto& v : sq) v = score(params, query, sample_trajectory(params, query, rng)).squared_norm();
  return mean_and_stderr(sq);
}

// Variance of the unclipped GRPO estimator at group size k. With mid_only the
// groups are drawn conditionally on being Mid (the only groups GRPO acts on).
inline VarianceEstimate grpo_variance(const PolicyParams& params, const ArithmeticTask& task, const Query& query,
                                      std::size_t k, std::size_t n_groups, double xi, bool mid_only, Rng& rng,
                                      std::size_t max_attempts = 0) {
  if (max_attempts == 0) max_attempts = 1000 * n_groups;
  std::vector<SparseGradient> samples;
  samples.reserve(n_groups);
  std::size_t attempts = 0;
  while (samples.size() < n_groups) {
    if (++attempts > max_attempts)
      throw BenchError("only " + std::to_string(samples.size()) + " of " + std::to_string(n_groups) +
                       " qualifying groups within " + std::to_string(max_attempts) + " attempts");
    GroupRollout g;
    g.query = query;
    g.trajectories = sample_group(params, query.id, k, rng);
    g.rewards = task.rewards(query, g.trajectories);
    if (mid_only && grade(g.rewards) != Grade::kMid) continue;
    populate_advantages(g, xi);
    samples.push_back(grpo_policy_gradient(params, g));
  }
  return estimate_variance_from_samples(samples);
}

struct VarianceOrderingReport {
  VarianceEstimate grpo;
  VarianceEstimate gal;
  VarianceEstimate mix;
  double eta = 0.0;              // mean over groups of mean_pairs (1 - sigmoid(beta d))^2
  double sigma_s = 0.0;          // mean ||score||^2 over trajectories of the Mid groups
  double mean_pairs = 0.0;       // mean M
  double predicted_gal = 0.0;    // 2 beta^2 eta Sigma_s / M
  std::size_t mid_groups = 0;
  std::size_t attempts = 0;
  double alpha = 0.0;

  double gap() const { return grpo.scalar_variance - mix.scalar_variance; }
  double combined_se() const {
    return std::sqrt(grpo.standard_error * grpo.standard_error + mix.standard_error * mix.standard_error);
  }
  // var_mix < var_grpo by more than three combined standard errors.
  bool verdict() const { return gap() > 3.0 * combined_se(); }
};

// Holds theta fixed and resamples Mid groups from the query pool. All three
// estimators are gradients of losses (descent form): g_grpo = -(1/k) sum A s,
// g_gal from gal_loss_grad, g_mix = alpha g_grpo + (1 - alpha) g_gal.
inline VarianceOrderingReport variance_ordering_bench(const PolicyParams& params, const ReferencePolicy& ref,
                                                      const ArithmeticTask& task, std::span<const Query> pool,
                                                      const MixConfig& cfg, std::size_t k, std::size_t n_groups,
                                                      Rng& rng, std::size_t max_attempts = 0) {
  cfg.validate();
  if (pool.empty()) throw InputError("variance bench needs a non-empty query pool");
  if (n_groups < 3) throw InputError("variance bench needs n_groups >= 3");
  if (max_attempts == 0) max_attempts = 200 * n_groups;

  std::vector<SparseGradient> g_grpo, g_gal, g_mix;
  std::vector<double> etas, sq_scores, pair_counts;
  VarianceOrderingReport rep;
  rep.alpha = cfg.alpha;
  while (g_grpo.size() < n_groups) {
    if (++rep.attempts > max_attempts)
      throw BenchError("variance bench found only " + std::to_string(g_grpo.size()) + " Mid groups of " +
                       std::to_string(n_groups) + " requested within " + std::to_string(max_attempts) +
                       " rollout groups");
    const Query& q = pool[uniform_index(rng, pool.size())];
    GroupRollout g = rollout_group(task, params, q, k, rng);
    if (grade(g.rewards) != Grade::kMid) continue;
    populate_advantages(g, cfg.xi);
    auto grpo = scaled(grpo_policy_gradient(params, g), -1.0);
    const auto pairs = build_pairs(g, cfg.pair_cap, rng);
    auto gal = gal_loss_grad(params, ref, pairs, q, cfg);
    g_mix.push_back(mixed_gradient(grpo, gal.gradient, cfg.alpha));
    g_grpo.push_back(std::move(grpo));
    g_gal.push_back(std::move(gal.gradient));
    etas.push_back(gal.aux["eta_contribution"]);
    pair_counts.push_back(gal.aux["pair_count"]);
    for (const auto& t : g.trajectories) sq_scores.push_back(score(params, q.id, t).squared_norm());
  }
  rep.mid_groups = g_grpo.size();
  rep.grpo = estimate_variance_from_samples(g_grpo);
  rep.gal = estimate_variance_from_samples(g_gal);
  rep.mix = estimate_variance_from_samples(g_mix);
  rep.eta = mean_and_stderr(etas).value;
  rep.sigma_s = mean_and_stderr(sq_scores).value;
  rep.mean_pairs = mean_and_stderr(pair_counts).value;
  rep.predicted_gal = 2.0 * cfg.beta_gal * cfg.beta_gal * rep.eta * rep.sigma_s / rep.mean_pairs;
  return rep;
}

struct BiasLawRow {
  std::size_t m = 0;
  double mean_squared_bias = 0.0;
  double standard_error = 0.0;
  double analytic = 0.0;  // ||b_sys||^2 + sigma^2 / m
};

struct BiasLawReport {
  std::vector<BiasLawRow> rows;
  double b_sys_squared_norm = 0.0;
  // Least-squares slope and intercept of log(mean - ||b_sys||^2) against log m.
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();

  bool strictly_decreasing() const {
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (!(rows[i].mean_squared_bias < rows[i - 1].mean_squared_bias)) return false;
    return true;
  }
};

inline BiasLawReport bias_law_bench(const BiasTestbedConfig& cfg, std::span<const std::size_t> m_values,
                                    std::size_t n_draws, Rng& rng) {
  cfg.validate();
  if (m_values.empty()) throw InputError("bias bench needs at least one ensemble size");
  if (n_draws < 10000) throw InputError("bias bench needs n_draws >= 10^4");
  BiasLawReport rep;
  rep.b_sys_squared_norm = cfg.b_sys_squared_norm();
  std::vector<double> draws(n_draws);
  for (std::size_t m : m_values) {
    for (auto& d : draws) d = bias_sample(cfg, m, rng);
    const auto e = mean_and_stderr(draws);
    rep.rows.push_back({m, e.value, e.standard_error,
                        rep.b_sys_squared_norm + cfg.sigma_bias * cfg.sigma_bias / static_cast<double>(m)});
  }
  std::vector<double> xs, ys;
  for (const auto& r : rep.rows) {
    const double idio = r.mean_squared_bias - rep.b_sys_squared_norm;
    if (!(idio > 0.0)) return rep;
    xs.push_back(std::log(static_cast<double>(r.m)));
    ys.push_back(std::log(idio));
  }
  if (xs.size() < 2) return rep;
  const auto mx = mean_and_stderr(xs).value;
  const auto my = mean_and_stderr(ys).value;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (sxx > 0.0) {
    rep.slope = sxy / sxx;
    rep.intercept = my - rep.slope * mx;
  }
  return rep;
}

// One row of the training-dynamics CSV.
struct StepMetrics {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double offline_ratio = 0.0;  // hard / (easy + hard + mid)
  double mean_entropy = 0.0;
  double grad_norm = 0.0;
  std::size_t easy = 0;
  std::size_t hard = 0;
  std::size_t mid = 0;
  double eta = 0.0;  // mean over Mid groups; 0 when the step had none
  double kl = 0.0;

  bool operator==(const StepMetrics&) const = default;
};

inline constexpr const char* kMetricsHeader = "step,mean_reward,offline_ratio,mean_entropy,grad_norm,easy,hard,mid,eta,kl";

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_to_csv(std::span<const StepMetrics> rows) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.step) + ',' + format_real(r.mean_reward) + ',' + format_real(r.offline_ratio) + ',' +
           format_real(r.mean_entropy) + ',' + format_real(r.grad_norm) + ',' + std::to_string(r.easy) + ',' +
           std::to_string(r.hard) + ',' + std::to_string(r.mid) + ',' + format_real(r.eta) + ',' +
           format_real(r.kl) + '\n';
  }
  return out;
}

inline void write_metrics(const std::string& path, std::span<const StepMetrics> rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open metrics file '" + path + "' for writing");
  os << metrics_to_csv(rows);
  if (!os) throw IoError("failed writing metrics file '" + path + "'");
}

inline std::vector<StepMetrics> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw DataError("metrics CSV header mismatch");
  std::vector<StepMetrics> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw DataError("metrics CSV row has " + std::to_string(f.size()) + " fields");
    try {
      StepMetrics r;
      r.step = std::stoull(f[0]);
      r.mean_reward = std::stod(f[1]);
      r.offline_ratio = std::stod(f[2]);
      r.mean_entropy = std::stod(f[3]);
      r.grad_norm = std::stod(f[4]);
      r.easy = std::stoull(f[5]);
      r.hard = std::stoull(f[6]);
      r.mid = std::stoull(f[7]);
      r.eta = std::stod(f[8]);
      r.kl = std::stod(f[9]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw DataError("malformed metrics CSV row: " + line);
    }
  }
  return rows;
}

inline std::vector<StepMetrics> read_metrics(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open metrics file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_metrics_csv(ss.str());
}

// Shape statistics of a training curve.
struct DynamicsSummary {
  std::size_t steps = 0;
  double offline_first10 = 0.0;    // mean offline_ratio over the first 10 steps
  double offline_last100 = 0.0;    // ... and over the last 100
  double offline_first_quarter = 0.0;
  double offline_final_quarter = 0.0;
  double entropy_final_quarter = 0.0;
  double reward_first_quarter = 0.0;
  double reward_final_quarter = 0.0;
  // Sample standard deviation of grad_norm[t] - grad_norm[t-1] over the final half.
  double grad_norm_step_std = 0.0;
};

inline DynamicsSummary summarize_dynamics(std::span<const StepMetrics> rows) {
  DynamicsSummary s;
  const std::size_t n = rows.size();
  s.steps = n;
  if (n == 0) return s;
  auto mean = [&](std::size_t a, std::size_t b, double StepMetrics::*f) {
    double acc = 0.0;
    for (std::size_t i = a; i < b; ++i) acc += rows[i].*f;
    return b > a ? acc / static_cast<double>(b - a) : 0.0;
  };
  const std::size_t q = std::max<std::size_t>(1, n / 4);
  s.offline_first10 = mean(0, std::min<std::size_t>(10, n), &StepMetrics::offline_ratio);
  s.offline_last100 = mean(n - std::min<std::size_t>(100, n), n, &StepMetrics::offline_ratio);
  s.offline_first_quarter = mean(0, q, &StepMetrics::offline_ratio);
  s.offline_final_quarter = mean(n - q, n, &StepMetrics::offline_ratio);
  s.entropy_final_quarter = mean(n - q, n, &StepMetrics::mean_entropy);
  s.reward_first_quarter = mean(0, q, &StepMetrics::mean_reward);
  s.reward_final_quarter = mean(n - q, n, &StepMetrics::mean_reward);
  std::vector<double> diffs;
  for (std::size_t i = std::max<std::size_t>(1, n / 2); i < n; ++i)
    diffs.push_back(rows[i].grad_norm - rows[i - 1].grad_norm);
  if (diffs.size() > 1) {
    const double m = mean_and_stderr(diffs).value;
    double ss = 0.0;
    for (double d : diffs) ss += (d - m) * (d - m);
    s.grad_norm_step_std = std::sqrt(ss / static_cast<double>(diffs.size() - 1));
  }
  return s;
}

}  // namespace dypo
