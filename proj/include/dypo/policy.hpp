#pragma once

// Contextual tabular softmax policy with closed-form score functions.
//
// The policy conditions on (query id, last n generated tokens). Every
// probability, log-probability and gradient is computed in double precision
// with the max-shift log-sum-exp, so logits of any magnitude stay finite.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dypo/error.hpp"
#include "dypo/gradient.hpp"
#include "dypo/random.hpp"

namespace dypo {

struct Trajectory {
  std::vector<Token> tokens;
  // Ended with the stop token (as opposed to running into the length limit).
  bool terminal = false;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const Trajectory&) const = default;
};

struct PolicyShape {
  std::size_t vocab = 0;
  std::size_t history_order = 1;
  Token stop_token = 0;
  std::size_t max_length = 0;

  bool operator==(const PolicyShape&) const = default;

  void validate() const {
    if (vocab < 2) throw ConfigError("policy vocab must be >= 2");
    if (history_order < 1 || history_order > 4)
      throw ConfigError("history_order must be in [1, 4]");
    if (stop_token >= vocab) throw ConfigError("stop token outside vocabulary");
    if (max_length < 1) throw ConfigError("max_length must be >= 1");
  }
};

// History encoding: last n tokens in base (V + 1), with V standing in for
// positions before the start of the trajectory.
inline std::uint64_t history_key(const PolicyShape& shape, std::span<const Token> prefix) {
  const std::uint64_t base = shape.vocab + 1;
  std::uint64_t key = 0;
  std::uint64_t place = 1;
  for (std::size_t j = 0; j < shape.history_order; ++j) {
    const std::uint64_t tok =
        j < prefix.size() ? prefix[prefix.size() - 1 - j] : static_cast<std::uint64_t>(shape.vocab);
    key += tok * place;
    place *= base;
  }
  return key;
}

inline ContextKey context_at(const PolicyShape& shape, QueryId query, std::span<const Token> tokens,
                             std::size_t t) {
  return {query, history_key(shape, tokens.first(t))};
}

// log softmax with the max-shift trick.
inline void log_softmax(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t a = 0; a < logits.size(); ++a) out[a] = logits[a] - lse;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  log_softmax(logits, out);
  for (double& v : out) v = std::exp(v);
  return out;
}

class PolicyParams {
 public:
  using Table = std::map<ContextKey, std::vector<double>>;

  PolicyParams() = default;
  explicit PolicyParams(PolicyShape shape) : shape_(shape), zeros_(shape.vocab, 0.0) {
    shape_.validate();
  }

  const PolicyShape& shape() const { return shape_; }
  std::size_t vocab() const { return shape_.vocab; }
  const Table& table() const { return table_; }

  // Logits of a context; contexts never written hold all-zero logits.
  std::span<const double> logits(const ContextKey& ctx) const {
    auto it = table_.find(ctx);
    return it == table_.end() ? std::span<const double>(zeros_) : std::span<const double>(it->second);
  }

  std::span<double> mutable_logits(const ContextKey& ctx) {
    auto [it, inserted] = table_.try_emplace(ctx);
    if (inserted) it->second.assign(shape_.vocab, 0.0);
    return it->second;
  }

  std::vector<double> probabilities(const ContextKey& ctx) const { return softmax(logits(ctx)); }

  // theta += scale * g
  void apply(const SparseGradient& g, double scale) {
    for (const auto& [ctx, values] : g.rows()) {
      auto row = mutable_logits(ctx);
      for (std::size_t a = 0; a < values.size(); ++a) row[a] += scale * values[a];
    }
  }

  bool all_finite() const {
    for (const auto& [ctx, row] : table_)
      for (double v : row)
        if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const PolicyParams& other) const {
    return shape_ == other.shape_ && table_ == other.table_;
  }

 private:
  PolicyShape shape_;
  Table table_;
  std::vector<double> zeros_;
};

// Frozen snapshot of the policy. Shares immutable storage, so copies are cheap
// and every read sees the same bits.
class ReferencePolicy {
 public:
  ReferencePolicy() = default;
  explicit ReferencePolicy(const PolicyParams& params)
      : params_(std::make_shared<const PolicyParams>(params)) {}

  const PolicyParams& params() const {
    if (!params_) throw StateError("reference policy is empty");
    return *params_;
  }
  bool empty() const { return !params_; }

 private:
  std::shared_ptr<const PolicyParams> params_;
};

inline void check_trajectory(const PolicyShape& shape, const Trajectory& traj) {
  if (traj.tokens.empty()) throw InputError("trajectory is empty");
  if (traj.tokens.size() > shape.max_length)
    throw InputError("trajectory longer than max_length " + std::to_string(shape.max_length));
  for (Token a : traj.tokens)
    if (a >= shape.vocab)
      throw InputError("token " + std::to_string(a) + " outside vocabulary of size " +
                       std::to_string(shape.vocab));
}

// log pi(a_t | c_t) for every step of the trajectory.
inline std::vector<double> step_log_probs(const PolicyParams& params, QueryId query,
                                          const Trajectory& traj) {
  check_trajectory(params.shape(), traj);
  std::vector<double> out(traj.size());
  std::vector<double> lp(params.vocab());
  for (std::size_t t = 0; t < traj.size(); ++t) {
    log_softmax(params.logits(context_at(params.shape(), query, traj.tokens, t)), lp);
    out[t] = lp[traj.tokens[t]];
  }
  return out;
}

inline double log_prob(const PolicyParams& params, QueryId query, const Trajectory& traj) {
  double acc = 0.0;
  for (double v : step_log_probs(params, query, traj)) acc += v;
  return acc;
}

// Adds scale * (e_a - pi(.|c)) into the row of c.
inline void accumulate_step_score(const PolicyParams& params, const ContextKey& ctx, Token a,
                                  double scale, SparseGradient& out) {
  const auto p = params.probabilities(ctx);
  auto row = out.row(ctx);
  for (std::size_t j = 0; j < p.size(); ++j) row[j] -= scale * p[j];
  row[a] += scale;
}

// Gradient of log pi(traj | query) with respect to the logit table.
inline SparseGradient score(const PolicyParams& params, QueryId query, const Trajectory& traj) {
  check_trajectory(params.shape(), traj);
  SparseGradient g(params.vocab());
  for (std::size_t t = 0; t < traj.size(); ++t)
    accumulate_step_score(params, context_at(params.shape(), query, traj.tokens, t), traj.tokens[t],
                          1.0, g);
  return g;
}

inline Token sample_token(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double cdf = 0.0;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    cdf += probs[a];
    if (u < cdf) return static_cast<Token>(a);
  }
  // u landed in the rounding gap above the final cdf; return the last token with mass.
  for (std::size_t a = probs.size(); a-- > 0;)
    if (probs[a] > 0.0) return static_cast<Token>(a);
  return 0;
}

inline Trajectory sample_trajectory(const PolicyParams& params, QueryId query, Rng& rng) {
  const auto& shape = params.shape();
  Trajectory traj;
  traj.tokens.reserve(shape.max_length);
  while (traj.tokens.size() < shape.max_length) {
    const auto probs = params.probabilities(context_at(shape, query, traj.tokens, traj.tokens.size()));
    const Token a = sample_token(probs, rng);
    traj.tokens.push_back(a);
    if (a == shape.stop_token) {
      traj.terminal = true;
      break;
    }
  }
  return traj;
}

inline std::vector<Trajectory> sample_group(const PolicyParams& params, QueryId query, std::size_t k,
                                            Rng& rng) {
  if (k < 2) throw ConfigError("group size k must be >= 2, got " + std::to_string(k));
  std::vector<Trajectory> group;
  group.reserve(k);
  for (std::size_t i = 0; i < k; ++i) group.push_back(sample_trajectory(params, query, rng));
  return group;
}

// Distinct contexts visited by a set of trajectories, in sorted order.
inline std::vector<ContextKey> visited_contexts(const PolicyShape& shape, QueryId query,
                                                std::span<const Trajectory> trajs) {
  std::vector<ContextKey> out;
  for (const auto& traj : trajs)
    for (std::size_t t = 0; t < traj.size(); ++t) out.push_back(context_at(shape, query, traj.tokens, t));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline double context_entropy(const PolicyParams& params, const ContextKey& ctx) {
  std::vector<double> lp(params.vocab());
  log_softmax(params.logits(ctx), lp);
  double h = 0.0;
  for (double l : lp) h -= std::exp(l) * l;
  return h;
}

// Mean over contexts of -sum_a pi log pi, in nats.
inline double mean_step_entropy(const PolicyParams& params, std::span<const ContextKey> contexts) {
  if (contexts.empty()) throw InputError("mean_step_entropy needs at least one context");
  double acc = 0.0;
  for (const auto& ctx : contexts) acc += context_entropy(params, ctx);
  return acc / static_cast<double>(contexts.size());
}

inline void check_same_shape(const PolicyParams& a, const PolicyParams& b) {
  if (a.vocab() != b.vocab() || a.shape().history_order != b.shape().history_order)
    throw ConfigError("policy and reference differ in vocabulary or history order");
}

inline double context_kl(const PolicyParams& params, const PolicyParams& ref, const ContextKey& ctx) {
  std::vector<double> lp(params.vocab()), lq(params.vocab());
  log_softmax(params.logits(ctx), lp);
  log_softmax(ref.logits(ctx), lq);
  double kl = 0.0;
  for (std::size_t a = 0; a < lp.size(); ++a) kl += std::exp(lp[a]) * (lp[a] - lq[a]);
  // Rounding can leave a -1e-17 residue for identical rows.
  return std::max(kl, 0.0);
}

// Mean over contexts of the exact categorical KL(pi_theta(.|c) || pi_ref(.|c)).
inline double kl_to_reference(const PolicyParams& params, const ReferencePolicy& ref,
                              std::span<const ContextKey> contexts) {
  check_same_shape(params, ref.params());
  if (contexts.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& ctx : contexts) acc += context_kl(params, ref.params(), ctx);
  return acc / static_cast<double>(contexts.size());
}

// Gradient of the mean KL above with respect to the logits of params:
// d KL(p||q) / d z_j = p_j * (log p_j - log q_j - KL).
inline SparseGradient kl_gradient(const PolicyParams& params, const ReferencePolicy& ref,
                                  std::span<const ContextKey> contexts) {
  check_same_shape(params, ref.params());
  SparseGradient g(params.vocab());
  if (contexts.empty()) return g;
  const double inv = 1.0 / static_cast<double>(contexts.size());
  std::vector<double> lp(params.vocab()), lq(params.vocab());
  for (const auto& ctx : contexts) {
    log_softmax(params.logits(ctx), lp);
    log_softmax(ref.params().logits(ctx), lq);
    double kl = 0.0;
    for (std::size_t a = 0; a < lp.size(); ++a) kl += std::exp(lp[a]) * (lp[a] - lq[a]);
    auto row = g.row(ctx);
    for (std::size_t a = 0; a < lp.size(); ++a) row[a] += inv * std::exp(lp[a]) * (lp[a] - lq[a] - kl);
  }
  return g;
}

}  // namespace dypo
