#pragma once

// Synthetic verifiable-reward tasks.
//
// Modular arithmetic chains: a query is a start value s in Z_P and a chain of
// L operations (add c or multiply by c, c in [1, P)). The reference solution
// writes the intermediate values v_1 .. v_{L-1}, a separator, the final value
// v_L and the stop token. Reward is 1 iff a trajectory terminates and the
// segment between its first separator and the stop token equals [v_L].
//
// Vocabulary layout for modulus P:
//   0 .. P-1   value digits
//   P          separator
//   P + 1      stop
//   P + 2      filler (reasoning no-op, used by teacher styles)
//   P + 3      add operator   (prompt only)
//   P + 4      mul operator   (prompt only)

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dypo/error.hpp"
#include "dypo/policy.hpp"
#include "dypo/random.hpp"

namespace dypo {

enum class TaskFamily { kModularChain };

inline TaskFamily parse_task_family(std::string_view name) {
  if (name == "modular_chain") return TaskFamily::kModularChain;
  throw ConfigError("unknown task family '" + std::string(name) + "'");
}

inline const char* to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::kModularChain:
      return "modular_chain";
  }
  return "?";
}

using RewardValue = int;

struct ChainOp {
  bool multiply = false;
  Token operand = 1;

  bool operator==(const ChainOp&) const = default;
};

struct Query {
  QueryId id = 0;
  TaskFamily family = TaskFamily::kModularChain;
  std::vector<Token> prompt;
  Trajectory ground_truth;
  std::size_t chain_length = 0;
  Token start = 0;
  std::vector<ChainOp> ops;

  bool operator==(const Query&) const = default;
};

struct TaskConfig {
  std::string family = "modular_chain";
  std::uint32_t modulus = 7;
  std::size_t min_chain = 1;
  std::size_t max_chain = 6;
  std::size_t max_length = 12;
  std::size_t pool_size = 12;

  bool operator==(const TaskConfig&) const = default;
};

class ArithmeticTask {
 public:
  ArithmeticTask() : ArithmeticTask(TaskConfig{}) {}
  explicit ArithmeticTask(const TaskConfig& cfg)
      : family_(parse_task_family(cfg.family)),
        modulus_(cfg.modulus),
        min_chain_(cfg.min_chain),
        max_chain_(cfg.max_chain),
        max_length_(cfg.max_length) {
    if (modulus_ < 2) throw ConfigError("task.modulus must be >= 2");
    if (min_chain_ < 1 || min_chain_ > max_chain_)
      throw ConfigError("task chain range must satisfy 1 <= min_chain <= max_chain");
    // Distinct intermediate values need at most P of them.
    if (max_chain_ > modulus_) throw ConfigError("task.max_chain must not exceed task.modulus");
    if (max_length_ < max_chain_ + 2)
      throw ConfigError("task.max_length must be >= max_chain + 2 to fit the reference solution");
  }

  TaskFamily family() const { return family_; }
  std::uint32_t modulus() const { return modulus_; }
  std::size_t min_chain() const { return min_chain_; }
  std::size_t max_chain() const { return max_chain_; }
  std::size_t max_length() const { return max_length_; }

  std::size_t vocab() const { return modulus_ + 5; }
  Token sep() const { return modulus_; }
  Token stop() const { return modulus_ + 1; }
  Token filler() const { return modulus_ + 2; }
  Token add_op() const { return modulus_ + 3; }
  Token mul_op() const { return modulus_ + 4; }

  PolicyShape policy_shape(std::size_t history_order = 1) const {
    return {vocab(), history_order, stop(), max_length_};
  }

  Token apply(Token v, const ChainOp& op) const {
    const std::uint64_t r = op.multiply ? std::uint64_t{v} * op.operand : std::uint64_t{v} + op.operand;
    return static_cast<Token>(r % modulus_);
  }

  std::vector<Token> trace(Token start, std::span<const ChainOp> ops) const {
    std::vector<Token> values;
    Token v = start;
    for (const auto& op : ops) values.push_back(v = apply(v, op));
    return values;
  }

  // [v_1 .. v_{L-1}, SEP, v_L, STOP]
  Trajectory solution_from_trace(std::span<const Token> values) const {
    Trajectory t;
    t.tokens.assign(values.begin(), values.end() - 1);
    t.tokens.push_back(sep());
    t.tokens.push_back(values.back());
    t.tokens.push_back(stop());
    t.terminal = true;
    return t;
  }

  // Rejection-samples a chain whose intermediate values are pairwise distinct,
  // so the reference solution never revisits an order-1 context.
  Query generate_query(std::size_t chain_length, Rng& rng) const {
    if (chain_length < 1 || chain_length > max_chain_)
      throw InputError("chain length " + std::to_string(chain_length) + " outside [1, " +
                       std::to_string(max_chain_) + "]");
    for (;;) {
      Query q;
      q.family = family_;
      q.chain_length = chain_length;
      q.start = static_cast<Token>(uniform_index(rng, modulus_));
      for (std::size_t i = 0; i < chain_length; ++i) {
        ChainOp op;
        op.multiply = uniform_index(rng, 2) == 1;
        op.operand = static_cast<Token>(1 + uniform_index(rng, modulus_ - 1));
        q.ops.push_back(op);
      }
      auto values = trace(q.start, q.ops);
      auto sorted = values;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) continue;

      q.prompt.push_back(q.start);
      for (const auto& op : q.ops) {
        q.prompt.push_back(op.multiply ? mul_op() : add_op());
        q.prompt.push_back(op.operand);
      }
      q.ground_truth = solution_from_trace(values);
      std::uint64_t h = fnv1a(to_string(family_));
      for (Token tok : q.prompt) h = hash_combine(h, tok);
      q.id = h;
      return q;
    }
  }

  // Tokens strictly between the first separator and the final stop token.
  // False when the trajectory has no terminal answer segment.
  bool answer_segment(const Trajectory& traj, std::vector<Token>& out) const {
    out.clear();
    if (!traj.terminal || traj.tokens.empty() || traj.tokens.back() != stop()) return false;
    auto sep_it = std::find(traj.tokens.begin(), traj.tokens.end(), sep());
    if (sep_it == traj.tokens.end()) return false;
    out.assign(sep_it + 1, traj.tokens.end() - 1);
    return true;
  }

  RewardValue reward(const Query& query, const Trajectory& traj) const {
    if (traj.tokens.size() > max_length_) return 0;
    std::vector<Token> got, want;
    if (!answer_segment(traj, got)) return 0;
    answer_segment(query.ground_truth, want);
    return got == want ? 1 : 0;
  }

  std::vector<RewardValue> rewards(const Query& query, std::span<const Trajectory> trajs) const {
    std::vector<RewardValue> out;
    out.reserve(trajs.size());
    for (const auto& t : trajs) out.push_back(reward(query, t));
    return out;
  }

 private:
  TaskFamily family_;
  std::uint32_t modulus_;
  std::size_t min_chain_;
  std::size_t max_chain_;
  std::size_t max_length_;
};

inline Query generate_query(const ArithmeticTask& task, std::string_view family, std::size_t difficulty,
                            Rng& rng) {
  if (parse_task_family(family) != task.family())
    throw ConfigError("task family '" + std::string(family) + "' does not match the configured task");
  return task.generate_query(difficulty, rng);
}

// Fixed pool of queries with chain lengths cycling through [min_chain, max_chain],
// so every difficulty is equally represented.
inline std::vector<Query> make_query_pool(const ArithmeticTask& task, std::size_t pool_size, Rng& rng) {
  if (pool_size == 0) throw ConfigError("task.pool_size must be >= 1");
  std::vector<Query> pool;
  const std::size_t span = task.max_chain() - task.min_chain() + 1;
  for (std::size_t i = 0; i < pool_size; ++i)
    pool.push_back(task.generate_query(task.min_chain() + i % span, rng));
  return pool;
}

// Correct-by-construction demonstrator with a teacher-specific writing style.
//
// Odd teacher ids reorder each run of same-kind operations (a fixed
// permutation per query, drawn from noise_seed), which changes the written
// intermediate values but not the answer. Teacher ids >= 2 insert filler
// tokens into the reasoning prefix at rate 0.25 * (id / 2), capped at 0.75.
// Teacher 0 writes the canonical reference solution.
struct TeacherOracle {
  std::size_t teacher_id = 0;
  TaskFamily family = TaskFamily::kModularChain;
  std::uint64_t noise_seed = 0;

  bool reorders() const { return teacher_id % 2 == 1; }
  double filler_rate() const { return std::min(0.75, 0.25 * static_cast<double>(teacher_id / 2)); }
};

inline std::vector<TeacherOracle> make_teachers(std::size_t m, TaskFamily family, std::uint64_t noise_seed) {
  if (m == 0) throw ConfigError("teacher count m must be >= 1");
  std::vector<TeacherOracle> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back({i, family, noise_seed});
  return out;
}

inline Trajectory teacher_sample(const ArithmeticTask& task, const TeacherOracle& oracle, const Query& query,
                                 Rng& rng) {
  if (oracle.family != query.family || query.family != task.family())
    throw InputError("query outside the teacher's task family");

  std::vector<ChainOp> ops = query.ops;
  if (oracle.reorders()) {
    Rng style(hash_combine(hash_combine(oracle.noise_seed, oracle.teacher_id), query.id));
    std::size_t i = 0;
    while (i < ops.size()) {
      std::size_t j = i;
      while (j < ops.size() && ops[j].multiply == ops[i].multiply) ++j;
      // Additions commute; multiplications commute. Shuffling a run keeps v_L.
      for (std::size_t a = j - i; a > 1; --a) std::swap(ops[i + a - 1], ops[i + uniform_index(style, a)]);
      i = j;
    }
  }
  const auto values = task.trace(query.start, ops);
  const double rate = oracle.filler_rate();

  Trajectory demo;
  std::size_t budget = task.max_length() - (values.size() + 2);
  auto maybe_filler = [&] {
    if (rate > 0.0 && budget > 0 && uniform01(rng) < rate) {
      demo.tokens.push_back(task.filler());
      --budget;
    }
  };
  maybe_filler();
  for (std::size_t i = 0; i + 1 < values.size(); ++i) {
    demo.tokens.push_back(values[i]);
    maybe_filler();
  }
  demo.tokens.push_back(task.sep());
  demo.tokens.push_back(values.back());
  demo.tokens.push_back(task.stop());
  demo.terminal = true;
  return demo;
}

// Vector-space model of teacher supervision: teacher i emits
// tau_star + b_sys + b_i with b_i ~ N(0, sigma^2 / d * I), so E||b_i||^2 = sigma^2.
struct BiasTestbedConfig {
  std::size_t dim = 8;
  std::vector<double> tau_star;
  std::vector<double> b_sys;
  double sigma_bias = 1.0;

  void validate() const {
    if (dim == 0) throw ConfigError("testbed.dim must be >= 1");
    if (tau_star.size() != dim || b_sys.size() != dim)
      throw ConfigError("testbed tau_star and b_sys must have length dim");
    if (!(sigma_bias >= 0.0) || !std::isfinite(sigma_bias)) throw ConfigError("testbed.sigma_bias must be >= 0");
  }

  double b_sys_squared_norm() const {
    return std::inner_product(b_sys.begin(), b_sys.end(), b_sys.begin(), 0.0);
  }

  // Testbed with tau_star = 0 and b_sys along the all-ones direction scaled to the given norm.
  static BiasTestbedConfig isotropic(std::size_t dim, double b_sys_norm, double sigma_bias) {
    BiasTestbedConfig c;
    c.dim = dim;
    c.tau_star.assign(dim, 0.0);
    c.b_sys.assign(dim, b_sys_norm / std::sqrt(static_cast<double>(dim)));
    c.sigma_bias = sigma_bias;
    return c;
  }
};

// One draw of ||mean_i(tau^(i)) - tau_star||^2 for an ensemble of m teachers.
inline double bias_sample(const BiasTestbedConfig& cfg, std::size_t m, Rng& rng) {
  if (m == 0) throw InputError("bias_sample needs m >= 1 teachers");
  cfg.validate();
  std::normal_distribution<double> noise(0.0, cfg.sigma_bias / std::sqrt(static_cast<double>(cfg.dim)));
  std::vector<double> mean(cfg.dim, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < cfg.dim; ++j) {
      const double b = cfg.sigma_bias > 0.0 ? noise(rng) : 0.0;
      mean[j] += cfg.tau_star[j] + cfg.b_sys[j] + b;
    }
  double acc = 0.0;
  for (std::size_t j = 0; j < cfg.dim; ++j) {
    const double e = mean[j] / static_cast<double>(m) - cfg.tau_star[j];
    acc += e * e;
  }
  return acc;
}

}  // namespace dypo
