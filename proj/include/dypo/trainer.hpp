#pragma once

// End-to-end training loop: batch of queries -> rollout groups -> grading ->
// routed losses -> one plain gradient-descent step -> StepMetrics.
//
// Randomness comes from named substreams of the root seed:
//   "pool"     query pool generation
//   "query"    which pool entries form each batch (shared by all variants)
//   "rollout"  per-query rollout seeds
//   "teacher"  per-query teacher choice / style seeds
//   "pairs"    per-query GAL pair subsampling seeds
// Per-query seeds are drawn sequentially before any per-query work, so the
// threaded mode computes exactly what the sequential mode computes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dypo/config.hpp"
#include "dypo/error.hpp"
#include "dypo/grading.hpp"
#include "dypo/instrumentation.hpp"
#include "dypo/objectives.hpp"
#include "dypo/policy.hpp"
#include "dypo/random.hpp"
#include "dypo/task_env.hpp"

namespace dypo {

inline PolicyParams initial_policy(const ArithmeticTask& task, std::span<const Query> pool, const PriorConfig& prior,
                                   std::size_t history_order) {
  PolicyParams params(task.policy_shape(history_order));
  for (const auto& q : pool) {
    const auto& gt = q.ground_truth.tokens;
    const std::size_t answer_pos = gt.size() - 2;
    for (std::size_t t = 0; t < gt.size(); ++t) {
      auto row = params.mutable_logits(context_at(params.shape(), q.id, gt, t));
      if (t != answer_pos) {
        row[gt[t]] = prior.confidence;
        continue;
      }
      const double margin = prior.answer_slope * (prior.answer_pivot - static_cast<double>(q.chain_length));
      row[gt[t]] = prior.confidence + margin;
      row[(gt[t] + 1) % task.modulus()] = prior.confidence - margin;
    }
  }
  return params;
}

struct Checkpoint {
  std::size_t step = 0;
  TrainConfig config;
  PolicyParams params;
  ReferencePolicy reference;
  std::map<std::string, std::string> rng_states;
  std::vector<StepMetrics> metrics;
};

inline Json params_to_json(const PolicyParams& p) {
  Json contexts = Json::array();
  Json theta = Json::array();
  for (const auto& [ctx, row] : p.table()) {
    contexts.push_back({ctx.query, ctx.history});
    for (double v : row) theta.push_back(v);
  }
  const auto& s = p.shape();
  return {{"vocab", s.vocab},         {"history_order", s.history_order}, {"stop_token", s.stop_token},
          {"max_length", s.max_length}, {"contexts", contexts},             {"theta", theta}};
}

inline PolicyParams params_from_json(const Json& j) {
  try {
    PolicyShape s{j.at("vocab").get<std::size_t>(), j.at("history_order").get<std::size_t>(),
                  j.at("stop_token").get<Token>(), j.at("max_length").get<std::size_t>()};
    PolicyParams p(s);
    const auto& contexts = j.at("contexts");
    const auto& theta = j.at("theta");
    if (theta.size() != contexts.size() * s.vocab) throw DataError("checkpoint theta has the wrong length");
    std::size_t idx = 0;
    for (const auto& c : contexts) {
      auto row = p.mutable_logits({c.at(0).get<QueryId>(), c.at(1).get<std::uint64_t>()});
      for (double& v : row) v = theta.at(idx++).get<double>();
    }
    return p;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed checkpoint parameters: ") + e.what());
  }
}

inline Json metrics_to_json(const StepMetrics& m) {
  return {{"step", m.step}, {"mean_reward", m.mean_reward}, {"offline_ratio", m.offline_ratio},
          {"mean_entropy", m.mean_entropy}, {"grad_norm", m.grad_norm}, {"easy", m.easy},
          {"hard", m.hard}, {"mid", m.mid}, {"eta", m.eta}, {"kl", m.kl}};
}

inline StepMetrics metrics_from_json(const Json& j) {
  StepMetrics m;
  m.step = j.at("step").get<std::size_t>();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.offline_ratio = j.at("offline_ratio").get<double>();
  m.mean_entropy = j.at("mean_entropy").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.easy = j.at("easy").get<std::size_t>();
  m.hard = j.at("hard").get<std::size_t>();
  m.mid = j.at("mid").get<std::size_t>();
  m.eta = j.at("eta").get<double>();
  m.kl = j.at("kl").get<double>();
  return m;
}

inline Json checkpoint_to_json(const Checkpoint& c) {
  Json metrics = Json::array();
  for (const auto& m : c.metrics) metrics.push_back(metrics_to_json(m));
  return {{"format", "dypo-checkpoint-v1"},
          {"step", c.step},
          {"config", to_json(c.config)},
          {"params", params_to_json(c.params)},
          {"reference", params_to_json(c.reference.params())},
          {"rng", c.rng_states},
          {"metrics", metrics}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    if (j.at("format") != "dypo-checkpoint-v1") throw DataError("unsupported checkpoint format");
    Checkpoint c;
    c.step = j.at("step").get<std::size_t>();
    c.config = config_from_json(j.at("config"));
    c.params = params_from_json(j.at("params"));
    c.reference = ReferencePolicy(params_from_json(j.at("reference")));
    c.rng_states = j.at("rng").get<std::map<std::string, std::string>>();
    for (const auto& m : j.at("metrics")) c.metrics.push_back(metrics_from_json(m));
    return c;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { write_json_file(path, checkpoint_to_json(c)); }

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

// Result of one query's routed work within a step.
struct QueryOutcome {
  GroupRollout group;
  Grade grade = Grade::kMid;
  bool routed = false;
  LossReport report;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        task_(cfg_.task),
        query_rng_(substream(cfg_.seed, "query")),
        rollout_rng_(substream(cfg_.seed, "rollout")),
        teacher_rng_(substream(cfg_.seed, "teacher")),
        pairs_rng_(substream(cfg_.seed, "pairs")) {
    cfg_.validate();
    setup_static();
    params_ = initial_policy(task_, pool_, cfg_.prior, cfg_.history_order);
    ref_ = ReferencePolicy(params_);
  }

  explicit Trainer(const Checkpoint& ckpt) : cfg_(ckpt.config), task_(cfg_.task) {
    cfg_.validate();
    setup_static();
    params_ = ckpt.params;
    ref_ = ckpt.reference;
    step_ = ckpt.step;
    metrics_ = ckpt.metrics;
    auto get = [&](const char* name) {
      auto it = ckpt.rng_states.find(name);
      if (it == ckpt.rng_states.end()) throw DataError(std::string("checkpoint lacks rng state '") + name + "'");
      return rng_from_state(it->second);
    };
    query_rng_ = get("query");
    rollout_rng_ = get("rollout");
    teacher_rng_ = get("teacher");
    pairs_rng_ = get("pairs");
  }

  const TrainConfig& config() const { return cfg_; }
  const ArithmeticTask& task() const { return task_; }
  std::span<const Query> pool() const { return pool_; }
  std::span<const TeacherOracle> teachers() const { return teachers_; }
  const PolicyParams& params() const { return params_; }
  const ReferencePolicy& reference() const { return ref_; }
  std::size_t current_step() const { return step_; }
  const std::vector<StepMetrics>& metrics() const { return metrics_; }
  bool finished() const { return step_ >= cfg_.steps; }

  // Where to dump a checkpoint if a step produces non-finite values.
  void set_diagnostic_path(std::string path) { diagnostic_path_ = std::move(path); }

  // Called with every query outcome of a step, before the update.
  using OutcomeObserver = std::function<void(const QueryOutcome&)>;
  void set_observer(OutcomeObserver obs) { observer_ = std::move(obs); }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.step = step_;
    c.config = cfg_;
    c.params = params_;
    c.reference = ref_;
    c.rng_states = {{"query", rng_state(query_rng_)},
                    {"rollout", rng_state(rollout_rng_)},
                    {"teacher", rng_state(teacher_rng_)},
                    {"pairs", rng_state(pairs_rng_)}};
    c.metrics = metrics_;
    return c;
  }

  StepMetrics step() {
    const std::size_t b = cfg_.batch_size;
    struct Seeds {
      std::size_t query_index;
      std::uint64_t rollout, teacher, pairs;
    };
    std::vector<Seeds> seeds(b);
    for (auto& s : seeds) s.query_index = uniform_index(query_rng_, pool_.size());
    for (auto& s : seeds) {
      s.rollout = rollout_rng_();
      s.teacher = teacher_rng_();
      s.pairs = pairs_rng_();
    }

    std::vector<QueryOutcome> outcomes(b);
    auto work = [&](std::size_t i) {
      Rng rollout(seeds[i].rollout), teacher(seeds[i].teacher), pairs(seeds[i].pairs);
      outcomes[i] = process_query(pool_[seeds[i].query_index], rollout, teacher, pairs);
    };
    if (cfg_.threads <= 1) {
      for (std::size_t i = 0; i < b; ++i) work(i);
    } else {
      std::vector<std::jthread> workers;
      const std::size_t n = std::min(cfg_.threads, b);
      for (std::size_t w = 0; w < n; ++w)
        workers.emplace_back([&, w] {
          for (std::size_t i = w; i < b; i += n) work(i);
        });
    }

    StepMetrics m;
    m.step = step_;
    SparseGradient total(params_.vocab());
    std::size_t routed = 0, rewarded = 0, rollouts = 0;
    double eta_sum = 0.0;
    std::size_t eta_count = 0;
    std::vector<ContextKey> contexts;
    bool finite = true;
    for (const auto& o : outcomes) {
      if (observer_) observer_(o);
      switch (o.grade) {
        case Grade::kEasy:
          ++m.easy;
          break;
        case Grade::kHard:
          ++m.hard;
          break;
        case Grade::kMid:
          ++m.mid;
          break;
      }
      for (RewardValue r : o.group.rewards) rewarded += static_cast<std::size_t>(r);
      rollouts += o.group.size();
      for (const auto& traj : o.group.trajectories)
        for (std::size_t t = 0; t < traj.size(); ++t)
          contexts.push_back(context_at(params_.shape(), o.group.query.id, traj.tokens, t));
      if (o.routed) {
        ++routed;
        finite = finite && std::isfinite(o.report.loss);
        total.add_scaled(o.report.gradient, 1.0);
      }
      if (auto it = o.report.aux.find("eta_contribution"); it != o.report.aux.end()) {
        eta_sum += it->second;
        ++eta_count;
      }
    }
    if (routed > 0) total.scale(1.0 / static_cast<double>(routed));

    m.mean_reward = static_cast<double>(rewarded) / static_cast<double>(rollouts);
    m.offline_ratio = static_cast<double>(m.hard) / static_cast<double>(b);
    // Token-weighted: every generated step of every rollout counts once.
    m.mean_entropy = mean_step_entropy(params_, contexts);
    m.kl = kl_to_reference(params_, ref_, contexts);
    m.grad_norm = total.norm();
    m.eta = eta_count ? eta_sum / static_cast<double>(eta_count) : 0.0;

    if (!finite || !total.all_finite() || !std::isfinite(m.grad_norm)) {
      if (diagnostic_path_) save_checkpoint(*diagnostic_path_, checkpoint());
      throw DataError("non-finite gradient at step " + std::to_string(step_) +
                      (diagnostic_path_ ? "; diagnostic checkpoint written to " + *diagnostic_path_ : ""));
    }

    params_.apply(total, -cfg_.learning_rate);
    ++step_;
    if (cfg_.ref_refresh_period > 0 && step_ % cfg_.ref_refresh_period == 0) ref_ = ReferencePolicy(params_);
    metrics_.push_back(m);
    return m;
  }

  void run() {
    while (!finished()) step();
  }

  void run_steps(std::size_t n) {
    for (std::size_t i = 0; i < n && !finished(); ++i) step();
  }

  QueryOutcome process_query(const Query& q, Rng& rollout, Rng& teacher, Rng& pairs) const {
    QueryOutcome o;
    o.group = rollout_group(task_, params_, q, cfg_.k, rollout);
    o.grade = grade(o.group.rewards);
    switch (cfg_.variant) {
      case Variant::kDypo:
        o.report = dypo_step_loss(params_, ref_, task_, o.group, teachers_, cfg_.mix, {teacher, pairs});
        o.routed = route(o.grade) != Route::kDiscard;
        break;
      case Variant::kGrpoOnly:
        // Easy groups have zero advantage; they are dropped like in dypo so both
        // variants share one aggregation rule.
        o.routed = o.grade != Grade::kEasy;
        if (!o.routed) {
          o.report.gradient = SparseGradient(params_.shape().vocab);
          break;
        }
        populate_advantages(o.group, cfg_.mix.xi);
        o.report = grpo_loss_grad(params_, ref_, o.group, cfg_.mix);
        break;
      case Variant::kSftOnly:
        o.report = sft_loss_grad(params_, task_, q, teachers_, teacher);
        o.report.loss *= cfg_.mix.gamma;
        o.report.gradient.scale(cfg_.mix.gamma);
        o.routed = true;
        break;
    }
    return o;
  }

 private:
  void setup_static() {
    Rng pool_rng = substream(cfg_.seed, "pool");
    pool_ = make_query_pool(task_, cfg_.task.pool_size, pool_rng);
    teachers_ = make_teachers(cfg_.teachers, task_.family(), cfg_.teacher_noise_seed);
  }

  TrainConfig cfg_;
  ArithmeticTask task_;
  std::vector<Query> pool_;
  std::vector<TeacherOracle> teachers_;
  PolicyParams params_;
  ReferencePolicy ref_;
  Rng query_rng_, rollout_rng_, teacher_rng_, pairs_rng_;
  std::size_t step_ = 0;
  std::vector<StepMetrics> metrics_;
  std::optional<std::string> diagnostic_path_;
  OutcomeObserver observer_;
};

inline Checkpoint train(const TrainConfig& cfg) {
  Trainer t(cfg);
  t.run();
  return t.checkpoint();
}

struct EvalReport {
  double pass_rate = 0.0;
  GradeCounts grades;
  double mean_entropy = 0.0;
  std::size_t n_queries = 0;
};

// Rolls out without updating. pass_rate = fraction of queries with at least
// one rewarded trajectory among k.
inline EvalReport evaluate(const PolicyParams& params, const ArithmeticTask& task, std::span<const Query> pool,
                           std::size_t n_queries, std::size_t k, Rng& rng) {
  if (n_queries < 1) throw InputError("evaluate needs n_queries >= 1");
  if (pool.empty()) throw InputError("evaluate needs a non-empty query pool");
  EvalReport rep;
  rep.n_queries = n_queries;
  std::size_t passed = 0;
  std::vector<ContextKey> contexts;
  for (std::size_t i = 0; i < n_queries; ++i) {
    const Query& q = pool[uniform_index(rng, pool.size())];
    const auto group = sample_group(params, q.id, k, rng);
    const auto rewards = task.rewards(q, group);
    rep.grades.add(grade(rewards));
    if (std::find(rewards.begin(), rewards.end(), 1) != rewards.end()) ++passed;
    for (const auto& traj : group)
      for (std::size_t t = 0; t < traj.size(); ++t) contexts.push_back(context_at(params.shape(), q.id, traj.tokens, t));
  }
  rep.pass_rate = static_cast<double>(passed) / static_cast<double>(n_queries);
  rep.mean_entropy = mean_step_entropy(params, contexts);
  return rep;
}

// Trains each variant from the same seed. The "query" substream only feeds
// batch selection, so all variants see the identical query sequence.
inline std::map<Variant, std::vector<StepMetrics>> run_comparison(const TrainConfig& cfg,
                                                                 std::span<const Variant> variants) {
  std::map<Variant, std::vector<StepMetrics>> out;
  for (Variant v : variants) {
    TrainConfig c = cfg;
    c.variant = v;
    Trainer t(c);
    t.run();
    out[v] = t.metrics();
  }
  return out;
}

// Mean GAL discrimination difficulty over freshly sampled Mid groups at fixed theta.
inline double probe_eta(const Trainer& t, std::size_t n_groups, Rng& rng) {
  const auto& cfg = t.config();
  double acc = 0.0;
  std::size_t found = 0, attempts = 0;
  while (found < n_groups) {
    if (++attempts > 200 * n_groups) throw BenchError("probe_eta could not find enough Mid groups");
    const Query& q = t.pool()[uniform_index(rng, t.pool().size())];
    GroupRollout g = rollout_group(t.task(), t.params(), q, cfg.k, rng);
    if (grade(g.rewards) != Grade::kMid) continue;
    const auto pairs = build_pairs(g, cfg.mix.pair_cap, rng);
    acc += gal_loss_grad(t.params(), t.reference(), pairs, q, cfg.mix).aux["eta_contribution"];
    ++found;
  }
  return acc / static_cast<double>(found);
}

struct EtaProbe {
  std::size_t step = 0;
  double eta = 0.0;
};

// Trains until the probed eta is at or below bench.eta_target, probing every
// bench.check_every steps (and before the first step). Returns the probe trace;
// the last entry is the stopping point.
inline std::vector<EtaProbe> train_until_eta(Trainer& t, Rng& rng) {
  const auto& b = t.config().bench;
  if (b.check_every < 1) throw ConfigError("bench.check_every must be >= 1");
  std::vector<EtaProbe> trace;
  for (;;) {
    trace.push_back({t.current_step(), probe_eta(t, b.probe_groups, rng)});
    if (trace.back().eta <= b.eta_target) return trace;
    if (t.current_step() >= b.max_train_steps)
      throw BenchError("eta stayed above " + format_real(b.eta_target) + " for " +
                       std::to_string(b.max_train_steps) + " training steps");
    for (std::size_t i = 0; i < b.check_every && t.current_step() < b.max_train_steps; ++i) t.step();
  }
}

struct AnnealingPoint {
  std::size_t step = 0;
  double eta = 0.0;
  VarianceEstimate gal;
};

// GAL estimator variance at several checkpoints of one dypo run (sorted steps).
inline std::vector<AnnealingPoint> gal_annealing_trace(const TrainConfig& cfg, std::span<const std::size_t> steps,
                                                       std::size_t n_groups, Rng& rng) {
  if (!std::is_sorted(steps.begin(), steps.end())) throw InputError("annealing checkpoints must be sorted");
  TrainConfig c = cfg;
  c.variant = Variant::kDypo;
  c.steps = steps.empty() ? 0 : steps.back();
  Trainer t(c);
  std::vector<AnnealingPoint> out;
  for (std::size_t s : steps) {
    t.run_steps(s - t.current_step());
    auto rep = variance_ordering_bench(t.params(), t.reference(), t.task(), t.pool(), c.mix, c.k, n_groups, rng);
    out.push_back({s, rep.eta, std::move(rep.gal)});
  }
  return out;
}

}  // namespace dypo
