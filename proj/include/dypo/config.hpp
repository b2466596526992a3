#pragma once

// Experiment configuration. Configs are JSON documents with a strict schema:
// every key is optional (defaults below) but unknown keys are rejected so a
// misspelled hyperparameter cannot silently fall back to its default.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "dypo/error.hpp"
#include "dypo/objectives.hpp"
#include "dypo/task_env.hpp"
#include "json.hpp"

namespace dypo {

using Json = nlohmann::json;

enum class Variant { kDypo, kSftOnly, kGrpoOnly };

inline Variant parse_variant(const std::string& s) {
  if (s == "dypo") return Variant::kDypo;
  if (s == "sft_only") return Variant::kSftOnly;
  if (s == "grpo_only") return Variant::kGrpoOnly;
  throw ConfigError("variant must be one of dypo, sft_only, grpo_only; got '" + s + "'");
}

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::kDypo:
      return "dypo";
    case Variant::kSftOnly:
      return "sft_only";
    case Variant::kGrpoOnly:
      return "grpo_only";
  }
  return "?";
}

// Initial ("pretrained") policy: fluent along each query's reference solution
// (the next reference token has logit `confidence`), but unreliable at the
// answer slot. After the separator the correct value gets confidence + margin
// and a distractor value (correct + 1 mod P) gets confidence - margin, where
// margin = answer_slope * (answer_pivot - L). Long chains start out confidently wrong.
struct PriorConfig {
  double confidence = 6.0;
  double answer_slope = 1.0;
  double answer_pivot = 3.0;

  bool operator==(const PriorConfig&) const = default;
};

struct TestbedConfig {
  std::size_t dim = 8;
  double b_sys_norm = 1.0;
  double sigma_bias = 1.0;
  std::size_t draws = 100000;
  std::vector<std::size_t> m_values = {1, 2, 4, 8, 16};

  bool operator==(const TestbedConfig&) const = default;
};

struct BenchConfig {
  std::size_t groups = 5000;
  double eta_target = 0.2;
  std::size_t check_every = 25;
  std::size_t probe_groups = 300;
  std::size_t max_train_steps = 2000;

  bool operator==(const BenchConfig&) const = default;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t steps = 500;
  std::size_t batch_size = 12;
  std::size_t k = 8;
  double learning_rate = 0.1;
  Variant variant = Variant::kDypo;
  MixConfig mix;
  TaskConfig task;
  PriorConfig prior;
  std::size_t teachers = 4;
  std::uint64_t teacher_noise_seed = 17;
  std::size_t ref_refresh_period = 0;
  std::size_t history_order = 1;
  std::size_t threads = 1;
  TestbedConfig testbed;
  BenchConfig bench;

  void validate() const {
    if (k < 2) throw ConfigError("k must be >= 2");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (teachers < 1) throw ConfigError("teachers must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (history_order < 1 || history_order > 4) throw ConfigError("history_order must be in [1, 4]");
    mix.validate();
    ArithmeticTask{task};
    if (task.pool_size < 1) throw ConfigError("task.pool_size must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

namespace detail {

// Reads fields of one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config field '" + display() + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config field '" + child(key) + "' has the wrong type");
    }
  }

  const Json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config field '" + child(it.key().c_str()) + "'");
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline MixConfig mix_from_json(const Json& j, const std::string& path = "mix") {
  MixConfig m;
  detail::ObjectReader r(j, path);
  r.get("alpha", m.alpha);
  r.get("gamma", m.gamma);
  r.get("beta_gal", m.beta_gal);
  r.get("beta_kl", m.beta_kl);
  r.get("epsilon_clip", m.epsilon_clip);
  r.get("xi", m.xi);
  r.get("pair_cap", m.pair_cap);
  std::string level = to_string(m.ratio_level), anchor = to_string(m.ratio_anchor);
  r.get("ratio_level", level);
  r.get("ratio_anchor", anchor);
  r.finish();
  m.ratio_level = parse_ratio_level(level);
  m.ratio_anchor = parse_ratio_anchor(anchor);
  return m;
}

inline Json to_json(const MixConfig& m) {
  return {{"alpha", m.alpha},
          {"gamma", m.gamma},
          {"beta_gal", m.beta_gal},
          {"beta_kl", m.beta_kl},
          {"epsilon_clip", m.epsilon_clip},
          {"xi", m.xi},
          {"pair_cap", m.pair_cap},
          {"ratio_level", to_string(m.ratio_level)},
          {"ratio_anchor", to_string(m.ratio_anchor)}};
}

inline TrainConfig config_from_json(const Json& j) {
  TrainConfig c;
  detail::ObjectReader r(j, "");
  r.get("seed", c.seed);
  r.get("steps", c.steps);
  r.get("batch_size", c.batch_size);
  r.get("k", c.k);
  r.get("learning_rate", c.learning_rate);
  std::string variant = to_string(c.variant);
  r.get("variant", variant);
  c.variant = parse_variant(variant);
  if (const Json* m = r.sub("mix")) c.mix = mix_from_json(*m);
  if (const Json* t = r.sub("task")) {
    detail::ObjectReader tr(*t, "task");
    tr.get("family", c.task.family);
    tr.get("modulus", c.task.modulus);
    tr.get("min_chain", c.task.min_chain);
    tr.get("max_chain", c.task.max_chain);
    tr.get("max_length", c.task.max_length);
    tr.get("pool_size", c.task.pool_size);
    tr.finish();
  }
  if (const Json* p = r.sub("prior")) {
    detail::ObjectReader pr(*p, "prior");
    pr.get("confidence", c.prior.confidence);
    pr.get("answer_slope", c.prior.answer_slope);
    pr.get("answer_pivot", c.prior.answer_pivot);
    pr.finish();
  }
  r.get("teachers", c.teachers);
  r.get("teacher_noise_seed", c.teacher_noise_seed);
  r.get("ref_refresh_period", c.ref_refresh_period);
  r.get("history_order", c.history_order);
  r.get("threads", c.threads);
  if (const Json* t = r.sub("testbed")) {
    detail::ObjectReader tr(*t, "testbed");
    tr.get("dim", c.testbed.dim);
    tr.get("b_sys_norm", c.testbed.b_sys_norm);
    tr.get("sigma_bias", c.testbed.sigma_bias);
    tr.get("draws", c.testbed.draws);
    tr.get("m_values", c.testbed.m_values);
    tr.finish();
  }
  if (const Json* b = r.sub("bench")) {
    detail::ObjectReader br(*b, "bench");
    br.get("groups", c.bench.groups);
    br.get("eta_target", c.bench.eta_target);
    br.get("check_every", c.bench.check_every);
    br.get("probe_groups", c.bench.probe_groups);
    br.get("max_train_steps", c.bench.max_train_steps);
    br.finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline Json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"k", c.k},
          {"learning_rate", c.learning_rate},
          {"variant", to_string(c.variant)},
          {"mix", to_json(c.mix)},
          {"task",
           {{"family", c.task.family},
            {"modulus", c.task.modulus},
            {"min_chain", c.task.min_chain},
            {"max_chain", c.task.max_chain},
            {"max_length", c.task.max_length},
            {"pool_size", c.task.pool_size}}},
          {"prior",
           {{"confidence", c.prior.confidence},
            {"answer_slope", c.prior.answer_slope},
            {"answer_pivot", c.prior.answer_pivot}}},
          {"teachers", c.teachers},
          {"teacher_noise_seed", c.teacher_noise_seed},
          {"ref_refresh_period", c.ref_refresh_period},
          {"history_order", c.history_order},
          {"threads", c.threads},
          {"testbed",
           {{"dim", c.testbed.dim},
            {"b_sys_norm", c.testbed.b_sys_norm},
            {"sigma_bias", c.testbed.sigma_bias},
            {"draws", c.testbed.draws},
            {"m_values", c.testbed.m_values}}},
          {"bench",
           {{"groups", c.bench.groups},
            {"eta_target", c.bench.eta_target},
            {"check_every", c.bench.check_every},
            {"probe_groups", c.bench.probe_groups},
            {"max_train_steps", c.bench.max_train_steps}}}};
}

inline Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read '" + path + "'");
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline TrainConfig load_config(const std::string& path) {
  Json j;
  try {
    j = read_json_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace dypo
