#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 runtime failure or negative bench verdict.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dypo/config.hpp"
#include "dypo/error.hpp"
#include "dypo/gradcheck.hpp"
#include "dypo/instrumentation.hpp"
#include "dypo/trainer.hpp"

namespace dypo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

struct CliOptions {
  std::string command;
  std::optional<std::string> config_path;
  std::string out_dir = "dypo_out";
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> m_values;
  std::optional<std::size_t> groups;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
};

namespace cli_detail {

inline std::string join(const std::filesystem::path& dir, const char* name) { return (dir / name).string(); }

inline Json bench_report(const std::string& name, Json estimates, Json stderrs, bool verdict,
                         const TrainConfig& cfg) {
  return {{"name", name},
          {"estimates", std::move(estimates)},
          {"stderrs", std::move(stderrs)},
          {"verdict", verdict},
          {"config_echo", to_json(cfg)}};
}

class Runner {
 public:
  Runner(const CliOptions& opt, std::ostream& out) : opt_(opt), out_(out), dir_(opt.out_dir) {}

  int run() {
    if (opt_.command == "train") return train();
    if (opt_.command == "variance-bench") return variance_bench();
    if (opt_.command == "bias-bench") return bias_bench();
    if (opt_.command == "grad-check") return grad_check();
    if (opt_.command == "grade-stats") return grade_stats();
    if (opt_.command == "evaluate") return evaluate_cmd();
    if (opt_.command == "compare") return compare();
    throw ConfigError("unknown command '" + opt_.command + "'");
  }

 private:
  TrainConfig effective_config(bool config_required) {
    TrainConfig cfg;
    if (opt_.config_path)
      cfg = load_config(*opt_.config_path);
    else if (config_required)
      throw ConfigError("--config is required for '" + opt_.command + "'");
    apply_overrides(cfg);
    return cfg;
  }

  void apply_overrides(TrainConfig& cfg) {
    if (opt_.seed) cfg.seed = *opt_.seed;
    if (!opt_.m_values.empty()) cfg.testbed.m_values = opt_.m_values;
    if (opt_.groups) cfg.bench.groups = *opt_.groups;
    cfg.validate();
  }

  void prepare_output(const TrainConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir_.string() + "': " + ec.message());
    write_json_file(join(dir_, "config.json"), to_json(cfg));
  }

  static Checkpoint read_checkpoint(const std::string& path) {
    try {
      return load_checkpoint(path);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    } catch (const DataError& e) {
      throw ConfigError("'" + path + "': " + e.what());
    }
  }

  // A checkpoint carries its own config (pool, teachers); flags still override seeds and counts.
  Trainer trainer_for_eval(TrainConfig& cfg) {
    if (!opt_.checkpoint) {
      cfg = effective_config(true);
      return Trainer(cfg);
    }
    Checkpoint ck = read_checkpoint(*opt_.checkpoint);
    cfg = ck.config;
    apply_overrides(cfg);
    ck.config.bench = cfg.bench;
    return Trainer(ck);
  }

  int train() {
    std::optional<Trainer> t;
    TrainConfig cfg;
    if (opt_.resume) {
      if (opt_.config_path) throw ConfigError("--resume and --config are mutually exclusive");
      Checkpoint ck = read_checkpoint(*opt_.resume);
      if (opt_.seed) throw ConfigError("--seed cannot change a resumed run");
      cfg = ck.config;
      t.emplace(ck);
    } else {
      cfg = effective_config(true);
      t.emplace(cfg);
    }
    prepare_output(cfg);
    t->set_diagnostic_path(join(dir_, "diagnostic_checkpoint.json"));
    const std::size_t every = std::max<std::size_t>(1, cfg.steps / 10);
    while (!t->finished()) {
      const auto m = t->step();
      if ((m.step + 1) % every == 0 || t->finished()) {
        char line[200];
        std::snprintf(line, sizeof line, "step %5zu  reward %.3f  offline %.3f  entropy %.3f  grad %.4f  eta %.3f\n",
                      m.step, m.mean_reward, m.offline_ratio, m.mean_entropy, m.grad_norm, m.eta);
        out_ << line;
      }
    }
    write_metrics(join(dir_, "metrics.csv"), t->metrics());
    save_checkpoint(join(dir_, "checkpoint.json"), t->checkpoint());
    out_ << "wrote " << join(dir_, "metrics.csv") << " and " << join(dir_, "checkpoint.json") << '\n';
    return kExitOk;
  }

  int variance_bench() {
    TrainConfig cfg = effective_config(true);
    cfg.variant = Variant::kDypo;
    prepare_output(cfg);
    Trainer t(cfg);
    Rng rng = substream(cfg.seed, "bench");
    const auto trace = train_until_eta(t, rng);
    out_ << "eta " << format_real(trace.back().eta) << " after " << trace.back().step << " training steps\n";
    save_checkpoint(join(dir_, "bench_checkpoint.json"), t.checkpoint());
    const auto rep =
        variance_ordering_bench(t.params(), t.reference(), t.task(), t.pool(), cfg.mix, cfg.k, cfg.bench.groups, rng);
    Json probes = Json::array();
    for (const auto& p : trace) probes.push_back({{"step", p.step}, {"eta", p.eta}});
    Json est = {{"var_grpo", rep.grpo.scalar_variance},
                {"var_gal", rep.gal.scalar_variance},
                {"var_mix", rep.mix.scalar_variance},
                {"eta", rep.eta},
                {"sigma_s", rep.sigma_s},
                {"mean_pairs", rep.mean_pairs},
                {"predicted_var_gal", rep.predicted_gal},
                {"gap", rep.gap()},
                {"mid_groups", rep.mid_groups},
                {"attempts", rep.attempts},
                {"train_steps", trace.back().step},
                {"eta_probes", probes}};
    Json se = {{"var_grpo", rep.grpo.standard_error},
               {"var_gal", rep.gal.standard_error},
               {"var_mix", rep.mix.standard_error},
               {"gap", rep.combined_se()}};
    write_json_file(join(dir_, "variance_bench.json"), bench_report("variance_ordering", est, se, rep.verdict(), cfg));
    char line[256];
    std::snprintf(line, sizeof line,
                  "var_grpo %.6g (se %.2g)  var_gal %.6g (se %.2g)  var_mix %.6g (se %.2g)  gap/se %.2f\n",
                  rep.grpo.scalar_variance, rep.grpo.standard_error, rep.gal.scalar_variance, rep.gal.standard_error,
                  rep.mix.scalar_variance, rep.mix.standard_error, rep.gap() / rep.combined_se());
    out_ << line << "verdict " << (rep.verdict() ? "var_mix < var_grpo" : "ordering not established") << '\n';
    return rep.verdict() ? kExitOk : kExitFailure;
  }

  int bias_bench() {
    TrainConfig cfg = effective_config(true);
    prepare_output(cfg);
    const auto tb = BiasTestbedConfig::isotropic(cfg.testbed.dim, cfg.testbed.b_sys_norm, cfg.testbed.sigma_bias);
    Rng rng = substream(cfg.seed, "testbed");
    const auto rep = bias_law_bench(tb, cfg.testbed.m_values, cfg.testbed.draws, rng);
    bool within = true;
    std::ostringstream csv;
    csv << "m,mean_squared_bias,standard_error,analytic,relative_error\n";
    Json est = Json::object(), se = Json::object();
    for (const auto& r : rep.rows) {
      const double rel = std::abs(r.mean_squared_bias - r.analytic) / r.analytic;
      within = within && rel <= 0.05;
      csv << r.m << ',' << format_real(r.mean_squared_bias) << ',' << format_real(r.standard_error) << ','
          << format_real(r.analytic) << ',' << format_real(rel) << '\n';
      est["m=" + std::to_string(r.m)] = r.mean_squared_bias;
      se["m=" + std::to_string(r.m)] = r.standard_error;
      char line[160];
      std::snprintf(line, sizeof line, "m %3zu  E||bias||^2 %.5f  analytic %.5f  rel %.4f\n", r.m,
                    r.mean_squared_bias, r.analytic, rel);
      out_ << line;
    }
    {
      std::ofstream os(join(dir_, "bias_table.csv"), std::ios::trunc);
      if (!(os << csv.str())) throw IoError("failed writing bias table");
    }
    est["slope"] = rep.slope;
    est["intercept"] = rep.intercept;
    est["b_sys_squared_norm"] = rep.b_sys_squared_norm;
    const bool slope_ok = std::isfinite(rep.slope) && std::abs(rep.slope + 1.0) <= 0.1;
    const bool verdict = slope_ok && within && rep.strictly_decreasing();
    write_json_file(join(dir_, "bias_bench.json"), bench_report("bias_law", est, se, verdict, cfg));
    out_ << "slope " << format_real(rep.slope) << (verdict ? "  ok\n" : "  outside tolerance\n");
    return verdict ? kExitOk : kExitFailure;
  }

  int grad_check() {
    TrainConfig cfg = effective_config(false);
    prepare_output(cfg);
    GradCheckConfig g;
    g.seed = cfg.seed;
    g.k = cfg.k;
    g.teachers = cfg.teachers;
    g.mix = cfg.mix;
    g.task = cfg.task;
    double worst = 0.0;
    Json est = Json::object(), se = Json::object();
    for (const auto& r : run_grad_checks(g)) {
      worst = std::max(worst, r.max_rel_error);
      est[r.objective] = {{"max_relative_error", r.max_rel_error},
                          {"mean_relative_error", r.mean_rel_error},
                          {"instances", r.instances},
                          {"redrawn_near_clip", r.redrawn}};
      se[r.objective] = nullptr;
      char line[160];
      std::snprintf(line, sizeof line, "%-5s instances %zu  max rel err %.3g  mean %.3g\n", r.objective.c_str(),
                    r.instances, r.max_rel_error, r.mean_rel_error);
      out_ << line;
    }
    const bool verdict = worst <= 1e-6;
    write_json_file(join(dir_, "grad_check.json"), bench_report("grad_check", est, se, verdict, cfg));
    out_ << "max relative error " << format_real(worst) << '\n';
    return verdict ? kExitOk : kExitFailure;
  }

  int grade_stats() {
    TrainConfig cfg;
    Trainer t = trainer_for_eval(cfg);
    prepare_output(cfg);
    Rng rng = substream(cfg.seed, "grade-stats");
    std::map<std::size_t, GradeCounts> by_length;
    GradeCounts all;
    for (std::size_t i = 0; i < cfg.bench.groups; ++i) {
      const Query& q = t.pool()[uniform_index(rng, t.pool().size())];
      const auto g = rollout_group(t.task(), t.params(), q, cfg.k, rng);
      const Grade gr = grade(g.rewards);
      by_length[q.chain_length].add(gr);
      all.add(gr);
    }
    auto row = [](const GradeCounts& c) {
      return Json{{"easy", c.easy}, {"hard", c.hard}, {"mid", c.mid}, {"total", c.total()}};
    };
    Json lengths = Json::object();
    out_ << "chain   easy   hard    mid\n";
    for (const auto& [len, c] : by_length) {
      lengths[std::to_string(len)] = row(c);
      char line[80];
      std::snprintf(line, sizeof line, "%5zu  %5zu  %5zu  %5zu\n", len, c.easy, c.hard, c.mid);
      out_ << line;
    }
    Json report = {{"groups", cfg.bench.groups},
                   {"k", cfg.k},
                   {"overall", row(all)},
                   {"routes", {{to_string(Route::kDiscard), all.easy},
                               {to_string(Route::kSft), all.hard},
                               {to_string(Route::kMixedRl), all.mid}}},
                   {"by_chain_length", lengths},
                   {"config_echo", to_json(cfg)}};
    write_json_file(join(dir_, "grade_stats.json"), report);
    return kExitOk;
  }

  int evaluate_cmd() {
    TrainConfig cfg;
    Trainer t = trainer_for_eval(cfg);
    prepare_output(cfg);
    Rng rng = substream(cfg.seed, "evaluate");
    const auto rep = evaluate(t.params(), t.task(), t.pool(), cfg.bench.groups, cfg.k, rng);
    Json report = {{"pass_rate", rep.pass_rate},
                   {"queries", rep.n_queries},
                   {"k", cfg.k},
                   {"mean_entropy", rep.mean_entropy},
                   {"grades", {{"easy", rep.grades.easy}, {"hard", rep.grades.hard}, {"mid", rep.grades.mid}}},
                   {"config_echo", to_json(cfg)}};
    write_json_file(join(dir_, "eval.json"), report);
    char line[160];
    std::snprintf(line, sizeof line, "pass@%zu %.4f over %zu queries  entropy %.4f\n", cfg.k, rep.pass_rate,
                  rep.n_queries, rep.mean_entropy);
    out_ << line;
    return kExitOk;
  }

  int compare() {
    TrainConfig cfg = effective_config(true);
    prepare_output(cfg);
    const std::vector<Variant> variants = {Variant::kSftOnly, Variant::kGrpoOnly, Variant::kDypo};
    const auto runs = run_comparison(cfg, variants);
    Json est = Json::object(), se = Json::object();
    std::map<Variant, DynamicsSummary> sums;
    out_ << "variant     reward(Q4)  offline(first10)  offline(last100)  entropy(Q4)  grad step std\n";
    for (const auto& [v, rows] : runs) {
      write_metrics(join(dir_, (std::string("metrics_") + to_string(v) + ".csv").c_str()), rows);
      const auto s = summarize_dynamics(rows);
      sums[v] = s;
      est[to_string(v)] = {{"reward_final_quarter", s.reward_final_quarter},
                           {"offline_first10", s.offline_first10},
                           {"offline_last100", s.offline_last100},
                           {"entropy_final_quarter", s.entropy_final_quarter},
                           {"grad_norm_step_std", s.grad_norm_step_std}};
      se[to_string(v)] = nullptr;
      char line[200];
      std::snprintf(line, sizeof line, "%-10s  %10.4f  %16.4f  %16.4f  %11.4f  %13.5f\n", to_string(v),
                    s.reward_final_quarter, s.offline_first10, s.offline_last100, s.entropy_final_quarter,
                    s.grad_norm_step_std);
      out_ << line;
    }
    const auto& d = sums[Variant::kDypo];
    const auto& g = sums[Variant::kGrpoOnly];
    Json checks = {{"offline_decline_ge_0.2", d.offline_first10 - d.offline_last100 >= 0.2},
                   {"dypo_entropy_above_grpo", d.entropy_final_quarter > g.entropy_final_quarter},
                   {"dypo_grad_smoother", d.grad_norm_step_std < g.grad_norm_step_std}};
    est["checks"] = checks;
    bool all = true;
    for (const auto& [k, v] : checks.items()) all = all && v.get<bool>();
    write_json_file(join(dir_, "compare.json"), bench_report("training_dynamics", est, se, all, cfg));
    for (const auto& [k, v] : checks.items()) out_ << k << ' ' << (v.get<bool>() ? "yes" : "no") << '\n';
    return kExitOk;
  }

  const CliOptions& opt_;
  std::ostream& out_;
  std::filesystem::path dir_;
};

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"dypo: difficulty-routed SFT/RL training on a tabular policy"};
  app.require_subcommand(1);
  CliOptions opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file");
    sub->add_option("--out", opt.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", opt.seed, "override the root seed");
  };
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"train", "train one variant; writes metrics.csv and checkpoint.json"},
      {"variance-bench", "train until eta <= target, then compare GRPO/GAL/mixed estimator variance"},
      {"bias-bench", "Monte Carlo check of the teacher-ensemble bias law"},
      {"grad-check", "finite-difference check of every loss gradient"},
      {"grade-stats", "difficulty grade histogram of rollout groups"},
      {"evaluate", "pass@k of a policy without updating it"},
      {"compare", "train sft_only, grpo_only and dypo on the same query stream"},
  };
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub);
    const std::string name = s.name;
    if (name == "bias-bench") sub->add_option("--m", opt.m_values, "ensemble sizes, comma separated")->delimiter(',');
    if (name == "variance-bench" || name == "grade-stats" || name == "evaluate")
      sub->add_option("--groups", opt.groups, "number of groups (sets bench.groups)");
    if (name == "grade-stats" || name == "evaluate")
      sub->add_option("--checkpoint", opt.checkpoint, "policy checkpoint (default: initial policy)");
    if (name == "train") sub->add_option("--resume", opt.resume, "continue from a checkpoint");
    sub->callback([&opt, name] { opt.command = name; });
  }

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    return cli_detail::Runner(opt, out).run();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace dypo
