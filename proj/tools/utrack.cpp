// utrack command line: train, curriculum, evaluate, benchmark, rollout, plot.
// Exit codes: 0 ok, 2 usage/config, 3 data/compat, 1 internal.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "utrack/checkpoint.hpp"
#include "utrack/config.hpp"
#include "utrack/curriculum.hpp"
#include "utrack/marl.hpp"
#include "utrack/trajectory.hpp"
#include "utrack/vecenv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace utrack;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Run config JSON");
  cmd->add_option("--out", opts.out_dir, "Output directory");
  cmd->add_option("--seed", opts.seed, "Master seed (overrides config)");
  cmd->add_option("overrides", opts.overrides,
                  "key.path=value config overrides (e.g. env.n_agents=2)");
}

RunConfig resolve_config(const CommonOpts& opts, const std::string& default_out) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = load_run_config(opts.config_path);
  for (const std::string& ov : opts.overrides) apply_override(cfg, ov);
  if (opts.seed) cfg.seed = *opts.seed;
  if (!opts.out_dir.empty())
    cfg.out_dir = opts.out_dir;
  else if (cfg.out_dir.empty())
    cfg.out_dir = default_out;
  return cfg;
}

json eval_record(const curriculum::EvalMetrics& m) {
  json metrics;
  metrics["avg_agent_target_distance"] = {{"mean", m.dist_mean}, {"std", m.dist_std}};
  metrics["avg_tracking_error"] = {{"mean", m.err_mean}, {"std", m.err_std}};
  metrics["collision_probability_pct"] = m.collision_pct;
  metrics["target_loss_probability_pct"] = m.loss_pct;
  return metrics;
}

TransformerParams load_actor_checked(const std::string& dir) {
  const LoadedCheckpoint ck = load_checkpoint(dir);
  if (ck.meta.version != 1)
    throw DataError("checkpoint " + dir + " has unsupported version " +
                    std::to_string(ck.meta.version));
  if (ck.meta.net.z != kFeatureDim)
    throw DataError("checkpoint " + dir + " expects token width " +
                    std::to_string(ck.meta.net.z) + ", this build produces " +
                    std::to_string(kFeatureDim));
  if (ck.meta.actor_out_dim != kNumActions)
    throw DataError("checkpoint " + dir + " has a non-rudder action head");
  return ck.actor;
}

int cmd_train(const CommonOpts& opts, const std::string& resume) {
  RunConfig cfg = resolve_config(opts, "runs/train");
  fs::create_directories(cfg.out_dir);
  save_config_snapshot(cfg, (fs::path(cfg.out_dir) / "config.json").string());

  Trainer trainer(cfg.env, cfg.train, cfg.seed);
  if (!resume.empty()) {
    const LoadedCheckpoint ck = load_checkpoint(resume, cfg.train.net);
    trainer.set_actor(ck.actor);
    trainer.set_critic(ck.critic);
    if (!ck.train_state.empty()) trainer.restore_training_state(ck.train_state);
  }

  try {
    const TrainResult res = trainer.train(cfg.out_dir);
    std::cout << "trained " << res.timesteps << " steps in " << res.updates
              << " updates\nfinal checkpoint: " << res.final_checkpoint
              << "\nmetrics: " << res.metrics_path << "\n";
  } catch (...) {
    const std::string abort_dir =
        (fs::path(cfg.out_dir) / "checkpoints" / "abort").string();
    trainer.save(abort_dir);
    std::cerr << "training aborted; state saved to " << abort_dir << "\n";
    throw;
  }
  return 0;
}

int cmd_curriculum(const CommonOpts& opts, const std::string& plan_arg) {
  RunConfig cfg = resolve_config(opts, "runs/curriculum");
  fs::create_directories(cfg.out_dir);
  save_config_snapshot(cfg, (fs::path(cfg.out_dir) / "config.json").string());

  curriculum::StagePlan plan;
  if (fs::exists(plan_arg))
    plan = curriculum::load_plan(plan_arg);
  else
    plan = curriculum::default_plan(plan_arg);

  std::cout << "plan '" << plan.name << "': " << plan.stages.size() << " stages\n";
  std::string current;
  const auto sink = [&current](const std::string& line) {
    const json j = json::parse(line);
    std::cout << "[" << j.value("stage", "?") << "] update " << j.value("update", 0)
              << " timesteps " << j.value("timesteps", 0LL) << " return "
              << j.value("mean_return", 0.0) << " err "
              << j.value("mean_tracking_error", 0.0) << "\n";
  };
  const auto checkpoints =
      curriculum::run_curriculum(plan, cfg.env, cfg.train, cfg.out_dir, cfg.seed, sink);
  for (const auto& [stage, dir] : checkpoints)
    std::cout << "stage " << stage << " -> " << dir << "\n";
  return 0;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& checkpoint,
                 int episodes, const std::string& sweep, bool export_traj) {
  RunConfig cfg = resolve_config(opts, "runs/evaluate");
  fs::create_directories(cfg.out_dir);
  const TransformerParams actor = load_actor_checked(checkpoint);

  std::ofstream records((fs::path(cfg.out_dir) / "eval.jsonl").string());
  auto run_point = [&](const RunConfig& point_cfg, const json& point_tag,
                       const std::string& traj_dir) {
    const curriculum::EvalMetrics m = curriculum::evaluate(
        actor, point_cfg.env, episodes, point_cfg.seed, point_cfg.train.workers,
        traj_dir);
    json rec;
    rec["checkpoint"] = checkpoint;
    rec["episodes"] = m.episodes;
    if (!point_tag.empty()) rec["sweep"] = point_tag;
    rec["metrics"] = eval_record(m);
    const std::string line = rec.dump();
    std::cout << line << "\n";
    records << line << "\n";
  };

  if (sweep.empty()) {
    run_point(cfg, json::object(),
              export_traj ? (fs::path(cfg.out_dir) / "trajectories").string() : "");
    return 0;
  }

  const auto eq = sweep.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--sweep must look like key.path=v1,v2,...");
  const std::string key = sweep.substr(0, eq);
  std::stringstream values(sweep.substr(eq + 1));
  std::string value;
  int point = 0;
  while (std::getline(values, value, ',')) {
    RunConfig point_cfg = cfg;
    apply_override(point_cfg, key + "=" + value);
    json tag;
    tag["key"] = key;
    tag["value"] = value;
    const std::string traj_dir =
        export_traj
            ? (fs::path(cfg.out_dir) / ("trajectories_" + std::to_string(point))).string()
            : "";
    run_point(point_cfg, tag, traj_dir);
    ++point;
  }
  return 0;
}

int cmd_benchmark(const CommonOpts& opts, std::vector<int> env_counts,
                  int max_entities, int steps_override) {
  RunConfig cfg = resolve_config(opts, "runs/benchmark");
  fs::create_directories(cfg.out_dir);
  std::ofstream out((fs::path(cfg.out_dir) / "benchmark.jsonl").string());

  if (env_counts.empty()) env_counts = {1, 128, 1024};
  std::sort(env_counts.begin(), env_counts.end());

  std::cout << "config";
  for (int n : env_counts) std::cout << "\tSPS@" << n << "\tspeedup@" << n;
  std::cout << "\n";

  for (int n_entities = 1; n_entities <= max_entities; ++n_entities) {
    EnvConfig env = cfg.env;
    env.n_agents = n_entities;
    env.n_targets = n_entities;

    double sps1 = 0.0;
    std::cout << n_entities << "A," << n_entities << "T";
    for (int n_envs : env_counts) {
      int steps = steps_override;
      if (steps <= 0) {
        // pilot run sizes the timed run to ~0.5 s
        const BenchmarkReport pilot = benchmark_sps(env, n_envs, 8, BenchmarkPolicy::kRandom,
                                                    cfg.seed, cfg.train.workers, 4);
        steps = std::clamp(static_cast<int>(0.5 * pilot.sps / n_envs), 16, 4000);
      }
      const BenchmarkReport rep = benchmark_sps(env, n_envs, steps,
                                                BenchmarkPolicy::kRandom, cfg.seed,
                                                cfg.train.workers);
      if (n_envs == env_counts.front() && env_counts.front() == 1) sps1 = rep.sps;

      json j;
      j["config"] = rep.config_name;
      j["n_envs"] = rep.n_envs;
      j["timed_steps"] = rep.timed_steps;
      j["workers"] = rep.workers;
      j["wall_seconds"] = rep.wall_seconds;
      j["sps"] = rep.sps;
      json phases;
      std::uint64_t phase_sum = 0;
      for (int p = 0; p < static_cast<int>(StepPhase::kCount); ++p) {
        phases[kStepPhaseNames[static_cast<std::size_t>(p)]] =
            rep.phase_ns[static_cast<std::size_t>(p)];
        phase_sum += rep.phase_ns[static_cast<std::size_t>(p)];
      }
      j["phase_ns"] = phases;
      j["phase_ns_sum"] = phase_sum;
      j["total_step_ns"] = rep.total_ns;
      out << j.dump() << "\n";

      std::cout << "\t" << static_cast<long long>(rep.sps) << "\t";
      if (sps1 > 0.0)
        std::cout << rep.sps / sps1;
      else
        std::cout << "-";
      std::cout << std::flush;
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_rollout(const CommonOpts& opts, const std::string& checkpoint,
                const std::string& policy, int episodes) {
  RunConfig cfg = resolve_config(opts, "runs/rollout");
  fs::create_directories(cfg.out_dir);
  save_config_snapshot(cfg, (fs::path(cfg.out_dir) / "config.json").string());

  if (policy == "greedy" || !checkpoint.empty()) {
    if (checkpoint.empty())
      throw ConfigError("rollout with greedy policy needs --checkpoint");
    const TransformerParams actor = load_actor_checked(checkpoint);
    const curriculum::EvalMetrics m = curriculum::evaluate(
        actor, cfg.env, episodes, cfg.seed, cfg.train.workers, cfg.out_dir);
    std::cout << eval_record(m).dump() << "\n";
    return 0;
  }

  const bool scripted = policy == "scripted";
  if (!scripted && policy != "random")
    throw ConfigError("rollout policy must be random, scripted or greedy");

  EnvConfig env_cfg = cfg.env;
  env_cfg.finalize();
  Environment env(env_cfg, RngStream::derive_key(cfg.seed, 0x726f6cu), 0);
  RngStream rng(RngStream::derive_key(cfg.seed, 0x726f6c32u), 0);
  std::vector<TrajectoryRow> rows;
  std::vector<int> actions(static_cast<std::size_t>(env_cfg.n_agents), 2);

  for (int ep = 0; ep < episodes; ++ep) {
    if (ep > 0) env.reset();
    rows.clear();
    for (int t = 0; t < env_cfg.horizon; ++t) {
      for (int a = 0; a < env_cfg.n_agents; ++a) {
        if (scripted) {
          actions[static_cast<std::size_t>(a)] = env.scripted_action(a);
        } else {
          const auto mask = env.action_mask(a);
          int legal[kNumActions];
          int n_legal = 0;
          for (int k = 0; k < kNumActions; ++k)
            if (mask[static_cast<std::size_t>(k)]) legal[n_legal++] = k;
          actions[static_cast<std::size_t>(a)] =
              legal[rng.uniform_int(static_cast<std::uint32_t>(n_legal))];
        }
      }
      const StepOutput& info = env.step(actions);
      append_trajectory_rows(env, info.reward, info.collision, rows);
    }
    char name[32];
    std::snprintf(name, sizeof(name), "episode_%04d.csv", ep + 1);
    write_trajectory_csv((fs::path(cfg.out_dir) / name).string(), rows);
  }
  std::cout << "wrote " << episodes << " trajectory CSVs to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& csvs, const std::string& out_path) {
  if (csvs.size() == 1 && out_path.size() > 4 &&
      out_path.substr(out_path.size() - 4) == ".svg") {
    write_trajectory_svg(out_path, read_trajectory_csv(csvs[0]));
    std::cout << out_path << "\n";
    return 0;
  }
  fs::create_directories(out_path);
  for (const std::string& csv : csvs) {
    const std::string name = fs::path(csv).stem().string() + ".svg";
    const std::string dst = (fs::path(out_path) / name).string();
    write_trajectory_svg(dst, read_trajectory_csv(csv));
    std::cout << dst << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"utrack: batch-vectorized underwater-target-tracking MARL"};
  app.require_subcommand(1);

  CommonOpts train_opts, curr_opts, eval_opts, bench_opts, roll_opts;

  auto* train = app.add_subcommand("train", "Run MAPPO training");
  add_common(train, train_opts);
  std::string resume;
  train->add_option("--resume", resume, "Checkpoint directory to resume from");

  auto* curr = app.add_subcommand("curriculum", "Run a staged training plan");
  std::string plan_arg = "desk";
  curr->add_option("plan", plan_arg, "Plan file or built-in name (desk, paper)");
  add_common(curr, curr_opts);

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  std::string eval_ckpt, sweep;
  int eval_episodes = 100;
  bool export_traj = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--episodes", eval_episodes, "Episodes per point");
  eval->add_option("--sweep", sweep, "key.path=v1,v2,... sweep");
  eval->add_flag("--export-trajectories", export_traj, "Write per-episode CSVs");
  add_common(eval, eval_opts);

  auto* bench = app.add_subcommand("benchmark", "Throughput scaling report");
  std::vector<int> env_counts;
  int max_entities = 5, bench_steps = 0;
  bench->add_option("--envs", env_counts, "Env counts (default 1 128 1024)");
  bench->add_option("--max-entities", max_entities, "Largest nA,nT config");
  bench->add_option("--steps", bench_steps, "Timed steps (0 = auto)");
  add_common(bench, bench_opts);

  auto* roll = app.add_subcommand("rollout", "Export trajectory CSVs");
  std::string roll_ckpt, roll_policy = "random";
  int roll_episodes = 1;
  roll->add_option("--checkpoint", roll_ckpt, "Checkpoint (for greedy policy)");
  roll->add_option("--policy", roll_policy, "random | scripted | greedy");
  roll->add_option("--episodes", roll_episodes, "Episode count");
  add_common(roll, roll_opts);

  auto* plot = app.add_subcommand("plot", "Render trajectory CSVs to SVG");
  std::vector<std::string> plot_csvs;
  std::string plot_out = "trajectory.svg";
  plot->add_option("csvs", plot_csvs, "Trajectory CSV files")->required();
  plot->add_option("--out", plot_out, "Output .svg file or directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(train_opts, resume);
    if (curr->parsed()) return cmd_curriculum(curr_opts, plan_arg);
    if (eval->parsed())
      return cmd_evaluate(eval_opts, eval_ckpt, eval_episodes, sweep, export_traj);
    if (bench->parsed())
      return cmd_benchmark(bench_opts, env_counts, max_entities, bench_steps);
    if (roll->parsed()) return cmd_rollout(roll_opts, roll_ckpt, roll_policy, roll_episodes);
    if (plot->parsed()) return cmd_plot(plot_csvs, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
