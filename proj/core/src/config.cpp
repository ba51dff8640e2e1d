#include "utrack/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace utrack {

using nlohmann::json;

void TrainConfig::validate() const {
  if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("train.gamma must be in [0, 1)");
  if (lam < 0.0 || lam > 1.0) throw ConfigError("train.lam must be in [0, 1]");
  if (clip_eps <= 0.0) throw ConfigError("train.clip_eps must be > 0");
  if (lr < 0.0) throw ConfigError("train.lr must be >= 0");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (minibatches < 1) throw ConfigError("train.minibatches must be >= 1");
  if (rollout_steps < 1) throw ConfigError("train.rollout_steps must be >= 1");
  if (n_envs < 1) throw ConfigError("train.n_envs must be >= 1");
  if (n_envs % minibatches != 0)
    throw ConfigError("train.n_envs must be divisible by train.minibatches "
                      "(minibatches hold whole env sequences)");
  if (entropy_coef < 0.0) throw ConfigError("train.entropy_coef must be >= 0");
  if (value_coef < 0.0) throw ConfigError("train.value_coef must be >= 0");
  if (max_grad_norm <= 0.0) throw ConfigError("train.max_grad_norm must be > 0");
  if (total_timesteps < 1) throw ConfigError("train.total_timesteps must be >= 1");
  if (grad_shards < 1) throw ConfigError("train.grad_shards must be >= 1");
  if (rollout_shards < 1) throw ConfigError("train.rollout_shards must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (net.d < 1 || net.heads < 1 || net.blocks < 1)
    throw ConfigError("train.net dims must be >= 1");
  if (net.d % net.heads != 0)
    throw ConfigError("train.net.d must be divisible by train.net.heads");
}

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& scope) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" + scope + key + "'");
  }
}

template <typename T>
void get_to(const json& obj, const char* key, T& out, const std::string& scope) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError("config key '" + scope + key + "' has the wrong type");
  }
}

void parse_env(const json& j, EnvConfig& env) {
  static const std::set<std::string> keys = {
      "n_agents", "n_targets", "horizon", "dt", "agent_speed",
      "target_speed_frac", "target_speed_frac_max", "target_turn_interval",
      "detection_range", "comm_range", "comm_drop_prob", "range_noise_std",
      "eps_min", "eps_max", "d_min", "d_safe", "reward_mode", "spawn_min_sep",
      "spawn_max_sep", "perturbation_std", "target_depth_min", "target_depth_max",
      "lost_steps", "pf", "heading_model", "calibration_csv"};
  check_keys(j, keys, "env.");

  get_to(j, "n_agents", env.n_agents, "env.");
  get_to(j, "n_targets", env.n_targets, "env.");
  get_to(j, "horizon", env.horizon, "env.");
  get_to(j, "dt", env.dt, "env.");
  get_to(j, "agent_speed", env.agent_speed, "env.");
  get_to(j, "target_speed_frac", env.target_speed_frac, "env.");
  get_to(j, "target_speed_frac_max", env.target_speed_frac_max, "env.");
  get_to(j, "target_turn_interval", env.target_turn_interval, "env.");
  get_to(j, "detection_range", env.detection_range, "env.");
  get_to(j, "comm_range", env.comm_range, "env.");
  get_to(j, "comm_drop_prob", env.comm_drop_prob, "env.");
  get_to(j, "range_noise_std", env.range_noise_std, "env.");
  get_to(j, "eps_min", env.eps_min, "env.");
  get_to(j, "eps_max", env.eps_max, "env.");
  get_to(j, "d_min", env.d_min, "env.");
  get_to(j, "d_safe", env.d_safe, "env.");
  get_to(j, "spawn_min_sep", env.spawn_min_sep, "env.");
  get_to(j, "spawn_max_sep", env.spawn_max_sep, "env.");
  get_to(j, "perturbation_std", env.perturbation_std, "env.");
  get_to(j, "target_depth_min", env.target_depth_min, "env.");
  get_to(j, "target_depth_max", env.target_depth_max, "env.");
  get_to(j, "lost_steps", env.lost_steps, "env.");

  if (j.contains("reward_mode")) {
    const auto mode = j.at("reward_mode").get<std::string>();
    if (mode == "tracking")
      env.reward_mode = RewardMode::kTracking;
    else if (mode == "follow")
      env.reward_mode = RewardMode::kFollow;
    else
      throw ConfigError("env.reward_mode must be 'tracking' or 'follow', got '" +
                        mode + "'");
  }

  if (j.contains("pf")) {
    const json& p = j.at("pf");
    static const std::set<std::string> pf_keys = {
        "n_particles", "process_noise_pos", "process_noise_vel", "speed_margin",
        "init_radius"};
    check_keys(p, pf_keys, "env.pf.");
    get_to(p, "n_particles", env.pf.n_particles, "env.pf.");
    get_to(p, "process_noise_pos", env.pf.process_noise_pos, "env.pf.");
    get_to(p, "process_noise_vel", env.pf.process_noise_vel, "env.pf.");
    get_to(p, "speed_margin", env.pf.speed_margin, "env.pf.");
    get_to(p, "init_radius", env.pf.init_radius, "env.pf.");
  }

  const bool has_model = j.contains("heading_model");
  const bool has_csv = j.contains("calibration_csv");
  if (has_model && has_csv)
    throw ConfigError("env.heading_model and env.calibration_csv are exclusive");
  if (has_model) {
    const json& hm = j.at("heading_model");
    static const std::set<std::string> hm_keys = {"noise_std", "buckets"};
    check_keys(hm, hm_keys, "env.heading_model.");
    HeadingDeltaModel model;
    if (hm.contains("noise_std")) model.set_noise_std(hm.at("noise_std").get<double>());
    for (const json& b : hm.at("buckets")) {
      static const std::set<std::string> b_keys = {"speed", "dt", "a", "b"};
      check_keys(b, b_keys, "env.heading_model.buckets[].");
      model.set_bucket(b.at("speed").get<double>(), b.at("dt").get<double>(),
                       {b.at("a").get<double>(), b.at("b").get<double>()});
    }
    env.heading_model = model;
  } else if (has_csv) {
    const auto path = j.at("calibration_csv").get<std::string>();
    FitReport fit = fit_heading_model(load_calibration_csv(path));
    fit.model.set_noise_std(env.heading_model.noise_std());
    env.heading_model = fit.model;
  }
}

void parse_train(const json& j, TrainConfig& train) {
  static const std::set<std::string> keys = {
      "gamma", "lam", "clip_eps", "lr", "epochs", "minibatches", "rollout_steps",
      "n_envs", "entropy_coef", "value_coef", "max_grad_norm", "total_timesteps",
      "net", "workers", "grad_shards", "rollout_shards", "checkpoint_every"};
  check_keys(j, keys, "train.");

  get_to(j, "gamma", train.gamma, "train.");
  get_to(j, "lam", train.lam, "train.");
  get_to(j, "clip_eps", train.clip_eps, "train.");
  get_to(j, "lr", train.lr, "train.");
  get_to(j, "epochs", train.epochs, "train.");
  get_to(j, "minibatches", train.minibatches, "train.");
  get_to(j, "rollout_steps", train.rollout_steps, "train.");
  get_to(j, "n_envs", train.n_envs, "train.");
  get_to(j, "entropy_coef", train.entropy_coef, "train.");
  get_to(j, "value_coef", train.value_coef, "train.");
  get_to(j, "max_grad_norm", train.max_grad_norm, "train.");
  get_to(j, "total_timesteps", train.total_timesteps, "train.");
  get_to(j, "workers", train.workers, "train.");
  get_to(j, "grad_shards", train.grad_shards, "train.");
  get_to(j, "rollout_shards", train.rollout_shards, "train.");
  get_to(j, "checkpoint_every", train.checkpoint_every, "train.");

  if (j.contains("net")) {
    const json& n = j.at("net");
    static const std::set<std::string> net_keys = {"d", "heads", "blocks"};
    check_keys(n, net_keys, "train.net.");
    get_to(n, "d", train.net.d, "train.net.");
    get_to(n, "heads", train.net.heads, "train.net.");
    get_to(n, "blocks", train.net.blocks, "train.net.");
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  static const std::set<std::string> keys = {"schema_version", "seed", "out_dir",
                                             "env", "train"};
  check_keys(j, keys, "");

  RunConfig cfg;
  get_to(j, "schema_version", cfg.schema_version, "");
  if (cfg.schema_version != 1)
    throw ConfigError(origin + ": unsupported schema_version " +
                      std::to_string(cfg.schema_version));
  get_to(j, "seed", cfg.seed, "");
  get_to(j, "out_dir", cfg.out_dir, "");
  if (j.contains("env")) parse_env(j.at("env"), cfg.env);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);

  cfg.env.finalize();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value, got '" + assignment +
                      "'");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json j = json::parse(run_config_to_json(cfg));
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot - start);
    if (part.empty()) throw ConfigError("bad override path '" + path + "'");
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;  // plain string
      }
      (*node)[part] = parsed;
      break;
    }
    if (!node->contains(part))
      throw ConfigError("unknown config key '" + path.substr(0, dot) + "'");
    node = &(*node)[part];
    start = dot + 1;
  }
  cfg = parse_run_config(j.dump(), "override " + assignment);
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;

  json e;
  e["n_agents"] = cfg.env.n_agents;
  e["n_targets"] = cfg.env.n_targets;
  e["horizon"] = cfg.env.horizon;
  e["dt"] = cfg.env.dt;
  e["agent_speed"] = cfg.env.agent_speed;
  e["target_speed_frac"] = cfg.env.target_speed_frac;
  e["target_speed_frac_max"] = cfg.env.target_speed_frac_max;
  e["target_turn_interval"] = cfg.env.target_turn_interval;
  e["detection_range"] = cfg.env.detection_range;
  e["comm_range"] = cfg.env.comm_range;
  e["comm_drop_prob"] = cfg.env.comm_drop_prob;
  e["range_noise_std"] = cfg.env.range_noise_std;
  e["eps_min"] = cfg.env.eps_min;
  e["eps_max"] = cfg.env.eps_max;
  e["d_min"] = cfg.env.d_min;
  e["d_safe"] = cfg.env.d_safe;
  e["reward_mode"] =
      cfg.env.reward_mode == RewardMode::kTracking ? "tracking" : "follow";
  e["spawn_min_sep"] = cfg.env.spawn_min_sep;
  e["spawn_max_sep"] = cfg.env.spawn_max_sep;
  e["perturbation_std"] = cfg.env.perturbation_std;
  e["target_depth_min"] = cfg.env.target_depth_min;
  e["target_depth_max"] = cfg.env.target_depth_max;
  e["lost_steps"] = cfg.env.lost_steps;
  e["pf"] = {{"n_particles", cfg.env.pf.n_particles},
             {"process_noise_pos", cfg.env.pf.process_noise_pos},
             {"process_noise_vel", cfg.env.pf.process_noise_vel},
             {"speed_margin", cfg.env.pf.speed_margin},
             {"init_radius", cfg.env.pf.init_radius}};
  if (!cfg.env.heading_model.buckets().empty()) {
    json hm;
    hm["noise_std"] = cfg.env.heading_model.noise_std();
    json buckets = json::array();
    for (const auto& [key, c] : cfg.env.heading_model.buckets()) {
      buckets.push_back(
          {{"speed", key.first}, {"dt", key.second}, {"a", c.a}, {"b", c.b}});
    }
    hm["buckets"] = buckets;
    e["heading_model"] = hm;
  }
  j["env"] = e;

  json t;
  t["gamma"] = cfg.train.gamma;
  t["lam"] = cfg.train.lam;
  t["clip_eps"] = cfg.train.clip_eps;
  t["lr"] = cfg.train.lr;
  t["epochs"] = cfg.train.epochs;
  t["minibatches"] = cfg.train.minibatches;
  t["rollout_steps"] = cfg.train.rollout_steps;
  t["n_envs"] = cfg.train.n_envs;
  t["entropy_coef"] = cfg.train.entropy_coef;
  t["value_coef"] = cfg.train.value_coef;
  t["max_grad_norm"] = cfg.train.max_grad_norm;
  t["total_timesteps"] = cfg.train.total_timesteps;
  t["net"] = {{"d", cfg.train.net.d},
              {"heads", cfg.train.net.heads},
              {"blocks", cfg.train.net.blocks}};
  t["workers"] = cfg.train.workers;
  t["grad_shards"] = cfg.train.grad_shards;
  t["rollout_shards"] = cfg.train.rollout_shards;
  t["checkpoint_every"] = cfg.train.checkpoint_every;
  j["train"] = t;

  return j.dump(2);
}

void save_config_snapshot(const RunConfig& cfg, const std::string& path) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write config snapshot: " + path);
  out << run_config_to_json(cfg) << "\n";
}

}  // namespace utrack
