// Command-line workbench: train agents against local or remote plant
// workers, evaluate checkpoints on the frozen test set, dump episode traces,
// serve a plant over TCP, and emit the test-set CSVs.
//
// Exit codes: 0 success, 1 configuration error, 2 worker connectivity error.

#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "abrl/env_server.hpp"
#include "abrl/harness.hpp"
#include "abrl/worker_pool.hpp"

namespace {

std::string self_exe_path() {
  char buf[4096];
  const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0)
    throw abrl::ConfigError("cannot resolve own executable path for spawning");
  buf[n] = '\0';
  return std::string(buf);
}

std::pair<std::string, std::uint16_t> split_endpoint(const std::string& ep) {
  const auto colon = ep.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == ep.size())
    throw abrl::ConfigError("endpoint must be host:port, got \"" + ep + "\"");
  int port = 0;
  try {
    port = std::stoi(ep.substr(colon + 1));
  } catch (const std::exception&) {
    throw abrl::ConfigError("bad endpoint port in \"" + ep + "\"");
  }
  if (port <= 0 || port > 65535)
    throw abrl::ConfigError("bad endpoint port in \"" + ep + "\"");
  return {ep.substr(0, colon), static_cast<std::uint16_t>(port)};
}

struct TrainCli {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
};

int cmd_train(const TrainCli& opts) {
  abrl::KeyValueFile kv;
  if (!opts.config_path.empty())
    kv = abrl::KeyValueFile::parse_file(opts.config_path);
  for (const auto& [key, value] : opts.overrides) kv.set(key, value);
  const abrl::RunConfig cfg = abrl::RunConfig::from_kv(kv);

  std::unique_ptr<abrl::WorkerPool> pool;
  std::unique_ptr<abrl::EnvProvider> provider;
  if (!cfg.endpoints.empty()) {
    pool = std::make_unique<abrl::WorkerPool>(cfg.plant.muscles.size(),
                                              cfg.plant.dt);
    for (const auto& ep : cfg.endpoints) {
      const auto [host, port] = split_endpoint(ep);
      pool->add_remote(host, port);
    }
    provider = std::make_unique<abrl::PoolEnvProvider>(*pool);
  } else if (cfg.workers > 0) {
    pool = std::make_unique<abrl::WorkerPool>(cfg.plant.muscles.size(),
                                              cfg.plant.dt);
    abrl::SpawnCommand spawn;
    spawn.exe = self_exe_path();
    spawn.args = {"serve-env",         "--plant",
                  cfg.plant_spec,      "--port",
                  "0",                 "--crash-inject-rate",
                  abrl::format_double(cfg.crash_inject_rate)};
    for (std::size_t i = 0; i < cfg.workers; ++i) pool->add_spawned(spawn);
    provider = std::make_unique<abrl::PoolEnvProvider>(*pool);
  } else {
    provider = std::make_unique<abrl::LocalEnvProvider>(
        cfg.plant, 1, abrl::EnvOptions{cfg.crash_inject_rate});
  }

  const abrl::TrainResult res = abrl::train(cfg, *provider);
  if (pool) pool->shutdown_all();

  std::cout << "checkpoint " << res.checkpoint_path << "\n"
            << "stats " << res.stats_path << "\n"
            << "frames " << res.frames << "\n"
            << "updates " << res.updates << "\n"
            << "episodes " << res.episodes << "\n"
            << "mean_episode_reward_last10 "
            << abrl::format_double(res.final_mean_reward_last10) << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& out_csv,
                 std::size_t count, std::uint64_t seed) {
  const abrl::EvalReport rep = abrl::evaluate_checkpoint(ckpt, seed, count);
  if (!out_csv.empty()) {
    std::ofstream out(out_csv, std::ios::binary);
    if (!out) throw abrl::ConfigError("cannot open for writing: " + out_csv);
    abrl::write_eval_csv(rep, out);
  }
  std::cout << abrl::eval_summary(rep);
  return 0;
}

int cmd_trace(const std::string& ckpt, const std::string& out_path,
              std::size_t test_index, std::uint64_t test_seed) {
  const abrl::LoadedAgent agent = abrl::load_agent(ckpt);
  const abrl::Trajectory traj = abrl::test_trajectory(test_seed, test_index);
  abrl::EpisodeResult res;
  if (out_path.empty()) {
    res = abrl::emit_trace(agent, traj, std::cout);
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw abrl::ConfigError("cannot open for writing: " + out_path);
    res = abrl::emit_trace(agent, traj, out);
  }
  const abrl::TrajScore score = abrl::score_episode(test_index, res);
  std::cerr << "trace: " << res.transitions.size() << " frames, "
            << (res.crashed ? "crashed"
                            : "mae " + abrl::format_double(score.mae) +
                                  " rmse " + abrl::format_double(score.rmse))
            << "\n";
  return 0;
}

int cmd_serve_env(const std::string& plant_spec, const std::string& host,
                  std::uint16_t port, double crash_inject_rate) {
  const abrl::PlantConfig plant = abrl::RunConfig::resolve_plant(plant_spec);
  abrl::EnvServer server(plant, abrl::EnvOptions{crash_inject_rate});
  // The one stdout line is the spawner handshake; everything else is stderr.
  server.serve(host, port, [](std::uint16_t bound) {
    std::printf("LISTENING %u\n", static_cast<unsigned>(bound));
    std::fflush(stdout);
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"muscle-control workbench"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train an agent");
  TrainCli tcli;
  train->add_option("--config", tcli.config_path, "key-value config file");
  std::string t_experiment, t_agent, t_plant, t_out_dir, t_reward_mode,
      t_endpoints;
  std::uint64_t t_frames = 0, t_seed = 0, t_workers = 0, t_ckpt_every = 0;
  double t_crash_rate = 0.0;
  train->add_option("--experiment", t_experiment, "experiment name");
  train->add_option("--agent", t_agent, "ppo | dql");
  train->add_option("--plant", t_plant, "reference | single | config path");
  train->add_option("--total-frames", t_frames, "frame budget");
  train->add_option("--seed", t_seed, "master seed");
  train->add_option("--workers", t_workers,
                    "local worker processes to spawn (0 = in-process)");
  train->add_option("--endpoints", t_endpoints,
                    "comma-separated host:port workers (overrides --workers)");
  train->add_option("--out-dir", t_out_dir, "output directory");
  train->add_option("--reward-mode", t_reward_mode, "full | tracking_only");
  train->add_option("--crash-inject-rate", t_crash_rate,
                    "random mid-episode crash probability");
  train->add_option("--checkpoint-every", t_ckpt_every,
                    "checkpoint period, frames");

  // evaluate
  auto* evaluate = app.add_subcommand(
      "evaluate", "score a checkpoint on the frozen test set");
  std::string e_ckpt, e_out;
  std::size_t e_count = abrl::kTestSetSize;
  std::uint64_t e_seed = abrl::kTestSetSeed;
  evaluate->add_option("--checkpoint", e_ckpt, "checkpoint path")->required();
  evaluate->add_option("--out", e_out, "per-trajectory CSV path");
  evaluate->add_option("--count", e_count, "number of test trajectories");
  evaluate->add_option("--test-seed", e_seed, "test-set seed");

  // trace
  auto* trace =
      app.add_subcommand("trace", "dump one deterministic episode as CSV");
  std::string r_ckpt, r_out;
  std::size_t r_index = 0;
  std::uint64_t r_seed = abrl::kTestSetSeed;
  trace->add_option("--checkpoint", r_ckpt, "checkpoint path")->required();
  trace->add_option("--out", r_out, "output CSV path (default stdout)");
  trace->add_option("--test-index", r_index, "test-set trajectory index");
  trace->add_option("--test-seed", r_seed, "test-set seed");

  // serve-env
  auto* serve = app.add_subcommand("serve-env", "serve one plant over TCP");
  std::string s_plant = "reference", s_host = "127.0.0.1";
  std::uint16_t s_port = 0;
  double s_crash_rate = 0.0;
  serve->add_option("--plant", s_plant, "reference | single | config path");
  serve->add_option("--host", s_host, "bind address");
  serve->add_option("--port", s_port, "bind port (0 = ephemeral)");
  serve->add_option("--crash-inject-rate", s_crash_rate,
                    "random mid-episode crash probability");

  // gen-testset
  auto* gen = app.add_subcommand("gen-testset",
                                 "write the frozen test-set trajectory CSVs");
  std::string g_dir;
  std::size_t g_count = abrl::kTestSetSize;
  std::uint64_t g_seed = abrl::kTestSetSeed;
  double g_dt = 0.1;
  gen->add_option("--out-dir", g_dir, "output directory")->required();
  gen->add_option("--count", g_count, "number of trajectories");
  gen->add_option("--test-seed", g_seed, "test-set seed");
  gen->add_option("--dt", g_dt, "sample spacing, seconds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train)) {
      const auto set_if = [&](const char* flag, const std::string& key,
                              const std::string& value) {
        if (train->count(flag) > 0) tcli.overrides.emplace_back(key, value);
      };
      set_if("--experiment", "experiment", t_experiment);
      set_if("--agent", "agent", t_agent);
      set_if("--plant", "plant", t_plant);
      set_if("--total-frames", "total_frames", std::to_string(t_frames));
      set_if("--seed", "seed", std::to_string(t_seed));
      set_if("--workers", "workers", std::to_string(t_workers));
      set_if("--endpoints", "endpoints", t_endpoints);
      set_if("--out-dir", "out_dir", t_out_dir);
      set_if("--reward-mode", "reward_mode", t_reward_mode);
      set_if("--crash-inject-rate", "crash_inject_rate",
             abrl::format_double(t_crash_rate));
      set_if("--checkpoint-every", "checkpoint_every",
             std::to_string(t_ckpt_every));
      return cmd_train(tcli);
    }
    if (app.got_subcommand(evaluate))
      return cmd_evaluate(e_ckpt, e_out, e_count, e_seed);
    if (app.got_subcommand(trace)) return cmd_trace(r_ckpt, r_out, r_index, r_seed);
    if (app.got_subcommand(serve))
      return cmd_serve_env(s_plant, s_host, s_port, s_crash_rate);
    if (app.got_subcommand(gen)) {
      abrl::gen_testset(g_dir, g_seed, g_count, g_dt);
      std::cout << "wrote " << g_count << " trajectories to " << g_dir << "\n";
      return 0;
    }
  } catch (const abrl::NetError& e) {
    std::cerr << "worker error: " << e.what() << "\n";
    return 2;
  } catch (const abrl::wire::RemoteError& e) {
    std::cerr << "worker error: " << e.what() << "\n";
    return 2;
  } catch (const abrl::wire::WireError& e) {
    std::cerr << "worker error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
