#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "abrl/config.hpp"
#include "abrl/dqn.hpp"
#include "abrl/mdp.hpp"
#include "abrl/plant.hpp"
#include "abrl/ppo.hpp"
#include "abrl/rollout.hpp"
#include "abrl/text.hpp"
#include "abrl/trajectory.hpp"
#include "abrl/worker_pool.hpp"

namespace abrl {

// ---------------------------------------------------------------------------
// Frozen evaluation set and training-episode shape
// ---------------------------------------------------------------------------

/// Seed of the frozen 100-trajectory evaluation set.  Every agent is scored
/// on identical targets regenerated from this constant; changing it makes
/// all previously reported numbers incomparable.
inline constexpr std::uint64_t kTestSetSeed = 0x7e575e7ull;
inline constexpr std::size_t kTestSetSize = 100;
inline constexpr double kTestTotalT = 20.0;     // seconds per test trajectory
inline constexpr double kTestSectionT = 5.0;
inline constexpr double kTestEndpointLo = 20.0;  // degrees
inline constexpr double kTestEndpointHi = 100.0;

/// Training episodes: 10 s trajectories generated on the fly in a narrower
/// band than the test set, so evaluation probes generalization.
inline constexpr std::size_t kTrainEpisodeFrames = 100;
inline constexpr double kTrainTotalT = 10.0;
inline constexpr double kTrainSectionT = 5.0;
inline constexpr double kTrainEndpointLo = 30.0;
inline constexpr double kTrainEndpointHi = 90.0;

inline Trajectory test_trajectory(std::uint64_t test_set_seed, std::size_t i) {
  return random_trajectory(mix_seed(test_set_seed, i), kTestTotalT,
                           kTestSectionT, kTestEndpointLo, kTestEndpointHi);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct TrajScore {
  std::size_t index = 0;
  double mae = 0.0;   // degrees; meaningless when crashed
  double rmse = 0.0;  // degrees; >= mae by the power-mean inequality
  bool crashed = false;
};

/// Linear-interpolation quantile of an ascending-sorted sample (the common
/// "type 7" convention).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty())
    throw std::invalid_argument("quantile_sorted: empty sample");
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("quantile_sorted: p outside [0,1]");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double f = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - f) + sorted[lo + 1] * f;
}

struct EvalReport {
  std::vector<TrajScore> per_traj;
  std::size_t crashes = 0;
  std::size_t scored = 0;  // trajectories entering the error statistics

  // Aggregates over non-crashed trajectories (zero when none scored).
  double mae_mean = 0.0, mae_median = 0.0, mae_q1 = 0.0, mae_q3 = 0.0;
  double rmse_mean = 0.0, rmse_median = 0.0, rmse_q1 = 0.0, rmse_q3 = 0.0;

  // Action statistics over every executed step, crashed episodes included.
  std::size_t action_components = 0;
  std::size_t bang_count = 0;  // components with |omega| > omega_max

  double bang_fraction() const {
    return action_components == 0
               ? 0.0
               : static_cast<double>(bang_count) /
                     static_cast<double>(action_components);
  }

  void finalize() {
    std::vector<double> maes, rmses;
    crashes = 0;
    for (const TrajScore& s : per_traj) {
      if (s.crashed) {
        ++crashes;
        continue;
      }
      maes.push_back(s.mae);
      rmses.push_back(s.rmse);
    }
    scored = maes.size();
    if (scored == 0) return;
    std::sort(maes.begin(), maes.end());
    std::sort(rmses.begin(), rmses.end());
    double sm = 0.0, sr = 0.0;
    for (double v : maes) sm += v;
    for (double v : rmses) sr += v;
    mae_mean = sm / static_cast<double>(scored);
    rmse_mean = sr / static_cast<double>(scored);
    mae_q1 = quantile_sorted(maes, 0.25);
    mae_median = quantile_sorted(maes, 0.5);
    mae_q3 = quantile_sorted(maes, 0.75);
    rmse_q1 = quantile_sorted(rmses, 0.25);
    rmse_median = quantile_sorted(rmses, 0.5);
    rmse_q3 = quantile_sorted(rmses, 0.75);
  }
};

/// Score one finished episode against its reference: the k-th transition's
/// error is the post-action angle versus the target it was steered at.
inline TrajScore score_episode(std::size_t index, const EpisodeResult& res) {
  TrajScore s;
  s.index = index;
  s.crashed = res.crashed;
  if (res.crashed || res.transitions.empty()) return s;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const Transition& tr : res.transitions) {
    const double err = tr.next_obs.phi - tr.obs.phi_hat_next;
    abs_sum += std::abs(err);
    sq_sum += err * err;
  }
  const double n = static_cast<double>(res.transitions.size());
  s.mae = abs_sum / n;
  s.rmse = std::sqrt(sq_sum / n);
  return s;
}

/// Roll the deterministic policy over the frozen test set, in process.
inline EvalReport evaluate_policy(const PlantConfig& cfg, const PolicyFn& policy,
                                  const RewardParams& rp, RewardMode mode,
                                  std::uint64_t test_set_seed = kTestSetSeed,
                                  std::size_t count = kTestSetSize) {
  EvalReport rep;
  const std::size_t frames =
      static_cast<std::size_t>(std::llround(kTestTotalT / cfg.dt));
  for (std::size_t i = 0; i < count; ++i) {
    const Trajectory traj = test_trajectory(test_set_seed, i);
    const EpisodeResult res = run_episode(cfg, traj, frames, policy, rp, mode,
                                          mix_seed(test_set_seed, 1u << 20 | i));
    for (const Transition& tr : res.transitions) {
      for (double w : tr.action.omega) {
        ++rep.action_components;
        if (std::abs(w) > rp.omega_max) ++rep.bang_count;
      }
    }
    rep.per_traj.push_back(score_episode(i, res));
  }
  rep.finalize();
  return rep;
}

inline void write_eval_csv(const EvalReport& rep, std::ostream& out) {
  out << "index,mae,rmse,crashed\n";
  for (const TrajScore& s : rep.per_traj) {
    out << s.index << ',' << format_double(s.mae) << ','
        << format_double(s.rmse) << ',' << (s.crashed ? 1 : 0) << '\n';
  }
}

inline std::string eval_summary(const EvalReport& rep) {
  std::ostringstream os;
  os << "scored " << rep.scored << " trajectories, " << rep.crashes
     << " crashed\n";
  if (rep.scored > 0) {
    os << "MAE  mean " << format_double(rep.mae_mean) << "  median "
       << format_double(rep.mae_median) << "  q1 " << format_double(rep.mae_q1)
       << "  q3 " << format_double(rep.mae_q3) << "\n";
    os << "RMSE mean " << format_double(rep.rmse_mean) << "  median "
       << format_double(rep.rmse_median) << "  q1 "
       << format_double(rep.rmse_q1) << "  q3 " << format_double(rep.rmse_q3)
       << "\n";
  }
  os << "action components above omega_max: "
     << format_double(100.0 * rep.bang_fraction()) << "%\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Everything a training run needs, loadable from a flat key-value file.
/// CLI flags override file values.  Keys are documented in the README.
struct RunConfig {
  std::string experiment = "run";
  std::string agent = "ppo";             // "ppo" | "dql"
  std::string plant_spec = "reference";  // "reference" | "single" | file path
  PlantConfig plant = PlantConfig::reference();
  std::size_t total_frames = 1000000;
  std::uint64_t seed = 1;
  std::size_t workers = 8;             // spawned local workers; 0 = in-process
  std::vector<std::string> endpoints;  // host:port, overrides spawning
  std::string out_dir = ".";
  RewardMode mode = RewardMode::kFull;
  RewardParams reward;
  double crash_inject_rate = 0.0;
  std::size_t checkpoint_every = 250000;
  PpoHyper ppo;
  DqnHyper dql;

  int n_muscles() const { return static_cast<int>(plant.muscles.size()); }

  static PlantConfig resolve_plant(const std::string& spec) {
    if (spec == "reference") return PlantConfig::reference();
    if (spec == "single") return PlantConfig::single_muscle();
    return PlantConfig::from_file(spec);
  }

  static std::vector<int> hidden_from(const KeyValueFile& kv,
                                      const std::string& key,
                                      const std::vector<int>& dflt) {
    if (!kv.has(key)) return dflt;
    std::vector<int> out;
    for (double v : kv.get_doubles(key)) out.push_back(static_cast<int>(v));
    return out;
  }

  static RunConfig from_kv(const KeyValueFile& kv) {
    RunConfig c;
    c.experiment = kv.get_string("experiment", c.experiment);
    c.agent = kv.get_string("agent", c.agent);
    c.plant_spec = kv.get_string("plant", c.plant_spec);
    c.plant = resolve_plant(c.plant_spec);
    c.total_frames = kv.get_uint("total_frames", c.total_frames);
    c.seed = kv.get_uint("seed", c.seed);
    c.workers = kv.get_uint("workers", c.workers);
    if (kv.has("endpoints")) c.endpoints = kv.get_strings("endpoints");
    c.out_dir = kv.get_string("out_dir", c.out_dir);
    c.mode = reward_mode_from_string(kv.get_string("reward_mode", "full"));
    c.crash_inject_rate = kv.get_double("crash_inject_rate", 0.0);
    c.checkpoint_every = kv.get_uint("checkpoint_every", c.checkpoint_every);

    c.reward.alpha = kv.get_double("reward.alpha", c.reward.alpha);
    c.reward.omega_max = kv.get_double("reward.omega_max", c.reward.omega_max);
    c.reward.crash_penalty =
        kv.get_double("reward.crash_penalty", c.reward.crash_penalty);
    c.reward.gamma = kv.get_double("reward.gamma", c.reward.gamma);

    c.ppo.clip = kv.get_double("ppo.clip", c.ppo.clip);
    c.ppo.c1 = kv.get_double("ppo.c1", c.ppo.c1);
    c.ppo.c2 = kv.get_double("ppo.c2", c.ppo.c2);
    c.ppo.lambda = kv.get_double("ppo.lambda", c.ppo.lambda);
    c.ppo.gamma = c.reward.gamma;
    c.ppo.epochs = static_cast<int>(kv.get_int("ppo.epochs", c.ppo.epochs));
    c.ppo.minibatch = kv.get_uint("ppo.minibatch", c.ppo.minibatch);
    c.ppo.rollout_frames =
        kv.get_uint("ppo.rollout_frames", c.ppo.rollout_frames);
    c.ppo.lr = kv.get_double("ppo.lr", c.ppo.lr);
    c.ppo.hidden = hidden_from(kv, "ppo.hidden", c.ppo.hidden);
    c.ppo.value_target_is_rollout_value = kv.get_bool(
        "ppo.value_target_is_rollout_value", c.ppo.value_target_is_rollout_value);

    c.dql.buffer_capacity =
        kv.get_uint("dql.buffer_capacity", c.dql.buffer_capacity);
    c.dql.batch_size = kv.get_uint("dql.batch_size", c.dql.batch_size);
    c.dql.warmup = kv.get_uint("dql.warmup", c.dql.warmup);
    c.dql.target_copy_every =
        kv.get_uint("dql.target_copy_every", c.dql.target_copy_every);
    c.dql.eps_start = kv.get_double("dql.eps_start", c.dql.eps_start);
    c.dql.eps_end = kv.get_double("dql.eps_end", c.dql.eps_end);
    // Default anneal span: the first 20% of the frame budget.
    c.dql.eps_anneal_frames = kv.get_uint(
        "dql.eps_anneal_frames", std::max<std::size_t>(1, c.total_frames / 5));
    c.dql.lr = kv.get_double("dql.lr", c.dql.lr);
    c.dql.hidden = hidden_from(kv, "dql.hidden", c.dql.hidden);

    c.validate();
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    return from_kv(KeyValueFile::parse_file(path));
  }

  void validate() const {
    if (agent != "ppo" && agent != "dql")
      throw ConfigError("agent must be \"ppo\" or \"dql\", got \"" + agent +
                        "\"");
    if (agent == "dql" && n_muscles() != 1)
      throw ConfigError(
          "dql requires a single-muscle plant (the discrete action table "
          "covers one muscle)");
    if (!(crash_inject_rate >= 0.0 && crash_inject_rate <= 1.0))
      throw ConfigError("crash_inject_rate must be in [0,1]");
    if (checkpoint_every == 0)
      throw ConfigError("checkpoint_every must be > 0");
    plant.validate();
    reward.validate();
    ppo.validate();
  }

  /// Sidecar metadata written next to each checkpoint: enough to rebuild the
  /// agent and its plant for evaluation without the original config file.
  KeyValueFile to_meta(std::size_t frames) const {
    KeyValueFile kv;
    kv.set("experiment", experiment);
    kv.set("agent", agent);
    kv.set("frames", std::to_string(frames));
    kv.set("seed", std::to_string(seed));
    kv.set("reward_mode", mode == RewardMode::kFull ? "full" : "tracking_only");
    kv.set("crash_inject_rate", format_double(crash_inject_rate));
    kv.set("reward.alpha", format_double(reward.alpha));
    kv.set("reward.omega_max", format_double(reward.omega_max));
    kv.set("reward.crash_penalty", format_double(reward.crash_penalty));
    kv.set("reward.gamma", format_double(reward.gamma));
    if (agent == "ppo") {
      kv.set("ppo.clip", format_double(ppo.clip));
      kv.set("ppo.c1", format_double(ppo.c1));
      kv.set("ppo.c2", format_double(ppo.c2));
      kv.set("ppo.lambda", format_double(ppo.lambda));
      kv.set("ppo.epochs", std::to_string(ppo.epochs));
      kv.set("ppo.minibatch", std::to_string(ppo.minibatch));
      kv.set("ppo.rollout_frames", std::to_string(ppo.rollout_frames));
      kv.set("ppo.lr", format_double(ppo.lr));
    } else {
      kv.set("dql.buffer_capacity", std::to_string(dql.buffer_capacity));
      kv.set("dql.batch_size", std::to_string(dql.batch_size));
      kv.set("dql.warmup", std::to_string(dql.warmup));
      kv.set("dql.target_copy_every", std::to_string(dql.target_copy_every));
      kv.set("dql.eps_start", format_double(dql.eps_start));
      kv.set("dql.eps_end", format_double(dql.eps_end));
      kv.set("dql.eps_anneal_frames", std::to_string(dql.eps_anneal_frames));
      kv.set("dql.lr", format_double(dql.lr));
    }
    // Plant keys are merged in flat, so PlantConfig::from_kv reads the meta
    // file directly.
    const KeyValueFile plant_kv = KeyValueFile::parse_string(plant.to_kv_text());
    for (const std::string& k : plant_kv.keys())
      kv.set(k, plant_kv.get_string(k));
    return kv;
  }
};

// ---------------------------------------------------------------------------
// Environment providers: where episodes come from
// ---------------------------------------------------------------------------

/// A source of episode collections.  Training is written against this
/// interface so the same loop runs on in-process plants or a worker pool.
class EnvProvider {
 public:
  virtual ~EnvProvider() = default;
  virtual CollectOutput collect(const PlantConfig& cfg, const CollectSpec& spec,
                                const PolicyFactory& factory) = 0;
  virtual std::size_t env_count() const = 0;
};

/// N in-process plants (no sockets); the determinism reference.
class LocalEnvProvider : public EnvProvider {
 public:
  LocalEnvProvider(const PlantConfig& cfg, std::size_t n, EnvOptions opts = {}) {
    if (n == 0) throw std::invalid_argument("LocalEnvProvider: n must be > 0");
    for (std::size_t i = 0; i < n; ++i)
      envs_.push_back(std::make_unique<LocalEnv>(cfg, opts));
  }

  CollectOutput collect(const PlantConfig& cfg, const CollectSpec& spec,
                        const PolicyFactory& factory) override {
    std::vector<EnvHandle*> handles;
    for (auto& e : envs_) handles.push_back(e.get());
    return collect_episodes(handles, cfg, spec, factory);
  }

  std::size_t env_count() const override { return envs_.size(); }

 private:
  std::vector<std::unique_ptr<LocalEnv>> envs_;
};

/// Episodes from a TCP worker pool; dead endpoints are healed between
/// batches, so a transient worker failure costs at most the episodes it was
/// running.
class PoolEnvProvider : public EnvProvider {
 public:
  explicit PoolEnvProvider(WorkerPool& pool) : pool_(pool) {}

  CollectOutput collect(const PlantConfig& cfg, const CollectSpec& spec,
                        const PolicyFactory& factory) override {
    CollectOutput out = pool_.collect(cfg, spec, factory);
    if (!out.dead_envs.empty()) pool_.heal();
    return out;
  }

  std::size_t env_count() const override {
    return std::max<std::size_t>(1, pool_.alive_count());
  }

 private:
  WorkerPool& pool_;
};

// ---------------------------------------------------------------------------
// Per-episode policies for collection
// ---------------------------------------------------------------------------

/// Stochastic PPO collection policy; one instance per episode.
class PpoEpisodePolicy : public EpisodePolicy {
 public:
  PpoEpisodePolicy(const PpoAgent& agent, std::uint64_t seed)
      : agent_(agent), rng_(seed) {}

  ActionDelta act(const Observation& obs) override {
    PpoAction a = agent_.act(obs, rng_, /*deterministic=*/false);
    aux_.push_back({std::move(a.raw), a.logprob, a.value});
    return std::move(a.action);
  }

  std::vector<StepAux> take_aux() override { return std::move(aux_); }

 private:
  const PpoAgent& agent_;
  Rng rng_;
  std::vector<StepAux> aux_;
};

/// Epsilon-greedy DQL collection policy; epsilon is fixed for the episode.
class DqlEpisodePolicy : public EpisodePolicy {
 public:
  DqlEpisodePolicy(const DqlAgent& agent, double epsilon, std::uint64_t seed)
      : agent_(agent), epsilon_(epsilon), rng_(seed) {}

  ActionDelta act(const Observation& obs) override {
    return agent_.act(obs, epsilon_, rng_);
  }

 private:
  const DqlAgent& agent_;
  double epsilon_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::size_t frames = 0;
  std::size_t updates = 0;
  std::size_t episodes = 0;
  std::size_t stats_rows = 0;
  double baseline_mean_reward = 0.0;  // mean episode reward of first batch
  double final_mean_reward_last10 = 0.0;
  std::string checkpoint_path;
  std::string stats_path;
};

namespace detail {

class RewardWindow {
 public:
  void push(double episode_reward) {
    window_.push_back(episode_reward);
    if (window_.size() > 10) window_.pop_front();
  }
  double mean() const {
    if (window_.empty()) return 0.0;
    double s = 0.0;
    for (double v : window_) s += v;
    return s / static_cast<double>(window_.size());
  }

 private:
  std::deque<double> window_;
};

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  return out;
}

inline void save_checkpoint(const RunConfig& cfg, const std::string& path,
                            std::size_t frames,
                            const std::function<void(std::ostream&)>& saver) {
  std::ofstream out = open_out(path);
  saver(out);
  out.close();
  std::ofstream meta = open_out(path + ".meta");
  meta << cfg.to_meta(frames).dump();
}

}  // namespace detail

/// Train the configured agent against the provider's environments for the
/// frame budget.  Writes per-update stats to <out_dir>/<experiment>_stats.csv,
/// periodic checkpoints every checkpoint_every frames, and the final
/// checkpoint to <out_dir>/<experiment>.ckpt (plus a .meta sidecar each).
inline TrainResult train(const RunConfig& cfg, EnvProvider& provider,
                         std::ostream& log = std::cerr) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  TrainResult res;
  res.stats_path = cfg.out_dir + "/" + cfg.experiment + "_stats.csv";
  res.checkpoint_path = cfg.out_dir + "/" + cfg.experiment + ".ckpt";
  std::ofstream stats = detail::open_out(res.stats_path);

  CollectSpec spec;
  spec.base_seed = mix_seed(cfg.seed, 2);
  spec.start_index = 0;
  spec.episode_frames = kTrainEpisodeFrames;
  spec.total_T = kTrainTotalT;
  spec.section_T = kTrainSectionT;
  spec.endpoint_lo = kTrainEndpointLo;
  spec.endpoint_hi = kTrainEndpointHi;
  spec.reward = cfg.reward;
  spec.mode = cfg.mode;

  detail::RewardWindow window;
  bool have_baseline = false;
  std::size_t next_ckpt = cfg.checkpoint_every;

  // Collection rounds up to whole episodes, so only start a batch whose
  // worst-case rounding still fits the frame budget; the budget is a hard
  // ceiling, not a target to overshoot.
  const auto fits = [&](std::size_t min_frames) {
    return res.frames + min_frames + kTrainEpisodeFrames - 1 <=
           cfg.total_frames;
  };

  const auto absorb_episodes = [&](const CollectOutput& out) {
    double first_batch_sum = 0.0;
    for (const CollectedEpisode& ep : out.episodes) {
      window.push(ep.result.episode_reward);
      first_batch_sum += ep.result.episode_reward;
      ++res.episodes;
    }
    if (!have_baseline && !out.episodes.empty()) {
      res.baseline_mean_reward =
          first_batch_sum / static_cast<double>(out.episodes.size());
      have_baseline = true;
    }
    // Resume right after the last trained episode, not at the collector's
    // high-water mark: with several environments the collector may have
    // speculatively started (or finished) episodes beyond the included
    // prefix, and how many depends on scheduling.  Re-planning those under
    // the updated policy keeps the training sequence identical no matter
    // how many environments served it.
    spec.start_index = out.episodes.empty()
                           ? out.next_index
                           : out.episodes.back().index + 1;
    res.frames += out.frames;
  };

  const auto checkpoint_tick = [&](const std::function<void(std::ostream&)>& saver) {
    while (res.frames >= next_ckpt) {
      const std::string path = cfg.out_dir + "/" + cfg.experiment + "_f" +
                               std::to_string(next_ckpt) + ".ckpt";
      detail::save_checkpoint(cfg, path, res.frames, saver);
      next_ckpt += cfg.checkpoint_every;
    }
  };

  if (cfg.agent == "ppo") {
    PpoAgent agent(cfg.n_muscles(), mix_seed(cfg.seed, 1), cfg.ppo);
    Rng update_rng(mix_seed(cfg.seed, 4));
    const auto saver = [&](std::ostream& o) { agent.save(o); };

    stats << "frames,mean_episode_reward_last10,loss,clip_fraction,entropy\n";
    while (fits(cfg.ppo.rollout_frames)) {
      spec.min_frames = cfg.ppo.rollout_frames;
      const CollectOutput out = provider.collect(
          cfg.plant, spec, [&](std::uint64_t policy_seed) {
            return std::make_unique<PpoEpisodePolicy>(agent, policy_seed);
          });
      absorb_episodes(out);

      PpoRollout rollout;
      rollout.snapshot_id = agent.net().snapshot_id;
      rollout.obs_dim = agent.net().obs_dim();
      rollout.n_actions = agent.net().n_actions();
      for (const CollectedEpisode& ep : out.episodes) {
        if (ep.aux.size() != ep.result.transitions.size())
          throw std::logic_error("ppo: policy aux out of step with episode");
        for (std::size_t k = 0; k < ep.result.transitions.size(); ++k) {
          const Transition& tr = ep.result.transitions[k];
          rollout.push(normalized_input(tr.obs), ep.aux[k].raw,
                       ep.aux[k].logprob, ep.aux[k].value, tr.reward, tr.done);
        }
      }

      const PpoStats st = agent.update(rollout, update_rng);
      ++res.updates;
      ++res.stats_rows;
      stats << res.frames << ',' << format_double(window.mean()) << ','
            << format_double(st.loss) << ',' << format_double(st.clip_fraction)
            << ',' << format_double(st.entropy) << '\n';
      stats.flush();
      if (res.updates % 25 == 0) {
        log << "ppo: " << res.frames << " frames, " << res.updates
            << " updates, reward(last10) " << format_double(window.mean())
            << "\n";
      }
      checkpoint_tick(saver);
    }
    detail::save_checkpoint(cfg, res.checkpoint_path, res.frames, saver);
  } else {
    DqlAgent agent(cfg.n_muscles(), mix_seed(cfg.seed, 1), cfg.dql);
    ReplayBuffer buffer(cfg.dql.buffer_capacity);
    Rng update_rng(mix_seed(cfg.seed, 4));
    const auto saver = [&](std::ostream& o) { agent.save(o); };

    // One gradient update per collected frame once the buffer has warmed up.
    std::size_t chunks = 0;
    const std::size_t chunk_frames =
        kTrainEpisodeFrames * std::max<std::size_t>(1, provider.env_count());
    stats << "frames,mean_episode_reward_last10,loss,epsilon,updates\n";
    while (fits(chunk_frames)) {
      // Epsilon is frozen for the whole chunk at its starting frame count;
      // the chunk is one episode per environment, so the anneal advances in
      // steps of at most workers * episode_frames.
      const double eps = agent.epsilon_at(res.frames);
      spec.min_frames = chunk_frames;
      const CollectOutput out = provider.collect(
          cfg.plant, spec, [&](std::uint64_t policy_seed) {
            return std::make_unique<DqlEpisodePolicy>(agent, eps, policy_seed);
          });
      absorb_episodes(out);
      for (const CollectedEpisode& ep : out.episodes)
        for (const Transition& tr : ep.result.transitions) buffer.push(tr);

      double loss_sum = 0.0;
      std::size_t loss_n = 0;
      const std::size_t target_updates =
          res.frames > cfg.dql.warmup ? res.frames - cfg.dql.warmup : 0;
      while (res.updates < target_updates && buffer.size() >= cfg.dql.warmup) {
        loss_sum += agent.update(buffer, cfg.reward.gamma, update_rng);
        ++res.updates;
        ++loss_n;
      }

      ++chunks;
      ++res.stats_rows;
      stats << res.frames << ',' << format_double(window.mean()) << ','
            << format_double(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0)
            << ',' << format_double(eps) << ',' << res.updates << '\n';
      stats.flush();
      if (chunks % 50 == 0) {
        log << "dql: " << res.frames << " frames, " << res.updates
            << " updates, epsilon " << format_double(eps)
            << ", reward(last10) " << format_double(window.mean()) << "\n";
      }
      checkpoint_tick(saver);
    }
    detail::save_checkpoint(cfg, res.checkpoint_path, res.frames, saver);
  }

  res.final_mean_reward_last10 = window.mean();
  log << cfg.agent << ": done, " << res.frames << " frames, " << res.updates
      << " updates, " << res.episodes << " episodes, reward(last10) "
      << format_double(res.final_mean_reward_last10) << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint loading and deterministic policies
// ---------------------------------------------------------------------------

/// An evaluable agent restored from a checkpoint plus its .meta sidecar.
struct LoadedAgent {
  std::string kind;  // "ppo" | "dql"
  PlantConfig plant;
  RewardParams reward;
  RewardMode mode = RewardMode::kFull;
  std::unique_ptr<PpoAgent> ppo;
  std::unique_ptr<DqlAgent> dql;

  /// Deterministic control: PPO uses the mean action, DQL the greedy one.
  PolicyFn policy() const {
    if (kind == "ppo") {
      const PpoAgent* agent = ppo.get();
      return [agent](const Observation& obs) {
        Rng unused(0);
        return agent->act(obs, unused, /*deterministic=*/true).action;
      };
    }
    const DqlAgent* agent = dql.get();
    return [agent](const Observation& obs) { return agent->act_greedy(obs); };
  }
};

inline LoadedAgent load_agent(const std::string& ckpt_path) {
  const std::string meta_path = ckpt_path + ".meta";
  if (!std::filesystem::exists(meta_path))
    throw ConfigError("checkpoint sidecar not found: " + meta_path);
  const KeyValueFile meta = KeyValueFile::parse_file(meta_path);

  LoadedAgent out;
  out.kind = meta.get_string("agent");
  out.plant = PlantConfig::from_kv(meta);
  out.reward.alpha = meta.get_double("reward.alpha", out.reward.alpha);
  out.reward.omega_max = meta.get_double("reward.omega_max", out.reward.omega_max);
  out.reward.crash_penalty =
      meta.get_double("reward.crash_penalty", out.reward.crash_penalty);
  out.reward.gamma = meta.get_double("reward.gamma", out.reward.gamma);
  out.mode = reward_mode_from_string(meta.get_string("reward_mode", "full"));

  std::ifstream in(ckpt_path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + ckpt_path);
  const int n = static_cast<int>(out.plant.muscles.size());
  if (out.kind == "ppo") {
    out.ppo = std::make_unique<PpoAgent>(n, 0);
    out.ppo->load(in);
    if (out.ppo->net().obs_dim() != 4 + n || out.ppo->net().n_actions() != n)
      throw ConfigError("checkpoint shape does not match its plant");
  } else if (out.kind == "dql") {
    out.dql = std::make_unique<DqlAgent>(1, 0);
    out.dql->load(in);
    if (n != 1) throw ConfigError("dql checkpoint with a non-single plant");
  } else {
    throw ConfigError("unknown agent kind in sidecar: " + out.kind);
  }
  return out;
}

inline EvalReport evaluate_checkpoint(const std::string& ckpt_path,
                                      std::uint64_t test_set_seed = kTestSetSeed,
                                      std::size_t count = kTestSetSize) {
  const LoadedAgent agent = load_agent(ckpt_path);
  return evaluate_policy(agent.plant, agent.policy(), agent.reward, agent.mode,
                         test_set_seed, count);
}

// ---------------------------------------------------------------------------
// Trace and test-set emission
// ---------------------------------------------------------------------------

/// Deterministic rollout of one trajectory, dumped in the trace CSV schema.
inline EpisodeResult emit_trace(const LoadedAgent& agent, const Trajectory& traj,
                                std::ostream& out) {
  const std::size_t frames = static_cast<std::size_t>(
      std::llround(traj.total_duration() / agent.plant.dt));
  EpisodeResult res = run_episode(agent.plant, traj, frames, agent.policy(),
                                  agent.reward, agent.mode, /*env_seed=*/0);
  write_trace_csv(res.transitions, traj, agent.plant, out);
  return res;
}

/// Write the frozen test set: one CSV per trajectory plus a manifest.
inline void gen_testset(const std::string& dir, std::uint64_t test_set_seed,
                        std::size_t count, double dt) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest = detail::open_out(dir + "/manifest.csv");
  manifest << "index,file,seed,duration\n";
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "traj_%03zu.csv", i);
    const Trajectory traj = test_trajectory(test_set_seed, i);
    std::ofstream out = detail::open_out(dir + "/" + name);
    write_trajectory_csv(traj, out, dt);
    manifest << i << ',' << name << ',' << mix_seed(test_set_seed, i) << ','
             << format_double(traj.total_duration()) << '\n';
  }
}

}  // namespace abrl
