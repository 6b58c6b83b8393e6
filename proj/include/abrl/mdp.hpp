#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "abrl/plant.hpp"
#include "abrl/rng.hpp"
#include "abrl/text.hpp"
#include "abrl/trajectory.hpp"

namespace abrl {

/// What the agent sees each frame: current pose, the target one step ahead,
/// and the current activation levels.  Angles in degrees, velocities in
/// degrees/s, activations in [0,1].  Flattens to length 4+n.
struct Observation {
  double phi = 0.0;
  double phi_dot = 0.0;
  double phi_hat_next = 0.0;
  double phi_dot_hat_next = 0.0;
  Activations omega_caps;

  std::vector<double> flat() const {
    std::vector<double> v;
    v.reserve(4 + omega_caps.size());
    v.push_back(phi);
    v.push_back(phi_dot);
    v.push_back(phi_hat_next);
    v.push_back(phi_dot_hat_next);
    v.insert(v.end(), omega_caps.begin(), omega_caps.end());
    return v;
  }
};

/// Per-muscle activation increments in percent units: 1.0 means one percent,
/// i.e. an activation change of 0.01.  Components live in [-1, 1].
struct ActionDelta {
  std::vector<double> omega;
};

/// Fixed input scaling applied by the agents (never stored in Transitions):
/// angles and velocities divided by 90, activations passed through.
inline std::vector<double> normalized_input(const Observation& obs) {
  std::vector<double> v;
  v.reserve(4 + obs.omega_caps.size());
  v.push_back(obs.phi / 90.0);
  v.push_back(obs.phi_dot / 90.0);
  v.push_back(obs.phi_hat_next / 90.0);
  v.push_back(obs.phi_dot_hat_next / 90.0);
  v.insert(v.end(), obs.omega_caps.begin(), obs.omega_caps.end());
  return v;
}

struct RewardParams {
  double alpha = 0.1;          // Lasso weight per percent of action
  double omega_max = 0.95;     // bang-bang indicator threshold, percent
  double crash_penalty = -100.0;
  double gamma = 0.99;

  void validate() const {
    if (!(omega_max > 0.0 && omega_max < 1.0))
      throw std::invalid_argument("reward: omega_max must be in (0,1)");
    if (!(alpha >= 0.0)) throw std::invalid_argument("reward: alpha must be >= 0");
    if (!(crash_penalty < 0.0))
      throw std::invalid_argument("reward: crash_penalty must be < 0");
    if (!(gamma > 0.0 && gamma < 1.0))
      throw std::invalid_argument("reward: gamma must be in (0,1)");
  }
};

/// Which per-step reward the trainer uses.
enum class RewardMode {
  kFull,          // tracking + action Lasso + bang-bang indicator
  kTrackingOnly,  // ablated single-muscle form: -|phi - phi_hat|
};

inline RewardMode reward_mode_from_string(const std::string& s) {
  if (s == "full") return RewardMode::kFull;
  if (s == "tracking_only") return RewardMode::kTrackingOnly;
  throw std::invalid_argument("reward mode must be 'full' or 'tracking_only', got: " + s);
}

struct Transition {
  Observation obs;
  ActionDelta action;
  double reward = 0.0;
  Observation next_obs;
  bool done = false;
  bool crashed = false;  // crashed implies done
};

/// Integrate an action into activation space: each component moves by
/// 0.01 * omega (percent -> fraction) and is clamped to [0, 1].
inline Activations apply_action(const Activations& acts, const ActionDelta& delta) {
  if (acts.size() != delta.omega.size())
    throw std::invalid_argument("apply_action: action size does not match muscle count");
  Activations next(acts.size());
  for (std::size_t i = 0; i < acts.size(); ++i)
    next[i] = std::min(1.0, std::max(0.0, acts[i] + 0.01 * delta.omega[i]));
  return next;
}

/// Dense per-step reward:
///   r = -|phi - phi_hat| - alpha * sum_i |omega_i|
///       - (1/n) * sum_i 1{|omega_i| > omega_max}
/// Always <= 0; zero only at perfect tracking with zero action.
inline double reward(double phi_next, double phi_hat_next, const ActionDelta& delta,
                     const RewardParams& p) {
  const std::size_t n = delta.omega.size();
  if (n == 0) throw std::invalid_argument("reward: empty action");
  double lasso = 0.0;
  double bang = 0.0;
  for (double w : delta.omega) {
    lasso += std::abs(w);
    if (std::abs(w) > p.omega_max) bang += 1.0;
  }
  return -std::abs(phi_next - phi_hat_next) - p.alpha * lasso -
         bang / static_cast<double>(n);
}

/// Ablated reward used for the single-muscle comparison: tracking error only.
inline double single_muscle_reward(double phi_next, double phi_hat_next) {
  return -std::abs(phi_next - phi_hat_next);
}

/// Environment-side options beyond plant physics.  crash_inject_rate forces
/// a crash at a uniformly chosen step in that fraction of episodes (keyed off
/// the reset seed), for exercising crash-recovery behavior in training.
struct EnvOptions {
  double crash_inject_rate = 0.0;
};

struct EnvReset {
  JointState state;
  Activations omega_caps;  // starting activation levels (static gravity hold)
};

struct EnvStep {
  bool crashed = false;
  JointState state{};  // meaningful only when !crashed
};

/// A single-episode environment endpoint.  The learner drives it strictly
/// reset -> step* and mirrors activation integration locally; implementations
/// run in-process or behind the TCP protocol with identical numerics.
class EnvHandle {
 public:
  virtual ~EnvHandle() = default;
  virtual EnvReset reset(std::uint64_t seed, double initial_phi) = 0;
  virtual EnvStep step(const ActionDelta& delta) = 0;
};

/// In-process environment: owns one plant instance plus activation state.
class LocalEnv : public EnvHandle {
 public:
  LocalEnv(PlantConfig cfg, EnvOptions opts = {})
      : cfg_(std::move(cfg)), opts_(opts) {
    cfg_.validate();
  }

  EnvReset reset(std::uint64_t seed, double initial_phi) override {
    state_ = {initial_phi, 0.0};
    acts_ = hold_activations(cfg_, initial_phi);
    step_count_ = 0;
    crash_step_ = 0;
    if (opts_.crash_inject_rate > 0.0) {
      Rng rng(seed);
      if (rng.uniform01() < opts_.crash_inject_rate)
        crash_step_ = 1 + rng.uniform_int(100);  // somewhere in a 100-frame episode
    }
    return {state_, acts_};
  }

  EnvStep step(const ActionDelta& delta) override {
    ++step_count_;
    acts_ = apply_action(acts_, delta);
    if (crash_step_ > 0 && step_count_ >= crash_step_) return {true, {}};
    const StepResult r = abrl::step(state_, acts_, cfg_);
    if (r.crashed) return {true, {}};
    state_ = r.state;
    return {false, state_};
  }

  const PlantConfig& config() const { return cfg_; }

 private:
  PlantConfig cfg_;
  EnvOptions opts_;
  JointState state_{};
  Activations acts_;
  std::uint64_t step_count_ = 0;
  std::uint64_t crash_step_ = 0;
};

using PolicyFn = std::function<ActionDelta(const Observation&)>;

struct EpisodeResult {
  std::vector<Transition> transitions;
  double episode_reward = 0.0;
  bool crashed = false;
};

/// Incremental episode driver: one call to step_once() advances one frame,
/// so a collector can interleave many in-flight episodes over independent
/// environments.  The driver owns trajectory sampling, observation assembly,
/// activation mirroring, and rewards; the environment only integrates
/// physics.  On a crash the final transition carries crash_penalty and the
/// episode ends.  next_obs of a crash transition repeats the pre-crash
/// observation (the plant state is gone); it is terminal, so it is never
/// bootstrapped.
class EpisodeRunner {
 public:
  EpisodeRunner(EnvHandle& env, const PlantConfig& cfg, Trajectory traj,
                std::size_t frames, PolicyFn policy, const RewardParams& p,
                RewardMode mode, std::uint64_t env_seed)
      : env_(env),
        cfg_(cfg),
        traj_(std::move(traj)),
        frames_(frames),
        policy_(std::move(policy)),
        params_(p),
        mode_(mode) {
    if (traj_.total_duration() + 1e-9 < static_cast<double>(frames) * cfg.dt)
      throw std::invalid_argument("run_episode: trajectory shorter than episode");
    result_.transitions.reserve(frames);
    const double initial_phi = sample(traj_, 0.0).phi_hat;
    const EnvReset reset = env_.reset(env_seed, initial_phi);
    state_ = reset.state;
    acts_ = reset.omega_caps;
  }

  bool finished() const { return finished_; }
  const Trajectory& trajectory() const { return traj_; }
  EpisodeResult& result() { return result_; }
  EpisodeResult take_result() { return std::move(result_); }

  /// Advance one frame; no-op once finished.
  void step_once() {
    if (finished_) return;
    const std::size_t k = result_.transitions.size();
    const double t = static_cast<double>(k) * cfg_.dt;
    const TrajSample target = sample_clamped(traj_, t + cfg_.dt);

    Transition tr;
    tr.obs = {state_.phi, state_.phi_dot, target.phi_hat, target.phi_dot_hat, acts_};
    tr.action = policy_(tr.obs);
    if (tr.action.omega.size() != cfg_.n_muscles())
      throw std::invalid_argument("run_episode: policy action size mismatch");

    const Activations next_acts = apply_action(acts_, tr.action);
    const EnvStep out = env_.step(tr.action);

    if (out.crashed) {
      tr.reward = params_.crash_penalty;
      tr.next_obs = tr.obs;
      tr.done = true;
      tr.crashed = true;
      result_.episode_reward += tr.reward;
      result_.transitions.push_back(std::move(tr));
      result_.crashed = true;
      finished_ = true;
      return;
    }

    tr.reward = mode_ == RewardMode::kFull
                    ? reward(out.state.phi, target.phi_hat, tr.action, params_)
                    : single_muscle_reward(out.state.phi, target.phi_hat);
    const TrajSample next_target = sample_clamped(traj_, t + 2.0 * cfg_.dt);
    tr.next_obs = {out.state.phi, out.state.phi_dot, next_target.phi_hat,
                   next_target.phi_dot_hat, next_acts};
    tr.done = (k + 1 == frames_);
    result_.episode_reward += tr.reward;
    result_.transitions.push_back(std::move(tr));

    state_ = out.state;
    acts_ = next_acts;
    if (k + 1 == frames_) finished_ = true;
  }

 private:
  EnvHandle& env_;
  const PlantConfig& cfg_;
  Trajectory traj_;
  std::size_t frames_;
  PolicyFn policy_;
  RewardParams params_;
  RewardMode mode_;
  JointState state_{};
  Activations acts_;
  EpisodeResult result_;
  bool finished_ = false;
};

/// Drive one whole episode of `frames` steps against an environment endpoint.
inline EpisodeResult run_episode_env(EnvHandle& env, const PlantConfig& cfg,
                                     const Trajectory& traj, std::size_t frames,
                                     const PolicyFn& policy, const RewardParams& p,
                                     RewardMode mode, std::uint64_t env_seed) {
  EpisodeRunner runner(env, cfg, traj, frames, policy, p, mode, env_seed);
  while (!runner.finished()) runner.step_once();
  return runner.take_result();
}

/// Convenience overload running against a fresh in-process plant.
inline EpisodeResult run_episode(const PlantConfig& cfg, const Trajectory& traj,
                                 std::size_t frames, const PolicyFn& policy,
                                 const RewardParams& p, RewardMode mode,
                                 std::uint64_t env_seed = 0,
                                 EnvOptions opts = {}) {
  LocalEnv env(cfg, opts);
  return run_episode_env(env, cfg, traj, frames, policy, p, mode, env_seed);
}

/// Episode trace CSV: t, phi, phi_hat, activation per muscle, action per
/// muscle, reward.  phi and the activations are the values the agent saw at
/// time t (pre-step), phi_hat is the target at t.
inline void write_trace_csv(const std::vector<Transition>& transitions,
                            const Trajectory& traj, const PlantConfig& cfg,
                            std::ostream& out) {
  const std::size_t n = cfg.n_muscles();
  out << "t,phi,phi_hat";
  for (std::size_t i = 0; i < n; ++i) out << ",omega_cap_" << cfg.muscles[i].name;
  for (std::size_t i = 0; i < n; ++i) out << ",omega_" << cfg.muscles[i].name;
  out << ",reward\n";
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    const Transition& tr = transitions[k];
    const double t = static_cast<double>(k) * cfg.dt;
    out << format_double(t) << ',' << format_double(tr.obs.phi) << ','
        << format_double(sample_clamped(traj, t).phi_hat);
    for (std::size_t i = 0; i < n; ++i)
      out << ',' << format_double(tr.obs.omega_caps[i]);
    for (std::size_t i = 0; i < n; ++i)
      out << ',' << format_double(tr.action.omega[i]);
    out << ',' << format_double(tr.reward) << '\n';
  }
}

}  // namespace abrl
