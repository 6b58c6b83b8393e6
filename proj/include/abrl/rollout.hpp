#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "abrl/mdp.hpp"
#include "abrl/net.hpp"
#include "abrl/rng.hpp"
#include "abrl/trajectory.hpp"
#include "abrl/wire.hpp"

namespace abrl {

/// Per-step bookkeeping a policy may record during collection (PPO needs the
/// raw pre-clamp action, its log density, and the value estimate).
struct StepAux {
  std::vector<double> raw;
  double logprob = 0.0;
  double value = 0.0;
};

/// A policy instance driving exactly one episode.  Instances are created per
/// episode from a seed, so episode data depends only on (snapshot, seed) and
/// never on scheduling order.
class EpisodePolicy {
 public:
  virtual ~EpisodePolicy() = default;
  virtual ActionDelta act(const Observation& obs) = 0;
  /// Per-step records, one entry per act() call, for agents that need them.
  virtual std::vector<StepAux> take_aux() { return {}; }
};

using PolicyFactory =
    std::function<std::unique_ptr<EpisodePolicy>(std::uint64_t policy_seed)>;

/// Everything an episode needs, derived deterministically from
/// (base_seed, episode index).
struct EpisodePlan {
  std::uint64_t index = 0;
  std::uint64_t env_seed = 0;
  std::uint64_t policy_seed = 0;
  Trajectory traj;
};

/// Parameters of one collection call.
struct CollectSpec {
  std::uint64_t base_seed = 0;
  std::uint64_t start_index = 0;   // episode index of the first episode
  std::size_t min_frames = 1;      // collect until included frames reach this
  std::size_t episode_frames = 100;
  double total_T = 10.0;
  double section_T = 5.0;
  double endpoint_lo = 30.0;
  double endpoint_hi = 90.0;
  RewardParams reward;
  RewardMode mode = RewardMode::kFull;
};

inline EpisodePlan make_episode_plan(const CollectSpec& spec, std::uint64_t index) {
  const std::uint64_t ep = mix_seed(spec.base_seed, index);
  EpisodePlan plan;
  plan.index = index;
  plan.traj = random_trajectory(mix_seed(ep, 1), spec.total_T, spec.section_T,
                                spec.endpoint_lo, spec.endpoint_hi);
  plan.env_seed = mix_seed(ep, 2);
  plan.policy_seed = mix_seed(ep, 3);
  return plan;
}

struct CollectedEpisode {
  std::uint64_t index = 0;
  EpisodeResult result;
  std::vector<StepAux> aux;
};

struct CollectOutput {
  std::vector<CollectedEpisode> episodes;  // included episodes, ascending index
  std::size_t frames = 0;                  // sum of included episode lengths
  std::vector<std::uint64_t> lost;         // episode indices lost to env failures
  std::vector<std::size_t> dead_envs;      // positions in `envs` that failed
  std::uint64_t next_index = 0;            // first index untouched by this call
};

/// Collect complete episodes across a set of environment endpoints until the
/// included frame count reaches spec.min_frames.
///
/// Determinism contract: episode content is a pure function of
/// (base_seed, index, policy snapshot), and inclusion follows index order —
/// episode i is included iff the frame sum of included episodes with smaller
/// index is still below min_frames.  Scheduling therefore never changes the
/// returned data, and a single remote endpoint reproduces the in-process
/// rollout bit for bit.
///
/// Failure contract: when an endpoint dies mid-episode, that episode's
/// partial data is discarded and its index reported in `lost`; collection
/// proceeds on the remaining endpoints.  An episode whose reset() failed is
/// retried on another endpoint (nothing was collected for it).  With no
/// working endpoint left, throws NetError.
inline CollectOutput collect_episodes(const std::vector<EnvHandle*>& envs,
                                      const PlantConfig& cfg,
                                      const CollectSpec& spec,
                                      const PolicyFactory& factory) {
  if (envs.empty()) throw NetError("collect: no environment endpoints");
  if (spec.min_frames == 0 || spec.episode_frames == 0)
    throw std::invalid_argument("collect: frame counts must be positive");

  struct Active {
    std::uint64_t index = 0;
    std::unique_ptr<EpisodePolicy> policy;
    std::unique_ptr<EpisodeRunner> runner;
  };

  const std::size_t n_envs = envs.size();
  std::vector<bool> dead(n_envs, false);
  std::vector<std::optional<Active>> active(n_envs);
  std::map<std::uint64_t, CollectedEpisode> completed;
  std::set<std::uint64_t> lost;
  std::deque<std::uint64_t> retry;  // reset-failed indices, retried elsewhere
  std::uint64_t next_index = spec.start_index;

  // Frame sum over the resolved prefix (lost episodes contribute nothing);
  // second value reports whether the prefix already satisfies min_frames.
  const auto prefix_state = [&]() -> std::pair<std::size_t, bool> {
    std::size_t frames = 0;
    for (std::uint64_t idx = spec.start_index;; ++idx) {
      if (frames >= spec.min_frames) return {frames, true};
      if (lost.count(idx)) continue;
      const auto it = completed.find(idx);
      if (it == completed.end()) return {frames, false};
      frames += it->second.result.transitions.size();
    }
  };

  const auto assign = [&](std::size_t slot) -> bool {
    std::uint64_t index;
    if (!retry.empty()) {
      index = retry.front();
      retry.pop_front();
    } else {
      index = next_index++;
    }
    EpisodePlan plan = make_episode_plan(spec, index);
    auto policy = factory(plan.policy_seed);
    EpisodePolicy* policy_raw = policy.get();
    try {
      auto runner = std::make_unique<EpisodeRunner>(
          *envs[slot], cfg, std::move(plan.traj), spec.episode_frames,
          [policy_raw](const Observation& o) { return policy_raw->act(o); },
          spec.reward, spec.mode, plan.env_seed);
      active[slot] = Active{index, std::move(policy), std::move(runner)};
      return true;
    } catch (const NetError&) {
    } catch (const wire::WireError&) {
    } catch (const wire::RemoteError&) {
    }
    dead[slot] = true;  // reset failed: endpoint is gone, index is untouched
    retry.push_back(index);
    return false;
  };

  while (true) {
    // Top up idle endpoints while the resolved prefix still wants frames.
    for (std::size_t slot = 0; slot < n_envs; ++slot) {
      if (dead[slot] || active[slot].has_value()) continue;
      if (prefix_state().second && retry.empty()) continue;
      assign(slot);
    }

    bool any_active = false;
    for (const auto& a : active)
      if (a.has_value()) any_active = true;
    if (!any_active) {
      if (prefix_state().second) break;
      bool any_alive = false;
      for (std::size_t slot = 0; slot < n_envs; ++slot)
        if (!dead[slot]) any_alive = true;
      if (!any_alive) throw NetError("collect: all environment endpoints lost");
      continue;  // idle-but-alive endpoints exist; try assigning again
    }

    // Advance every in-flight episode one frame, in endpoint order.
    for (std::size_t slot = 0; slot < n_envs; ++slot) {
      if (!active[slot].has_value()) continue;
      Active& a = *active[slot];
      bool failed = false;
      try {
        a.runner->step_once();
      } catch (const NetError&) {
        failed = true;
      } catch (const wire::WireError&) {
        failed = true;
      } catch (const wire::RemoteError&) {
        failed = true;
      }
      if (failed) {
        lost.insert(a.index);
        dead[slot] = true;
        active[slot].reset();
        continue;
      }
      if (a.runner->finished()) {
        CollectedEpisode done;
        done.index = a.index;
        done.result = a.runner->take_result();
        done.aux = a.policy->take_aux();
        completed.emplace(a.index, std::move(done));
        active[slot].reset();
      }
    }

    if (prefix_state().second) break;  // in-flight leftovers are speculative
  }

  CollectOutput out;
  std::size_t frames = 0;
  for (std::uint64_t idx = spec.start_index;; ++idx) {
    if (frames >= spec.min_frames) break;
    if (lost.count(idx)) continue;
    auto it = completed.find(idx);
    if (it == completed.end())
      throw std::logic_error("collect: inclusion prefix has a hole");
    frames += it->second.result.transitions.size();
    out.episodes.push_back(std::move(it->second));
  }
  out.frames = frames;
  out.lost.assign(lost.begin(), lost.end());
  for (std::size_t slot = 0; slot < n_envs; ++slot)
    if (dead[slot]) out.dead_envs.push_back(slot);
  out.next_index = next_index;
  return out;
}

}  // namespace abrl
