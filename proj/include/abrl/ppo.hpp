#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "abrl/mdp.hpp"
#include "abrl/nn.hpp"
#include "abrl/rng.hpp"

namespace abrl {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 1.0;

/// Diagonal-Gaussian log density, summed over dimensions.
inline double gaussian_logprob(std::span<const double> mean,
                               std::span<const double> log_std,
                               std::span<const double> action) {
  if (mean.size() != log_std.size() || mean.size() != action.size())
    throw std::invalid_argument("gaussian_logprob: shape mismatch");
  constexpr double kHalfLog2Pi = 0.9189385332046727;  // ln(2*pi)/2
  double lp = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double sd = std::exp(log_std[i]);
    const double z = (action[i] - mean[i]) / sd;
    lp += -0.5 * z * z - log_std[i] - kHalfLog2Pi;
  }
  return lp;
}

/// Closed-form entropy of the diagonal Gaussian: sum_i (log_std_i + ln(2*pi*e)/2).
inline double gaussian_entropy(std::span<const double> log_std) {
  constexpr double kHalfLog2PiE = 1.4189385332046727;  // ln(2*pi*e)/2
  double h = 0.0;
  for (double ls : log_std) h += ls + kHalfLog2PiE;
  return h;
}

/// Generalized advantage estimation by reverse recursion.  `dones` cut the
/// recursion at episode ends; `bootstrap_value` is V of the state after the
/// last transition, used only when that transition is not terminal (a batch
/// truncated mid-episode).  Returns (advantages, returns = adv + values).
inline std::pair<std::vector<double>, std::vector<double>> gae_advantages(
    std::span<const double> rewards, std::span<const double> values,
    std::span<const std::uint8_t> dones, double gamma, double lambda,
    double bootstrap_value) {
  if (rewards.size() != values.size() || rewards.size() != dones.size())
    throw std::invalid_argument("gae: length mismatch");
  const std::size_t n = rewards.size();
  std::vector<double> adv(n), ret(n);
  double carry = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t t = n; t-- > 0;) {
    const double nonterm = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * nonterm - values[t];
    carry = delta + gamma * lambda * nonterm * carry;
    adv[t] = carry;
    ret[t] = adv[t] + values[t];
    next_value = values[t];
  }
  return {std::move(adv), std::move(ret)};
}

struct PpoHyper {
  double clip = 0.2;
  double c1 = 0.5;    // value-loss weight
  double c2 = 0.01;   // entropy weight
  double lambda = 0.95;
  double gamma = 0.99;
  int epochs = 4;
  std::size_t minibatch = 256;
  std::size_t rollout_frames = 2048;
  double lr = 3e-4;
  std::vector<int> hidden = {256};
  // Eq.-literal variant: value target is the rollout-time value estimate
  // instead of the GAE return.
  bool value_target_is_rollout_value = false;

  void validate() const {
    if (!(clip > 0.0 && clip < 1.0))
      throw std::invalid_argument("ppo: clip must be in (0,1)");
    if (!(c1 >= 0.0 && c2 >= 0.0))
      throw std::invalid_argument("ppo: c1, c2 must be >= 0");
    if (!(lambda > 0.0 && lambda <= 1.0) || !(gamma > 0.0 && gamma <= 1.0))
      throw std::invalid_argument("ppo: lambda, gamma must be in (0,1]");
    if (epochs <= 0 || minibatch == 0 || rollout_frames == 0)
      throw std::invalid_argument("ppo: epochs/minibatch/rollout must be positive");
  }
};

/// Shared-trunk policy/value net: ReLU trunk feeding a linear mean head
/// (n outputs), a linear value head (1 output), and a state-independent
/// learnable log-std vector clamped to [-5, 1].
struct PolicyValueNet {
  Mlp trunk;  // obs_dim -> hidden..., ReLU on its output
  Mlp pi;     // hidden -> n
  Mlp v;      // hidden -> 1
  std::vector<double> log_std;
  std::uint64_t snapshot_id = 1;  // bumped on every parameter change

  static PolicyValueNet make(int obs_dim, const std::vector<int>& hidden, int n,
                             std::uint64_t seed) {
    if (hidden.empty()) throw std::invalid_argument("ppo net: needs a hidden layer");
    std::vector<int> tdims;
    tdims.push_back(obs_dim);
    tdims.insert(tdims.end(), hidden.begin(), hidden.end());
    PolicyValueNet net;
    net.trunk = Mlp::he_init(tdims, mix_seed(seed, 1), /*relu_output=*/true);
    net.pi = Mlp::he_init({hidden.back(), n}, mix_seed(seed, 2));
    net.v = Mlp::he_init({hidden.back(), 1}, mix_seed(seed, 3));
    net.log_std.assign(n, 0.0);
    return net;
  }

  int n_actions() const { return pi.output_dim(); }
  int obs_dim() const { return trunk.input_dim(); }

  std::size_t param_count() const {
    return trunk.params().size() + pi.params().size() + v.params().size() +
           log_std.size();
  }

  /// Forward through trunk and both heads, keeping caches for backprop.
  struct Caches {
    FwdCache trunk, pi, v;
  };
  void forward(std::span<const double> x, Caches& c, std::vector<double>& mean,
               double& value) const {
    const std::vector<double>& h = trunk.forward_cached(x, c.trunk);
    mean = pi.forward_cached(h, c.pi);
    value = v.forward_cached(h, c.v)[0];
  }

  /// Checkpoint layout: trunk block, pi block, v block (each in the flat
  /// binary net format), then u32 n + n little-endian doubles of log-std.
  void save(std::ostream& out) const {
    trunk.save(out);
    pi.save(out);
    v.save(out);
    detail::write_bytes_le(out, log_std.size(), 4);
    for (double ls : log_std) detail::write_f64_le(out, ls);
    if (!out) throw std::runtime_error("checkpoint: write failed");
  }

  static PolicyValueNet load(std::istream& in) {
    PolicyValueNet net;
    net.trunk = Mlp::load(in, /*relu_output=*/true);
    net.pi = Mlp::load(in);
    net.v = Mlp::load(in);
    const auto n = detail::read_bytes_le(in, 4);
    if (n == 0 || n > 1024)
      throw std::runtime_error("checkpoint: implausible log-std length");
    net.log_std.resize(n);
    for (double& ls : net.log_std) ls = detail::read_f64_le(in);
    if (net.pi.output_dim() != static_cast<int>(n))
      throw std::runtime_error("checkpoint: policy head width != log-std length");
    if (net.pi.input_dim() != net.trunk.output_dim() ||
        net.v.input_dim() != net.trunk.output_dim() || net.v.output_dim() != 1)
      throw std::runtime_error("checkpoint: head shapes inconsistent with trunk");
    return net;
  }
};

/// One on-policy batch: everything recorded at collection time under a
/// single parameter snapshot.  Observations are stored already normalized;
/// actions are the raw (pre-clamp) Gaussian samples the ratios need.
struct PpoRollout {
  std::uint64_t snapshot_id = 0;
  int obs_dim = 0;
  int n_actions = 0;
  std::vector<double> obs;        // size * obs_dim
  std::vector<double> action;     // size * n_actions, pre-clamp
  std::vector<double> logprob;    // recorded at action time
  std::vector<double> value;      // V(s) at action time
  std::vector<double> reward;
  std::vector<std::uint8_t> done;

  std::size_t size() const { return logprob.size(); }

  void push(std::span<const double> x, std::span<const double> raw_action,
            double lp, double val, double r, bool d) {
    obs.insert(obs.end(), x.begin(), x.end());
    action.insert(action.end(), raw_action.begin(), raw_action.end());
    logprob.push_back(lp);
    value.push_back(val);
    reward.push_back(r);
    done.push_back(d ? 1 : 0);
  }
};

struct PpoStats {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

/// Gradient accumulators matching the net's chunk layout.
struct PpoGrads {
  std::vector<double> trunk, pi, v, log_std;

  void reset(const PolicyValueNet& net) {
    trunk.assign(net.trunk.params().size(), 0.0);
    pi.assign(net.pi.params().size(), 0.0);
    v.assign(net.v.params().size(), 0.0);
    log_std.assign(net.log_std.size(), 0.0);
  }
};

/// Clipped-surrogate PPO loss over a prepared batch (advantages already
/// normalized), minimized:
///   L = -E[min(rho*A, clip(rho, 1-eps, 1+eps)*A)]
///       + c1*E[(V - V_target)^2] - c2*E[entropy]
/// When `grads` is non-null, accumulates exact gradients of L.
/// clip_fraction reports the share of samples with |rho - 1| > clip.
inline PpoStats ppo_loss(const PolicyValueNet& net, std::span<const double> obs,
                         std::span<const double> actions,
                         std::span<const double> old_logprobs,
                         std::span<const double> advantages,
                         std::span<const double> value_targets,
                         const PpoHyper& hp, PpoGrads* grads = nullptr) {
  const std::size_t B = old_logprobs.size();
  const int od = net.obs_dim();
  const int n = net.n_actions();
  if (B == 0) throw std::invalid_argument("ppo_loss: empty batch");
  if (obs.size() != B * static_cast<std::size_t>(od) ||
      actions.size() != B * static_cast<std::size_t>(n) ||
      advantages.size() != B || value_targets.size() != B)
    throw std::invalid_argument("ppo_loss: shape mismatch");

  const double inv_b = 1.0 / static_cast<double>(B);
  const double entropy = gaussian_entropy(net.log_std);
  PpoStats stats;
  stats.entropy = entropy;

  PolicyValueNet::Caches caches;
  std::vector<double> mean, dmean(n), head_in_grad, v_in_grad, trunk_up;
  std::size_t clipped = 0;

  for (std::size_t i = 0; i < B; ++i) {
    const std::span<const double> x = obs.subspan(i * od, od);
    const std::span<const double> a = actions.subspan(i * n, n);
    double value = 0.0;
    net.forward(x, caches, mean, value);

    const double logp = gaussian_logprob(mean, net.log_std, a);
    const double rho = std::exp(logp - old_logprobs[i]);
    const double A = advantages[i];
    const double rho_clamped = std::min(std::max(rho, 1.0 - hp.clip), 1.0 + hp.clip);
    const double s1 = rho * A;
    const double s2 = rho_clamped * A;
    const bool unclipped_active = s1 <= s2;  // min picks s1 on ties
    stats.policy_loss += -std::min(s1, s2) * inv_b;
    if (std::abs(rho - 1.0) > hp.clip) ++clipped;

    const double verr = value - value_targets[i];
    stats.value_loss += verr * verr * inv_b;

    if (grads != nullptr) {
      // Surrogate path: d(-min)/dlogp = -A*rho when the unclipped branch is
      // active, else the clamp has zero slope.
      const double dsur_dlogp = unclipped_active ? -A * rho : 0.0;
      bool mean_grad_nonzero = false;
      for (int j = 0; j < n; ++j) {
        const double sd = std::exp(net.log_std[j]);
        const double z = (a[j] - mean[j]) / sd;
        // dlogp/dmean_j = (a_j - mu_j)/sd^2 = z/sd
        dmean[j] = dsur_dlogp * (z / sd) * inv_b;
        if (dmean[j] != 0.0) mean_grad_nonzero = true;
        // dlogp/dlog_std_j = z^2 - 1; entropy grad d(-c2*H)/dls_j = -c2
        grads->log_std[j] += (dsur_dlogp * (z * z - 1.0) - hp.c2) * inv_b;
      }

      trunk_up.assign(net.trunk.output_dim(), 0.0);
      if (mean_grad_nonzero) {
        net.pi.backward(caches.pi, dmean, grads->pi, &head_in_grad);
        for (int j = 0; j < net.trunk.output_dim(); ++j)
          trunk_up[j] += head_in_grad[j];
      }
      const double dv[1] = {2.0 * hp.c1 * verr * inv_b};
      net.v.backward(caches.v, dv, grads->v, &v_in_grad);
      for (int j = 0; j < net.trunk.output_dim(); ++j) trunk_up[j] += v_in_grad[j];
      net.trunk.backward(caches.trunk, trunk_up, grads->trunk);
    }
  }

  stats.clip_fraction = static_cast<double>(clipped) * inv_b;
  stats.loss = stats.policy_loss + hp.c1 * stats.value_loss - hp.c2 * entropy;
  return stats;
}

/// What act() hands back to the collector: the clamped executable action,
/// the raw Gaussian sample the density was evaluated at, and the on-policy
/// bookkeeping values.
struct PpoAction {
  ActionDelta action;             // clamped to [-1, 1] percent
  std::vector<double> raw;        // pre-clamp sample (== mean when deterministic)
  double logprob = 0.0;           // density of `raw` under the current policy
  double value = 0.0;
};

class PpoAgent {
 public:
  PpoAgent(int n_muscles, std::uint64_t seed, PpoHyper hp = {})
      : hp_(std::move(hp)),
        net_(PolicyValueNet::make(4 + n_muscles, hp_.hidden, n_muscles,
                                  seed)) {
    hp_.validate();
    adam_ = Adam(net_.param_count(), AdamParams{hp_.lr, 0.9, 0.999, 1e-8});
  }

  const PpoHyper& hyper() const { return hp_; }
  PolicyValueNet& net() { return net_; }
  const PolicyValueNet& net() const { return net_; }

  /// Sample (or take the mean of) the Gaussian policy.  The logprob is the
  /// density of the raw sample before clamping, which is what the update's
  /// ratios must see.
  PpoAction act(const Observation& obs, Rng& rng, bool deterministic) const {
    const std::vector<double> x = normalized_input(obs);
    PolicyValueNet::Caches caches;
    std::vector<double> mean;
    double value = 0.0;
    net_.forward(x, caches, mean, value);

    PpoAction out;
    out.value = value;
    out.raw.resize(mean.size());
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double sd = std::exp(net_.log_std[j]);
      out.raw[j] = deterministic ? mean[j] : mean[j] + sd * rng.normal();
    }
    out.logprob = gaussian_logprob(mean, net_.log_std, out.raw);
    out.action.omega.resize(out.raw.size());
    for (std::size_t j = 0; j < out.raw.size(); ++j)
      out.action.omega[j] = std::min(1.0, std::max(-1.0, out.raw[j]));
    return out;
  }

  /// K epochs of minibatch Adam on the clipped loss.  Refuses rollouts
  /// collected under any parameter snapshot but the current one, and bumps
  /// the snapshot id afterwards (the rollout must be discarded).
  PpoStats update(const PpoRollout& rollout, Rng& rng) {
    if (rollout.snapshot_id != net_.snapshot_id)
      throw std::logic_error(
          "ppo update: rollout was collected under a stale policy snapshot");
    if (rollout.size() == 0)
      throw std::invalid_argument("ppo update: empty rollout");
    if (rollout.obs_dim != net_.obs_dim() || rollout.n_actions != net_.n_actions())
      throw std::invalid_argument("ppo update: rollout shape mismatch");

    const std::size_t N = rollout.size();
    const double bootstrap = 0.0;  // collection always completes episodes
    auto [adv, ret] = gae_advantages(rollout.reward, rollout.value, rollout.done,
                                     hp_.gamma, hp_.lambda, bootstrap);
    const std::vector<double>& targets =
        hp_.value_target_is_rollout_value ? rollout.value : ret;

    // Per-batch advantage normalization (mean 0, std 1).
    double mu = 0.0;
    for (double a : adv) mu += a;
    mu /= static_cast<double>(N);
    double var = 0.0;
    for (double a : adv) var += (a - mu) * (a - mu);
    const double sd = std::sqrt(var / static_cast<double>(N));
    for (double& a : adv) a = (a - mu) / (sd + 1e-8);

    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;

    const int od = net_.obs_dim();
    const int n = net_.n_actions();
    std::vector<double> mb_obs, mb_act, mb_lp, mb_adv, mb_tgt;
    PpoStats total;
    std::size_t steps = 0;

    for (int epoch = 0; epoch < hp_.epochs; ++epoch) {
      // Fisher-Yates shuffle, deterministic in the caller's rng.
      for (std::size_t i = N; i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_int(i)]);

      for (std::size_t start = 0; start < N; start += hp_.minibatch) {
        const std::size_t count = std::min(hp_.minibatch, N - start);
        mb_obs.clear(); mb_act.clear(); mb_lp.clear(); mb_adv.clear(); mb_tgt.clear();
        for (std::size_t k = 0; k < count; ++k) {
          const std::size_t i = order[start + k];
          mb_obs.insert(mb_obs.end(), rollout.obs.begin() + i * od,
                        rollout.obs.begin() + (i + 1) * od);
          mb_act.insert(mb_act.end(), rollout.action.begin() + i * n,
                        rollout.action.begin() + (i + 1) * n);
          mb_lp.push_back(rollout.logprob[i]);
          mb_adv.push_back(adv[i]);
          mb_tgt.push_back(targets[i]);
        }

        grads_.reset(net_);
        const PpoStats s = ppo_loss(net_, mb_obs, mb_act, mb_lp, mb_adv, mb_tgt,
                                    hp_, &grads_);
        total.loss += s.loss;
        total.policy_loss += s.policy_loss;
        total.value_loss += s.value_loss;
        total.entropy += s.entropy;
        total.clip_fraction += s.clip_fraction;
        ++steps;

        adam_.begin_step();
        std::size_t off = 0;
        adam_.apply(off, net_.trunk.params(), grads_.trunk);
        off += grads_.trunk.size();
        adam_.apply(off, net_.pi.params(), grads_.pi);
        off += grads_.pi.size();
        adam_.apply(off, net_.v.params(), grads_.v);
        off += grads_.v.size();
        adam_.apply(off, net_.log_std, grads_.log_std);
        for (double& ls : net_.log_std)
          ls = std::min(kLogStdMax, std::max(kLogStdMin, ls));
      }
    }

    net_.snapshot_id += 1;  // parameters changed; outstanding rollouts are stale
    if (steps > 0) {
      total.loss /= static_cast<double>(steps);
      total.policy_loss /= static_cast<double>(steps);
      total.value_loss /= static_cast<double>(steps);
      total.entropy /= static_cast<double>(steps);
      total.clip_fraction /= static_cast<double>(steps);
    }
    return total;
  }

  void save(std::ostream& out) const { net_.save(out); }
  void load(std::istream& in) {
    net_ = PolicyValueNet::load(in);
    adam_ = Adam(net_.param_count(), AdamParams{hp_.lr, 0.9, 0.999, 1e-8});
  }

 private:
  PpoHyper hp_;
  PolicyValueNet net_;
  Adam adam_;
  PpoGrads grads_;
};

}  // namespace abrl
