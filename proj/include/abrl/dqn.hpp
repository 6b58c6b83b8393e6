#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "abrl/mdp.hpp"
#include "abrl/nn.hpp"
#include "abrl/rng.hpp"

namespace abrl {

/// The quantized action set for the single-muscle agent: 21 deltas
/// {-1.0, -0.9, ..., 0.9, 1.0} percent, index 10 being zero.
struct DiscreteActionTable {
  static constexpr int kSize = 21;
  static double value(int index) {
    if (index < 0 || index >= kSize)
      throw std::out_of_range("action table: index outside [0, 20]");
    return (index - 10) / 10.0;
  }
};

/// Fixed-capacity FIFO ring of transitions with uniform batch sampling
/// (distinct indices within a batch).
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay buffer: zero capacity");
    slots_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return slots_.size(); }

  void push(Transition t) {
    if (slots_.size() < capacity_) {
      slots_.push_back(std::move(t));
    } else {
      slots_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
  }

  /// Logical indexing, oldest first.
  const Transition& at(std::size_t i) const {
    if (i >= slots_.size()) throw std::out_of_range("replay buffer: index");
    return slots_[(head_ + i) % slots_.size()];
  }

  /// k distinct logical indices, uniform over the current contents.
  std::vector<std::size_t> sample_indices(Rng& rng, std::size_t k) const {
    if (k > slots_.size())
      throw std::invalid_argument("replay buffer: batch larger than contents");
    std::vector<std::size_t> picked;
    picked.reserve(k);
    while (picked.size() < k) {
      const std::size_t idx = rng.uniform_int(slots_.size());
      if (std::find(picked.begin(), picked.end(), idx) == picked.end())
        picked.push_back(idx);
    }
    return picked;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;  // oldest element when full
  std::vector<Transition> slots_;
};

struct DqnHyper {
  std::size_t buffer_capacity = 100000;
  std::size_t batch_size = 64;
  std::size_t warmup = 1000;        // transitions before updates start
  std::size_t target_copy_every = 500;  // hard target-net copy period, updates
  double eps_start = 1.0;
  double eps_end = 0.05;
  std::size_t eps_anneal_frames = 1;  // frames over which epsilon decays linearly
  double lr = 1e-3;
  std::vector<int> hidden = {256};
};

/// Double-DQN bootstrap targets for a batch: y = r for terminal transitions,
/// else y = r + gamma * Q_target(s', argmax_a Q_online(s', a)).  Action
/// selection and evaluation use different nets (the double estimator).
inline std::vector<double> q_targets(const std::vector<const Transition*>& batch,
                                     const Mlp& online, const Mlp& target,
                                     double gamma) {
  if (batch.empty()) throw std::invalid_argument("q_targets: empty batch");
  std::vector<double> y(batch.size());
  FwdCache co, ct;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& tr = *batch[i];
    if (tr.done) {
      y[i] = tr.reward;
      continue;
    }
    const std::vector<double> x = normalized_input(tr.next_obs);
    const std::vector<double>& qo = online.forward_cached(x, co);
    int best = 0;
    for (int a = 1; a < static_cast<int>(qo.size()); ++a)
      if (qo[a] > qo[best]) best = a;  // ties keep the lowest index
    const std::vector<double>& qt = target.forward_cached(x, ct);
    y[i] = tr.reward + gamma * qt[best];
  }
  return y;
}

/// Epsilon-greedy pick over the online net's 21 Q-values; ties go to the
/// lowest index.
inline int select_action_index(const Observation& obs, const Mlp& online,
                               double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw std::invalid_argument("select_action: epsilon outside [0,1]");
  if (epsilon > 0.0 && rng.uniform01() < epsilon)
    return static_cast<int>(rng.uniform_int(DiscreteActionTable::kSize));
  const std::vector<double> q = online.forward(normalized_input(obs));
  int best = 0;
  for (int a = 1; a < static_cast<int>(q.size()); ++a)
    if (q[a] > q[best]) best = a;
  return best;
}

/// Double-DQN learner over the single-muscle action table.  The joint
/// discrete space for n muscles has 21^n actions; anything beyond one muscle
/// is refused up front.
class DqlAgent {
 public:
  DqlAgent(int n_muscles, std::uint64_t seed, DqnHyper hp = {})
      : hp_(std::move(hp)) {
    if (n_muscles != 1)
      throw std::invalid_argument(
          "dql: the discrete action space has 21^n entries; only n_muscles = 1 "
          "is supported (got n_muscles = " +
          std::to_string(n_muscles) + ")");
    std::vector<int> dims;
    dims.push_back(4 + n_muscles);
    dims.insert(dims.end(), hp_.hidden.begin(), hp_.hidden.end());
    dims.push_back(DiscreteActionTable::kSize);
    online_ = Mlp::he_init(dims, mix_seed(seed, 1));
    target_ = online_;
    adam_ = Adam(online_.params().size(), AdamParams{hp_.lr, 0.9, 0.999, 1e-8});
  }

  const DqnHyper& hyper() const { return hp_; }
  const Mlp& online() const { return online_; }
  const Mlp& target() const { return target_; }
  std::size_t update_count() const { return updates_; }

  /// Linear anneal eps_start -> eps_end over the first eps_anneal_frames.
  double epsilon_at(std::size_t frames_seen) const {
    const double f = std::min(
        1.0, static_cast<double>(frames_seen) /
                 static_cast<double>(std::max<std::size_t>(1, hp_.eps_anneal_frames)));
    return hp_.eps_start + (hp_.eps_end - hp_.eps_start) * f;
  }

  int act_index(const Observation& obs, double epsilon, Rng& rng) const {
    return select_action_index(obs, online_, epsilon, rng);
  }

  ActionDelta act(const Observation& obs, double epsilon, Rng& rng) const {
    return ActionDelta{{DiscreteActionTable::value(act_index(obs, epsilon, rng))}};
  }

  /// Greedy policy for evaluation.
  ActionDelta act_greedy(const Observation& obs) const {
    const std::vector<double> q = online_.forward(normalized_input(obs));
    int best = 0;
    for (int a = 1; a < static_cast<int>(q.size()); ++a)
      if (q[a] > q[best]) best = a;
    return ActionDelta{{DiscreteActionTable::value(best)}};
  }

  /// One minibatch MSE step on (Q_online(s, a) - y)^2 with Double-DQN
  /// targets; hard-copies the target net every target_copy_every updates.
  /// Returns the minibatch loss.
  double update(const ReplayBuffer& buffer, double gamma, Rng& rng) {
    if (buffer.size() < hp_.warmup)
      throw std::logic_error("dql update: buffer below warmup size");
    const std::vector<std::size_t> idx =
        buffer.sample_indices(rng, std::min(hp_.batch_size, buffer.size()));
    std::vector<const Transition*> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(&buffer.at(i));

    const std::vector<double> y = q_targets(batch, online_, target_, gamma);

    grads_.assign(online_.params().size(), 0.0);
    std::vector<double> out_grad(DiscreteActionTable::kSize);
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Transition& tr = *batch[i];
      const int a = action_index_of(tr);
      const std::vector<double> x = normalized_input(tr.obs);
      const std::vector<double>& q = online_.forward_cached(x, cache_);
      const double err = q[a] - y[i];
      loss += err * err * inv_b;
      std::fill(out_grad.begin(), out_grad.end(), 0.0);
      out_grad[a] = 2.0 * err * inv_b;
      online_.backward(cache_, out_grad, grads_);
    }

    adam_step(adam_, online_.params(), grads_);
    ++updates_;
    if (updates_ % hp_.target_copy_every == 0) target_ = online_;
    return loss;
  }

  void save(std::ostream& out) const { online_.save(out); }

  void load(std::istream& in) {
    online_ = Mlp::load(in);
    if (online_.output_dim() != DiscreteActionTable::kSize)
      throw std::runtime_error("dql checkpoint: output dim is not 21");
    target_ = online_;
  }

 private:
  /// Recover the table index from a stored action (actions are table values
  /// by construction; nearest entry guards against round-trip noise).
  static int action_index_of(const Transition& tr) {
    if (tr.action.omega.size() != 1)
      throw std::invalid_argument("dql: transition action is not 1-dimensional");
    const double w = tr.action.omega[0];
    int best = 0;
    double best_d = 1e300;
    for (int i = 0; i < DiscreteActionTable::kSize; ++i) {
      const double d = std::abs(DiscreteActionTable::value(i) - w);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return best;
  }

  DqnHyper hp_;
  Mlp online_, target_;
  Adam adam_;
  std::size_t updates_ = 0;
  std::vector<double> grads_;
  FwdCache cache_;
};

}  // namespace abrl
