// End-to-end acceptance suite.  Each test case checks one numbered claim
// about the finished workbench — from closed-form math through full
// distributed trainings of the shipped configurations — and prints exactly
// one "[PASS] criterion N: ..." / "[FAIL] criterion N: ..." line with the
// measured values, then asserts the verdict.  Tolerances and thresholds are
// pinned here, next to the measurements they bound.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "abrl/harness.hpp"
#include "abrl/worker_pool.hpp"

using namespace abrl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "abrl_accept_XXXXXX").string();
    REQUIRE(::mkdtemp(tmpl.data()) != nullptr);
    path = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return path + "/" + name; }
  std::string path;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Run the workbench binary with output captured; returns the exit code
/// (-1 when the process did not exit normally).
int run_cli(const std::string& args, const std::string& out_path,
            const std::string& err_path) {
  const std::string cmd = std::string(ABRL_CLI_PATH) + " " + args + " > " +
                          out_path + " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Value of a "key value" line in the train subcommand's stdout.
std::uint64_t stdout_field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key + " ", 0) == 0)
      return std::stoull(line.substr(key.size() + 1));
  return 0;
}

std::string num(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

/// The single externally visible verdict line, then the assertion.
void report(int criterion, bool ok, const std::string& detail) {
  std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << criterion
            << ": " << detail << std::endl;
  REQUIRE(ok);
}

}  // namespace

// ---------------------------------------------------------------------------
// 1. Quintic correctness
// ---------------------------------------------------------------------------

TEST_CASE("acceptance criterion 1: quintic sections and stacked joints") {
  Stopwatch timer;
  Rng rng(101);
  constexpr double kTol = 1e-9;

  // 1000 random sections: exact endpoint pose/velocity/acceleration, plus
  // the symmetry facts that the midpoint sits at the mean of the endpoints
  // with zero acceleration.
  double end_defect = 0.0, mid_defect = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double p0 = rng.uniform(20.0, 100.0);
    const double p1 = rng.uniform(20.0, 100.0);
    const double T = rng.uniform(2.0, 8.0);
    const QuinticSection s = fit_section(p0, p1, T);
    for (double d : {std::abs(s.position(0.0) - p0), std::abs(s.velocity(0.0)),
                     std::abs(s.acceleration(0.0)),
                     std::abs(s.position(T) - p1), std::abs(s.velocity(T)),
                     std::abs(s.acceleration(T))})
      end_defect = std::max(end_defect, d);
    mid_defect = std::max(
        mid_defect, std::abs(s.position(T / 2.0) - (p0 + p1) / 2.0));
    mid_defect = std::max(mid_defect, std::abs(s.acceleration(T / 2.0)));
  }

  // Stacked trajectories: position, velocity, and acceleration agree across
  // every interior joint (C2 continuity of the rest-to-rest construction).
  double joint_defect = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Trajectory traj =
        random_trajectory(mix_seed(606, seed), 20.0, 4.0, 20.0, 100.0);
    for (std::size_t i = 0; i + 1 < traj.sections.size(); ++i) {
      const QuinticSection& a = traj.sections[i];
      const QuinticSection& b = traj.sections[i + 1];
      joint_defect = std::max(
          joint_defect, std::abs(a.position(a.duration) - b.position(0.0)));
      joint_defect = std::max(
          joint_defect, std::abs(a.velocity(a.duration) - b.velocity(0.0)));
      joint_defect =
          std::max(joint_defect,
                   std::abs(a.acceleration(a.duration) - b.acceleration(0.0)));
    }
  }

  const double elapsed = timer.seconds();
  const bool ok = end_defect <= kTol && mid_defect <= kTol &&
                  joint_defect <= kTol && elapsed < 1.0;
  report(1, ok,
         "1000 sections, max endpoint defect " + num(end_defect) +
             ", midpoint defect " + num(mid_defect) +
             ", stacked-joint defect " + num(joint_defect) + " (tol 1e-9), " +
             num(elapsed, 2) + " s (< 1 s)");
}

// ---------------------------------------------------------------------------
// 2. Gradient fidelity
// ---------------------------------------------------------------------------

namespace {

/// Relative gradient discrepancy with a floor so identically-zero gradients
/// (dead activation paths) compare cleanly: |a-b| / max(|a|, |b|, 1e-6).
double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Draw a probe input whose pre-activations all sit at least `margin` from
/// the kinks, so +-h parameter perturbations never cross one.
std::vector<double> safe_probe(const Mlp& net, Rng& rng, double margin) {
  FwdCache cache;
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<double> x(net.input_dim());
    for (double& v : x) v = rng.uniform(-2.0, 2.0);
    net.forward_cached(x, cache);
    double closest = 1e300;
    for (const auto& layer : cache.pre)
      for (double z : layer) closest = std::min(closest, std::abs(z));
    if (closest >= margin) return x;
  }
  FAIL("could not find a probe input clear of activation kinks");
  return {};
}

}  // namespace

TEST_CASE("acceptance criterion 2: backprop matches finite differences") {
  Stopwatch timer;
  constexpr double kH = 1e-5;
  constexpr double kTol = 1e-4;
  Rng rng(202);

  // Raw networks: gradient of a random linear readout sum_r c_r * y_r.
  double worst_net = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> dims{2 + static_cast<int>(rng.uniform_int(4))};
    const int layers = 1 + static_cast<int>(rng.uniform_int(2));
    for (int l = 0; l < layers; ++l)
      dims.push_back(3 + static_cast<int>(rng.uniform_int(6)));
    dims.push_back(1 + static_cast<int>(rng.uniform_int(4)));
    const bool relu_out = (trial % 2 == 0);
    Mlp net = Mlp::he_init(dims, mix_seed(777, trial), relu_out);

    const std::vector<double> x = safe_probe(net, rng, 1e-3);
    std::vector<double> c(net.output_dim());
    for (double& v : c) v = rng.uniform(-1.0, 1.0);
    const auto probe = [&]() {
      const std::vector<double> y = net.forward(x);
      double loss = 0.0;
      for (int r = 0; r < net.output_dim(); ++r) loss += c[r] * y[r];
      return loss;
    };

    FwdCache cache;
    net.forward_cached(x, cache);
    std::vector<double> grads(net.params().size(), 0.0);
    net.backward(cache, c, grads);

    for (std::size_t k = 0; k < net.params().size(); ++k) {
      double& p = net.params()[k];
      const double saved = p;
      p = saved + kH;
      const double hi = probe();
      p = saved - kH;
      const double lo = probe();
      p = saved;
      worst_net = std::max(worst_net, rel_err(grads[k], (hi - lo) / (2.0 * kH)));
    }
  }

  // Composed clipped-surrogate loss: gradient of the full scalar objective
  // (policy + value + entropy terms through the shared trunk) against the
  // same central differences.  Ratios are pinned away from the clip kinks
  // and probe rows away from activation kinks so the loss is smooth in an
  // +-h neighborhood.
  double worst_loss = 0.0;
  PpoHyper hp;
  const double rho_cycle[5] = {0.7, 0.9, 1.0, 1.1, 1.3};
  for (int trial = 0; trial < 20; ++trial) {
    const int od = 3 + static_cast<int>(rng.uniform_int(4));
    const int n = 1 + static_cast<int>(rng.uniform_int(3));
    const int h = 5 + static_cast<int>(rng.uniform_int(4));
    PolicyValueNet net = PolicyValueNet::make(od, {h}, n, mix_seed(888, trial));
    for (double& ls : net.log_std) ls = rng.uniform(-0.7, 0.3);

    const std::size_t B = 4;
    std::vector<double> obs, actions, old_lp, adv, tgt;
    PolicyValueNet::Caches caches;
    std::vector<double> mean;
    for (std::size_t i = 0; i < B; ++i) {
      const std::vector<double> x = safe_probe(net.trunk, rng, 1e-3);
      obs.insert(obs.end(), x.begin(), x.end());
      double value = 0.0;
      net.forward(x, caches, mean, value);
      std::vector<double> a(n);
      for (int j = 0; j < n; ++j) a[j] = mean[j] + rng.uniform(-0.8, 0.8);
      actions.insert(actions.end(), a.begin(), a.end());
      const double logp = gaussian_logprob(mean, net.log_std, a);
      old_lp.push_back(logp - std::log(rho_cycle[i % 5]));
      adv.push_back(rng.uniform(0.5, 2.0) * (i % 2 == 0 ? 1.0 : -1.0));
      tgt.push_back(rng.uniform(-2.0, 2.0));
    }

    PpoGrads grads;
    grads.reset(net);
    ppo_loss(net, obs, actions, old_lp, adv, tgt, hp, &grads);

    const auto loss_at = [&]() {
      return ppo_loss(net, obs, actions, old_lp, adv, tgt, hp).loss;
    };
    const auto check_chunk = [&](std::vector<double>& params,
                                 const std::vector<double>& g) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        const double saved = params[k];
        params[k] = saved + kH;
        const double hi = loss_at();
        params[k] = saved - kH;
        const double lo = loss_at();
        params[k] = saved;
        worst_loss =
            std::max(worst_loss, rel_err(g[k], (hi - lo) / (2.0 * kH)));
      }
    };
    check_chunk(net.trunk.params(), grads.trunk);
    check_chunk(net.pi.params(), grads.pi);
    check_chunk(net.v.params(), grads.v);
    check_chunk(net.log_std, grads.log_std);
  }

  const double elapsed = timer.seconds();
  const bool ok = worst_net <= kTol && worst_loss <= kTol && elapsed < 30.0;
  report(2, ok,
         "20 nets max rel err " + num(worst_net) +
             ", 20 composed-loss nets max rel err " + num(worst_loss) +
             " (tol 1e-4), " + num(elapsed, 2) + " s (< 30 s)");
}

// ---------------------------------------------------------------------------
// 3. Loss oracles
// ---------------------------------------------------------------------------

TEST_CASE("acceptance criterion 3: loss values against independent oracles") {
  // --- Clipped-surrogate loss on a hand-built 3-sample batch. ---
  // Scalar plant: trunk passes x through (weight 1, bias 0, positive input),
  // mean = 0.1 + 0.5x, V = -0.05 + 0.25x, one action dimension.
  PolicyValueNet net;
  net.trunk = Mlp({1, 1}, /*relu_output=*/true);
  net.trunk.params() = {1.0, 0.0};
  net.pi = Mlp({1, 1});
  net.pi.params() = {0.5, 0.1};
  net.v = Mlp({1, 1});
  net.v.params() = {0.25, -0.05};
  net.log_std = {-0.2};

  const std::vector<double> obs = {0.6, 0.8, 1.0};
  const std::vector<double> act = {0.7, 0.1, 0.9};
  const std::vector<double> rho = {1.3, 0.5, 1.0};  // clip binds high, low, off
  const std::vector<double> adv = {2.0, -1.0, 1.5};
  const std::vector<double> tgt = {0.3, -0.2, 0.1};

  PpoHyper hp;  // clip 0.2, c1 0.5, c2 0.01
  const double kHalfLog2Pi = 0.9189385332046727;
  const double sd = std::exp(-0.2);

  std::vector<double> old_lp(3);
  double hand_pol = 0.0, hand_val = 0.0;
  int hand_clipped = 0;
  for (int i = 0; i < 3; ++i) {
    const double mean = 0.1 + 0.5 * obs[i];
    const double z = (act[i] - mean) / sd;
    const double logp = -0.5 * z * z - (-0.2) - kHalfLog2Pi;
    old_lp[i] = logp - std::log(rho[i]);
    const double r = std::exp(logp - old_lp[i]);
    const double r_cl = std::min(std::max(r, 0.8), 1.2);
    hand_pol += -std::min(r * adv[i], r_cl * adv[i]) / 3.0;
    if (std::abs(r - 1.0) > 0.2) ++hand_clipped;
    const double verr = (-0.05 + 0.25 * obs[i]) - tgt[i];
    hand_val += verr * verr / 3.0;
  }
  const double hand_ent = -0.2 + 1.4189385332046727;
  const double hand_loss = hand_pol + 0.5 * hand_val - 0.01 * hand_ent;

  const PpoStats stats = ppo_loss(net, obs, act, old_lp, adv, tgt, hp);
  const double dloss = std::abs(stats.loss - hand_loss);
  const bool ppo_ok = dloss <= 1e-10 &&
                      std::abs(stats.policy_loss - hand_pol) <= 1e-10 &&
                      std::abs(stats.value_loss - hand_val) <= 1e-10 &&
                      std::abs(stats.entropy - hand_ent) <= 1e-10 &&
                      std::abs(stats.clip_fraction - hand_clipped / 3.0) <= 1e-15;

  // --- Double estimator targets vs a brute-force argmax oracle. ---
  // 100 random transitions evaluated on random 5-output value tables; the
  // action is argmax'd on one table and valued on the other, exactly.
  Rng rng(303);
  int exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Mlp online = Mlp::he_init({5, 6, 5}, mix_seed(909, trial));
    const Mlp target = Mlp::he_init({5, 6, 5}, mix_seed(919, trial));
    Transition tr;
    tr.obs = {0.0, 0.0, 0.0, 0.0, {0.0}};
    tr.next_obs = {rng.uniform(-20.0, 190.0), rng.uniform(-600.0, 600.0),
                   rng.uniform(20.0, 100.0), rng.uniform(-50.0, 50.0),
                   {rng.uniform01()}};
    tr.reward = rng.uniform(-5.0, 0.0);
    tr.done = (trial % 4 == 0);
    const double gamma = 0.99;

    const std::vector<double> y = q_targets({&tr}, online, target, gamma);

    double want;
    if (tr.done) {
      want = tr.reward;
    } else {
      const std::vector<double> x = normalized_input(tr.next_obs);
      const std::vector<double> qo = online.forward(x);
      int best = 0;
      for (int a = 1; a < 5; ++a)
        if (qo[a] > qo[best]) best = a;
      want = tr.reward + gamma * target.forward(x)[best];
    }
    if (y.size() == 1 && y[0] == want) ++exact;
  }

  const bool ok = ppo_ok && exact == 100;
  report(3, ok,
         "3-sample clipped loss |measured-hand| " + num(dloss) +
             " (tol 1e-10, both clip branches bind), double-estimator "
             "targets exact on " +
             std::to_string(exact) + "/100 tables");
}

// ---------------------------------------------------------------------------
// 4. Reward oracle
// ---------------------------------------------------------------------------

TEST_CASE("acceptance criterion 4: per-step reward against hand arithmetic") {
  const RewardParams p;  // alpha 0.1, omega_max 0.95
  constexpr double kTol = 1e-12;

  // Tabulated cases.
  const double c1 = reward(55.0, 55.0, ActionDelta{{0.0}}, p);        // 0
  const double c2 = reward(50.0, 48.0, ActionDelta{{0.5}}, p);        // -2 - 0.05
  const double c3 = reward(30.0, 30.0, ActionDelta{{1.0}}, p);        // -0.1 - 1
  const double c4 =                                                   // -1.5 - 0.25 - 2/4
      reward(60.0, 61.5, ActionDelta{{1.0, -1.0, 0.5, 0.0}}, p);
  double table_defect = std::abs(c1 - 0.0);
  table_defect = std::max(table_defect, std::abs(c2 - -2.05));
  table_defect = std::max(table_defect, std::abs(c3 - -1.1));
  table_defect = std::max(table_defect, std::abs(c4 - -2.25));

  // Randomized sign search: never positive, and zero exactly when tracking
  // is perfect and the action is identically zero.
  Rng rng(404);
  bool sign_ok = true;
  for (int i = 0; i < 1000000 && sign_ok; ++i) {
    const std::size_t n = 1 + (i % 4);
    const double phi = rng.uniform(-20.0, 190.0);
    const double phi_hat = rng.uniform(20.0, 100.0);
    ActionDelta d;
    d.omega.resize(n);
    bool any_action = false;
    for (double& w : d.omega) {
      w = (rng.uniform01() < 0.1) ? 0.0 : rng.uniform(-1.0, 1.0);
      if (w != 0.0) any_action = true;
    }
    const double r = reward(phi, phi_hat, d, p);
    const bool nonzero_input = (phi != phi_hat) || any_action;
    if (r > 0.0 || ((r < 0.0) != nonzero_input)) sign_ok = false;
  }
  const double fixed_point = reward(42.0, 42.0, ActionDelta{{0.0, 0.0}}, p);

  const bool ok = table_defect <= kTol && sign_ok && fixed_point == 0.0;
  report(4, ok,
         "4 tabulated cases max defect " + num(table_defect) +
             " (tol 1e-12), 10^6 random draws non-positive with equality "
             "only at the zero fixed point: " +
             (sign_ok && fixed_point == 0.0 ? "yes" : "no"));
}

// ---------------------------------------------------------------------------
// 5. Distributed equivalence
// ---------------------------------------------------------------------------

namespace {

/// Deterministic per-episode policy: actions drawn from the policy seed.
class ScriptedPolicy : public EpisodePolicy {
 public:
  ScriptedPolicy(std::uint64_t seed, std::size_t n) : rng_(seed), n_(n) {}
  ActionDelta act(const Observation&) override {
    ActionDelta d;
    d.omega.resize(n_);
    for (double& w : d.omega) w = rng_.uniform(-1.0, 1.0);
    return d;
  }

 private:
  Rng rng_;
  std::size_t n_;
};

bool episodes_equal(const CollectedEpisode& a, const CollectedEpisode& b) {
  if (a.index != b.index || a.result.crashed != b.result.crashed ||
      a.result.episode_reward != b.result.episode_reward ||
      a.result.transitions.size() != b.result.transitions.size())
    return false;
  for (std::size_t k = 0; k < a.result.transitions.size(); ++k) {
    const Transition& x = a.result.transitions[k];
    const Transition& y = b.result.transitions[k];
    if (x.obs.phi != y.obs.phi || x.obs.phi_dot != y.obs.phi_dot ||
        x.obs.phi_hat_next != y.obs.phi_hat_next ||
        x.obs.phi_dot_hat_next != y.obs.phi_dot_hat_next ||
        x.obs.omega_caps != y.obs.omega_caps ||
        x.action.omega != y.action.omega || x.reward != y.reward ||
        x.next_obs.phi != y.next_obs.phi || x.done != y.done ||
        x.crashed != y.crashed)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("acceptance criterion 5: TCP collection matches in-process bit for bit") {
  Stopwatch timer;
  const PlantConfig cfg = PlantConfig::single_muscle();
  CollectSpec spec;
  spec.base_seed = 31337;
  spec.min_frames = 950;  // roughly ten 100-frame episodes
  spec.mode = RewardMode::kTrackingOnly;
  const PolicyFactory factory = [](std::uint64_t seed) {
    return std::make_unique<ScriptedPolicy>(seed, 1);
  };

  LocalEnv ref_env(cfg);
  const CollectOutput reference =
      collect_episodes({&ref_env}, cfg, spec, factory);

  // One spawned server process, same seeds: identical bytes.
  const SpawnCommand cmd{ABRL_CLI_PATH,
                         {"serve-env", "--plant", "single", "--port", "0"}};
  bool remote_equal;
  {
    WorkerPool pool(1, cfg.dt);
    pool.add_spawned(cmd);
    const CollectOutput remote = pool.collect(cfg, spec, factory);
    remote_equal = remote.episodes.size() == reference.episodes.size() &&
                   remote.frames == reference.frames && remote.lost.empty();
    for (std::size_t e = 0; remote_equal && e < remote.episodes.size(); ++e)
      remote_equal = episodes_equal(remote.episodes[e], reference.episodes[e]);
  }

  // Kill one of two workers mid-episode: exactly that episode is lost, and
  // everything delivered still matches the per-index pure content (checked
  // against a wider in-process window covering the replacement episodes).
  CollectSpec wide = spec;
  wide.min_frames = spec.min_frames + 400;
  LocalEnv wide_env(cfg);
  const CollectOutput wide_ref =
      collect_episodes({&wide_env}, cfg, wide, factory);

  std::size_t lost_count = 0;
  bool delivered_equal = true;
  {
    WorkerPool pool(1, cfg.dt);
    pool.add_spawned(cmd);
    pool.add_spawned(cmd);
    auto countdown = std::make_shared<int>(150);
    const PolicyFactory killing_factory =
        [&pool, countdown](std::uint64_t seed) -> std::unique_ptr<EpisodePolicy> {
      class Killer : public EpisodePolicy {
       public:
        Killer(std::unique_ptr<EpisodePolicy> inner, WorkerPool& pool,
               std::shared_ptr<int> countdown)
            : inner_(std::move(inner)), pool_(pool), countdown_(std::move(countdown)) {}
        ActionDelta act(const Observation& obs) override {
          if (--*countdown_ == 0) pool_.kill_worker(0);
          return inner_->act(obs);
        }

       private:
        std::unique_ptr<EpisodePolicy> inner_;
        WorkerPool& pool_;
        std::shared_ptr<int> countdown_;
      };
      return std::make_unique<Killer>(std::make_unique<ScriptedPolicy>(seed, 1),
                                      pool, countdown);
    };

    const CollectOutput out = pool.collect(cfg, spec, killing_factory);
    lost_count = out.lost.size();
    for (const CollectedEpisode& ep : out.episodes) {
      bool matched = false;
      for (const CollectedEpisode& ref : wide_ref.episodes)
        if (ref.index == ep.index) {
          matched = episodes_equal(ep, ref);
          break;
        }
      if (!matched) delivered_equal = false;
    }
  }

  const double elapsed = timer.seconds();
  const bool ok =
      remote_equal && lost_count == 1 && delivered_equal && elapsed < 60.0;
  report(5, ok,
         std::to_string(reference.episodes.size()) + " episodes / " +
             std::to_string(reference.frames) +
             " frames bit-identical over TCP: " +
             (remote_equal ? "yes" : "no") + "; mid-episode kill lost " +
             std::to_string(lost_count) +
             " episode(s), survivors index-pure: " +
             (delivered_equal ? "yes" : "no") + "; " + num(elapsed, 3) +
             " s (< 60 s)");
}

// ---------------------------------------------------------------------------
// 6. Plant sanity
// ---------------------------------------------------------------------------

TEST_CASE("acceptance criterion 6: surrogate dynamics invariants") {
  Stopwatch timer;
  const PlantConfig cfg = PlantConfig::reference();
  Rng rng(505);
  int checked = 0, failures = 0;

  // Static hold: the equal-fraction gravity-balancing activations keep a
  // resting pose still to rounding error.
  for (int i = 0; i < 2500; ++i) {
    const double phi = rng.uniform(0.0, 180.0);
    if (!is_equilibrium_reachable(phi, cfg)) continue;
    const StepResult r = step({phi, 0.0}, hold_activations(cfg, phi), cfg);
    ++checked;
    if (r.crashed || std::abs(r.state.phi - phi) > 1e-9 ||
        std::abs(r.state.phi_dot) > 1e-9)
      ++failures;
  }

  // Gravity sign: released from rest with slack muscles, the arm starts
  // moving toward the hanging pose.
  for (int i = 0; i < 2500; ++i) {
    double phi = rng.uniform(-10.0, 170.0);
    while (std::abs(std::sin(phi * kDegToRad)) < 1e-3)
      phi = rng.uniform(-10.0, 170.0);
    const StepResult r = step({phi, 0.0}, Activations(4, 0.0), cfg);
    ++checked;
    const double want = -std::sin(phi * kDegToRad);
    if (r.crashed || r.state.phi_dot * want <= 0.0) ++failures;
  }

  // Passive energy dissipation: kinetic + gravitational potential energy
  // strictly decreases across a step whenever the arm is moving.
  int energy_checked = 0;
  for (int i = 0; i < 2500; ++i) {
    const double phi = rng.uniform(-10.0, 170.0);
    double phi_dot = rng.uniform(-300.0, 300.0);
    if (std::abs(phi_dot) < 5.0) phi_dot = phi_dot < 0.0 ? -5.0 : 5.0;
    const StepResult r = step({phi, phi_dot}, Activations(4, 0.0), cfg);
    if (r.crashed) continue;  // left the tracked region; energy undefined
    ++checked;
    ++energy_checked;
    const auto energy = [&cfg](const JointState& s) {
      const double v = s.phi_dot * kDegToRad;
      return 0.5 * cfg.inertia * v * v -
             cfg.mass_arm_term * std::cos(s.phi * kDegToRad);
    };
    if (energy(r.state) >= energy({phi, phi_dot})) ++failures;
  }

  // Monotone actuation: raising an abductor's activation strictly raises
  // the next pose and velocity; raising the adductor's strictly lowers them.
  for (int i = 0; i < 2500; ++i) {
    const JointState s{rng.uniform(10.0, 120.0), rng.uniform(-50.0, 50.0)};
    Activations base(4);
    for (double& a : base) a = rng.uniform(0.0, 0.3);
    const std::size_t muscle = (i % 2 == 0) ? 0 : 3;  // ssp or ld
    Activations bumped = base;
    bumped[muscle] += 0.05;
    const StepResult lo = step(s, base, cfg);
    const StepResult hi = step(s, bumped, cfg);
    ++checked;
    if (lo.crashed || hi.crashed) {
      ++failures;
      continue;
    }
    const double dir = static_cast<double>(cfg.muscles[muscle].sign);
    if ((hi.state.phi_dot - lo.state.phi_dot) * dir <= 0.0 ||
        (hi.state.phi - lo.state.phi) * dir <= 0.0)
      ++failures;
  }

  const double elapsed = timer.seconds();
  const bool ok = failures == 0 && energy_checked > 2000 && elapsed < 10.0;
  report(6, ok,
         std::to_string(failures) + " violations over " +
             std::to_string(checked) +
             " randomized states (hold / gravity sign / dissipation / "
             "monotone actuation), " +
             num(elapsed, 2) + " s (< 10 s)");
}

// ---------------------------------------------------------------------------
// 7-10. Training criteria on the shipped configurations
// ---------------------------------------------------------------------------

namespace {

struct TrainedRun {
  int exit_code = -1;
  std::string ckpt;
  std::string out_text;
  double seconds = 0.0;
  EvalReport report;
  std::string error;
};

/// Train one shipped config into `dir` and score the checkpoint on the
/// frozen 100-trajectory test set.  Never throws; failures land in `error`.
TrainedRun train_and_score(const std::string& config_name,
                           const std::string& experiment,
                           const std::string& dir) {
  TrainedRun run;
  try {
    Stopwatch timer;
    run.exit_code = run_cli("train --config " + std::string(ABRL_CONFIG_DIR) +
                                "/" + config_name + " --out-dir " + dir,
                            dir + "_stdout.txt", dir + "_stderr.txt");
    run.seconds = timer.seconds();
    run.out_text = read_file(dir + "_stdout.txt");
    run.ckpt = dir + "/" + experiment + ".ckpt";
    if (run.exit_code != 0) {
      run.error = "train exited " + std::to_string(run.exit_code) + ": " +
                  read_file(dir + "_stderr.txt");
      return run;
    }
    run.report = evaluate_checkpoint(run.ckpt);
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

/// The four-muscle run is shared between the tracking-error criterion and
/// the bang-bang criterion; it is trained once per process, on first use.
const TrainedRun& four_muscle_run() {
  static TempDir dir;
  static TrainedRun run =
      train_and_score("train_ppo4.cfg", "ppo4", dir.file("ppo4"));
  return run;
}

std::string eval_brief(const EvalReport& rep) {
  return "MAE " + num(rep.mae_mean) + " RMSE " + num(rep.rmse_mean) + " (" +
         std::to_string(rep.crashes) + " crashed)";
}

}  // namespace

TEST_CASE("acceptance criterion 7: single-muscle training reaches the error band") {
  TempDir tmp;
  const TrainedRun ppo =
      train_and_score("train_ppo1.cfg", "ppo1", tmp.file("ppo1"));
  const TrainedRun dql =
      train_and_score("train_dql1.cfg", "dql1", tmp.file("dql1"));

  // Soft bands documented below; the assertion fails at 1.5x each bound.
  const bool ppo_ok = ppo.error.empty() && ppo.report.crashes == 0 &&
                      ppo.report.mae_mean <= 1.5 * 5.0 &&
                      ppo.report.rmse_mean <= 1.5 * 7.0;
  const bool dql_ok = dql.error.empty() && dql.report.crashes == 0 &&
                      dql.report.mae_mean <= 1.5 * 6.0;
  const bool soft = ppo.report.mae_mean <= 5.0 && ppo.report.rmse_mean <= 7.0 &&
                    dql.report.mae_mean <= 6.0;

  std::string detail = "ppo " + eval_brief(ppo.report) +
                       " vs soft 5/7 hard 7.5/10.5; dql " +
                       eval_brief(dql.report) + " vs soft MAE 6 hard 9; soft " +
                       std::string(soft ? "met" : "missed") + "; train " +
                       num(ppo.seconds, 3) + "+" + num(dql.seconds, 3) + " s";
  if (!ppo.error.empty()) detail += "; ppo error: " + ppo.error;
  if (!dql.error.empty()) detail += "; dql error: " + dql.error;
  report(7, ppo_ok && dql_ok, detail);
}

TEST_CASE("acceptance criterion 8: four-muscle training tracks and recruits initiators") {
  const TrainedRun& run = four_muscle_run();

  bool err_ok = run.error.empty() && run.report.crashes == 0 &&
                run.report.mae_mean <= 1.5 * 8.0 &&
                run.report.rmse_mean <= 1.5 * 10.0;
  const bool soft =
      run.report.mae_mean <= 8.0 && run.report.rmse_mean <= 10.0;

  // Initiation pattern: on low-start references, the ssp+isp pair works
  // harder during the first second than during the final five.
  int low_starts = 0, initiating = 0;
  std::string pattern_err;
  if (run.error.empty()) {
    try {
      const LoadedAgent agent = load_agent(run.ckpt);
      std::size_t i_ssp = 0, i_isp = 0;
      for (std::size_t m = 0; m < agent.plant.muscles.size(); ++m) {
        if (agent.plant.muscles[m].name == "ssp") i_ssp = m;
        if (agent.plant.muscles[m].name == "isp") i_isp = m;
      }
      const auto frames =
          static_cast<std::size_t>(std::llround(kTestTotalT / agent.plant.dt));
      for (std::size_t i = 0; i < kTestSetSize; ++i) {
        const Trajectory traj = test_trajectory(kTestSetSeed, i);
        if (sample(traj, 0.0).phi_hat > 40.0) continue;
        ++low_starts;
        const EpisodeResult res =
            run_episode(agent.plant, traj, frames, agent.policy(),
                        RewardParams{}, agent.mode);
        if (res.crashed || res.transitions.size() != frames) continue;
        const auto pair_mean = [&](std::size_t from, std::size_t count) {
          double sum = 0.0;
          for (std::size_t k = from; k < from + count; ++k)
            sum += res.transitions[k].obs.omega_caps[i_ssp] +
                   res.transitions[k].obs.omega_caps[i_isp];
          return sum / static_cast<double>(count);
        };
        if (pair_mean(0, 10) > pair_mean(frames - 50, 50)) ++initiating;
      }
    } catch (const std::exception& e) {
      pattern_err = e.what();
    }
  }

  const bool ok = err_ok && initiating >= 1 && pattern_err.empty();
  std::string detail = eval_brief(run.report) +
                       " vs soft 8/10 hard 12/15; soft " +
                       std::string(soft ? "met" : "missed") +
                       "; ssp+isp onset > steady on " +
                       std::to_string(initiating) + "/" +
                       std::to_string(low_starts) +
                       " low-start references; train " + num(run.seconds, 3) +
                       " s";
  if (!run.error.empty()) detail += "; error: " + run.error;
  if (!pattern_err.empty()) detail += "; trace error: " + pattern_err;
  report(8, ok, detail);
}

TEST_CASE("acceptance criterion 9: training survives injected crashes") {
  TempDir tmp;
  const TrainedRun run =
      train_and_score("train_ppo1_crash.cfg", "ppo1_crash", tmp.file("crash"));

  // Injected crashes shorten episodes, so the finished run must report
  // fewer frames than 100x its episode count — evidence the penalty spikes
  // actually happened — while the tracking quality stays within 1.25x of
  // the single-muscle bands.
  const std::uint64_t frames = stdout_field(run.out_text, "frames");
  const std::uint64_t episodes = stdout_field(run.out_text, "episodes");
  const bool crashes_happened = episodes > 0 && frames < 100 * episodes;
  const bool ok = run.error.empty() && run.report.crashes == 0 &&
                  crashes_happened && run.report.mae_mean <= 1.25 * 5.0 &&
                  run.report.rmse_mean <= 1.25 * 7.0;

  std::string detail =
      eval_brief(run.report) + " vs bounds 6.25/8.75 (1.25x); " +
      std::to_string(frames) + " frames over " + std::to_string(episodes) +
      " episodes (" +
      std::string(crashes_happened ? "crashes shortened episodes"
                                   : "no crash evidence") +
      "); train " + num(run.seconds, 3) + " s";
  if (!run.error.empty()) detail += "; error: " + run.error;
  report(9, ok, detail);
}

TEST_CASE("acceptance criterion 10: converged four-muscle policy avoids bang-bang") {
  const TrainedRun& run = four_muscle_run();
  const double fraction = run.report.bang_fraction();
  const bool ok = run.error.empty() && fraction < 0.25;
  std::string detail = "saturated action components " +
                       num(100.0 * fraction) + "% of " +
                       std::to_string(run.report.action_components) +
                       " executed (< 25%)";
  if (!run.error.empty()) detail += "; error: " + run.error;
  report(10, ok, detail);
}
