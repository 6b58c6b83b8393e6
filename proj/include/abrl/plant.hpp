#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "abrl/config.hpp"

namespace abrl {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

/// One actuator of the surrogate shoulder: produces torque
///   sign * torque_scale * (arm_c0 + arm_c1 * cos(phi)) * omega
/// about the abduction axis.  The cosine term is a normalized moment arm,
/// so ssp/isp-style muscles (arm_c1 > 0) are strongest near the hanging
/// pose and dmi/ld-style muscles (arm_c1 < 0) strongest overhead.
struct MuscleParams {
  std::string name;           // ssp | isp | dmi | ld
  double torque_scale = 0.0;  // N*m at full activation and unit moment arm
  double arm_c0 = 0.0;
  double arm_c1 = 0.0;
  int sign = +1;  // +1 abductor, -1 adductor

  double moment_arm(double phi_rad) const {
    return arm_c0 + arm_c1 * std::cos(phi_rad);
  }
  /// Signed torque per unit activation at the given pose.
  double torque_capacity(double phi_rad) const {
    return sign * torque_scale * moment_arm(phi_rad);
  }
};

/// Humerus abduction angle (degrees from arm-hanging-down vertical) and
/// angular velocity (degrees/second).  Degrees at every module boundary;
/// the dynamics convert to radians internally.
struct JointState {
  double phi = 0.0;
  double phi_dot = 0.0;
};

/// Per-muscle activation levels, each in [0, 1].
using Activations = std::vector<double>;

/// Rigid single-axis surrogate of the shoulder-abduction plant.
struct PlantConfig {
  std::vector<MuscleParams> muscles;
  double inertia = 0.6;         // kg*m^2
  double mass_arm_term = 8.0;   // m*g*r, N*m (gravity torque at 90 deg)
  double damping = 3.0;         // N*m*s/rad
  double dt = 0.1;              // s
  double crash_angle_low = -20.0;   // deg
  double crash_angle_high = 190.0;  // deg
  double crash_speed_bound = 600.0; // deg/s

  std::size_t n_muscles() const { return muscles.size(); }

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("plant: dt must be > 0");
    if (!(inertia > 0.0))
      throw std::invalid_argument("plant: inertia must be > 0");
    if (!(damping >= 0.0))
      throw std::invalid_argument("plant: damping must be >= 0");
    if (!(crash_angle_low < crash_angle_high))
      throw std::invalid_argument("plant: crash angle bounds out of order");
    if (!(crash_speed_bound > 0.0))
      throw std::invalid_argument("plant: crash speed bound must be > 0");
    if (muscles.empty())
      throw std::invalid_argument("plant: needs at least one muscle");
    for (const auto& m : muscles) {
      if (!(m.torque_scale > 0.0))
        throw std::invalid_argument("plant: muscle '" + m.name +
                                    "': torque_scale must be > 0");
      if (m.sign != 1 && m.sign != -1)
        throw std::invalid_argument("plant: muscle '" + m.name +
                                    "': sign must be +1 or -1");
      // |c0 + c1*cos(phi)| over phi in [0, 180] peaks at an endpoint
      // because cos is monotone there.
      const double peak =
          std::max(std::abs(m.arm_c0 + m.arm_c1), std::abs(m.arm_c0 - m.arm_c1));
      if (peak > 2.0)
        throw std::invalid_argument("plant: muscle '" + m.name +
                                    "': |moment arm| exceeds 2");
    }
  }

  /// Four-muscle plant used throughout: ssp/isp dominate low angles,
  /// dmi takes over overhead, ld adducts.
  static PlantConfig reference() {
    PlantConfig cfg;
    cfg.muscles = {
        {"ssp", 20.0, 1.0, 0.6, +1},
        {"isp", 14.0, 0.8, 0.5, +1},
        {"dmi", 35.0, 0.6, -0.4, +1},
        {"ld", 25.0, 0.7, -0.2, -1},
    };
    return cfg;
  }

  /// Single-actuator variant (supraspinatus only, rescaled so it can hold
  /// the whole evaluation range on its own).
  static PlantConfig single_muscle() {
    PlantConfig cfg;
    cfg.muscles = {{"ssp", 40.0, 1.0, 0.6, +1}};
    return cfg;
  }

  static PlantConfig from_kv(const KeyValueFile& kv) {
    PlantConfig cfg;
    cfg.inertia = kv.get_double("inertia");
    cfg.mass_arm_term = kv.get_double("mass_arm_term");
    cfg.damping = kv.get_double("damping");
    cfg.dt = kv.get_double("dt");
    const auto bounds = kv.get_doubles("crash_angle_bounds");
    if (bounds.size() != 2)
      throw ConfigError("crash_angle_bounds: expected 'low, high'");
    cfg.crash_angle_low = bounds[0];
    cfg.crash_angle_high = bounds[1];
    cfg.crash_speed_bound = kv.get_double("crash_speed_bound");
    cfg.muscles.clear();
    for (const auto& name : kv.get_strings("muscles")) {
      const auto p = kv.get_doubles("muscles." + name);
      if (p.size() != 4)
        throw ConfigError("muscles." + name +
                          ": expected 'torque_scale, arm_c0, arm_c1, sign'");
      MuscleParams m;
      m.name = name;
      m.torque_scale = p[0];
      m.arm_c0 = p[1];
      m.arm_c1 = p[2];
      if (p[3] != 1.0 && p[3] != -1.0)
        throw ConfigError("muscles." + name + ": sign must be 1 or -1");
      m.sign = static_cast<int>(p[3]);
      cfg.muscles.push_back(m);
    }
    cfg.validate();
    return cfg;
  }

  static PlantConfig from_file(const std::string& path) {
    return from_kv(KeyValueFile::parse_file(path));
  }

  std::string to_kv_text() const {
    KeyValueFile kv;
    auto num = [](double v) {
      std::ostringstream ss;
      ss.precision(17);
      ss << v;
      return ss.str();
    };
    kv.set("inertia", num(inertia));
    kv.set("mass_arm_term", num(mass_arm_term));
    kv.set("damping", num(damping));
    kv.set("dt", num(dt));
    kv.set("crash_angle_bounds", num(crash_angle_low) + ", " + num(crash_angle_high));
    kv.set("crash_speed_bound", num(crash_speed_bound));
    std::string names;
    for (const auto& m : muscles) names += (names.empty() ? "" : ", ") + m.name;
    kv.set("muscles", names);
    for (const auto& m : muscles)
      kv.set("muscles." + m.name, num(m.torque_scale) + ", " + num(m.arm_c0) +
                                      ", " + num(m.arm_c1) + ", " +
                                      std::to_string(m.sign));
    return kv.dump();
  }
};

/// Result of one integration step.  `state` is meaningful only when
/// `crashed` is false; a crash ends the episode and carries no pose.
struct StepResult {
  bool crashed = false;
  JointState state{};
};

/// One semi-implicit Euler step of the surrogate dynamics:
///   tau    = sum_i sign_i*scale_i*(c0_i + c1_i*cos(phi))*omega_i
///            - mass_arm_term*sin(phi) - damping*phi_dot        [radians]
///   phi_dot += dt*tau/inertia;  phi += dt*phi_dot
/// Crashes when the new state leaves the angle/speed bounds or goes
/// non-finite.
inline StepResult step(const JointState& state, const Activations& acts,
                       const PlantConfig& cfg) {
  if (acts.size() != cfg.muscles.size())
    throw std::invalid_argument("plant: activation count does not match muscle count");
  for (double w : acts)
    if (!(w >= 0.0 && w <= 1.0))
      throw std::invalid_argument("plant: activation outside [0, 1]");

  const double pr = state.phi * kDegToRad;
  const double vr = state.phi_dot * kDegToRad;

  double tau = -cfg.mass_arm_term * std::sin(pr) - cfg.damping * vr;
  for (std::size_t i = 0; i < cfg.muscles.size(); ++i)
    tau += cfg.muscles[i].torque_capacity(pr) * acts[i];

  const double vr_next = vr + cfg.dt * tau / cfg.inertia;
  const double pr_next = pr + cfg.dt * vr_next;

  const double phi = pr_next * kRadToDeg;
  const double phi_dot = vr_next * kRadToDeg;

  if (!std::isfinite(phi) || !std::isfinite(phi_dot)) return {true, {}};
  if (phi < cfg.crash_angle_low || phi > cfg.crash_angle_high ||
      std::abs(phi_dot) > cfg.crash_speed_bound)
    return {true, {phi, phi_dot}};
  return {false, {phi, phi_dot}};
}

/// True iff some activation vector in [0,1]^n produces zero net torque at
/// (target_phi, 0).  The achievable muscle torque at a fixed pose is an
/// interval, so this is a two-sided bound check against gravity.
inline bool is_equilibrium_reachable(double target_phi, const PlantConfig& cfg) {
  const double pr = target_phi * kDegToRad;
  const double need = cfg.mass_arm_term * std::sin(pr);
  double lo = 0.0, hi = 0.0;
  for (const auto& m : cfg.muscles) {
    const double v = m.torque_capacity(pr);
    if (v > 0.0)
      hi += v;
    else
      lo += v;
  }
  return lo <= need && need <= hi;
}

/// Equal-fraction static hold: every muscle with positive torque capacity
/// at the pose gets the same activation lambda chosen so the pose is a
/// gravity equilibrium (clamped to [0,1] when out of reach).  Used to
/// start episodes at rest on the reference instead of sagging from zero.
inline Activations hold_activations(const PlantConfig& cfg, double phi) {
  const double pr = phi * kDegToRad;
  const double need = cfg.mass_arm_term * std::sin(pr);
  double positive = 0.0;
  std::vector<double> caps(cfg.muscles.size());
  for (std::size_t i = 0; i < cfg.muscles.size(); ++i) {
    caps[i] = cfg.muscles[i].torque_capacity(pr);
    if (caps[i] > 0.0) positive += caps[i];
  }
  double lambda = 0.0;
  if (positive > 0.0) lambda = std::min(1.0, std::max(0.0, need / positive));
  Activations acts(cfg.muscles.size(), 0.0);
  for (std::size_t i = 0; i < caps.size(); ++i)
    if (caps[i] > 0.0) acts[i] = lambda;
  return acts;
}

}  // namespace abrl
