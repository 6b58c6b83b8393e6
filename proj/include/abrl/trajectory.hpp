#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "abrl/rng.hpp"
#include "abrl/text.hpp"

namespace abrl {

/// One rest-to-rest quintic segment: position in degrees as a polynomial
/// sum a_k t^k of local time, with zero velocity and acceleration at both
/// ends by construction.
struct QuinticSection {
  std::array<double, 6> coeffs{};  // a0..a5, degrees / s^k
  double duration = 0.0;           // seconds

  double position(double t) const {
    // Horner evaluation of a0 + a1 t + ... + a5 t^5.
    double p = coeffs[5];
    for (int k = 4; k >= 0; --k) p = p * t + coeffs[k];
    return p;
  }
  double velocity(double t) const {
    double v = 5.0 * coeffs[5];
    for (int k = 4; k >= 1; --k) v = v * t + k * coeffs[k];
    return v;
  }
  double acceleration(double t) const {
    double a = 20.0 * coeffs[5];
    for (int k = 4; k >= 2; --k) a = a * t + k * (k - 1) * coeffs[k];
    return a;
  }
};

/// Desired target sample: position (degrees) and velocity (degrees/s).
struct TrajSample {
  double phi_hat = 0.0;
  double phi_dot_hat = 0.0;
};

/// C2-continuous stack of quintic sections.  Immutable once built.
struct Trajectory {
  std::vector<QuinticSection> sections;

  double total_duration() const {
    double total = 0.0;
    for (const auto& s : sections) total += s.duration;
    return total;
  }
};

/// Closed-form rest-to-rest quintic through (0,p0) -> (T,p1) with zero
/// endpoint velocity and acceleration:
///   a0=p0, a1=a2=0, a3=10d/T^3, a4=-15d/T^4, a5=6d/T^5, d=p1-p0.
inline QuinticSection fit_section(double p0, double p1, double T) {
  if (!(T > 0.0)) throw std::invalid_argument("fit_section: duration must be > 0");
  const double d = p1 - p0;
  const double T3 = T * T * T;
  QuinticSection s;
  s.duration = T;
  s.coeffs = {p0, 0.0, 0.0, 10.0 * d / T3, -15.0 * d / (T3 * T),
              6.0 * d / (T3 * T * T)};
  return s;
}

/// Position and analytic velocity at absolute time t in [0, total].
/// Exactly at a joint the left section is evaluated; the C2 construction
/// makes left/right agree to 1e-9.
inline TrajSample sample(const Trajectory& traj, double t) {
  if (traj.sections.empty())
    throw std::invalid_argument("sample: empty trajectory");
  if (t < 0.0 || t > traj.total_duration() + 1e-9)
    throw std::out_of_range("sample: time outside trajectory");
  double local = t;
  for (std::size_t i = 0; i < traj.sections.size(); ++i) {
    const auto& s = traj.sections[i];
    const bool last = (i + 1 == traj.sections.size());
    if (local <= s.duration || last) {
      const double tt = std::min(local, s.duration);
      return {s.position(tt), s.velocity(tt)};
    }
    local -= s.duration;
  }
  const auto& s = traj.sections.back();  // unreachable
  return {s.position(s.duration), s.velocity(s.duration)};
}

/// sample() with t clamped into [0, total]; used by steppers whose last
/// look-ahead lands a rounding error past the end.
inline TrajSample sample_clamped(const Trajectory& traj, double t) {
  const double total = traj.total_duration();
  return sample(traj, std::min(std::max(t, 0.0), total));
}

/// Random stacked trajectory: endpoints drawn uniformly from [lo, hi]
/// (first the starting position, then one endpoint per section, in that
/// order), deterministic for a given seed.  total_T must be a positive
/// multiple of section_T.
inline Trajectory random_trajectory(std::uint64_t seed, double total_T,
                                    double section_T, double lo, double hi) {
  if (!(section_T > 0.0) || !(total_T > 0.0))
    throw std::invalid_argument("random_trajectory: durations must be > 0");
  const double ratio = total_T / section_T;
  const auto n = static_cast<std::size_t>(std::llround(ratio));
  if (n == 0 || std::abs(ratio - static_cast<double>(n)) > 1e-9)
    throw std::invalid_argument(
        "random_trajectory: total_T must be a positive multiple of section_T");
  if (!(lo < hi))
    throw std::invalid_argument("random_trajectory: bad endpoint range");

  Rng rng(seed);
  Trajectory traj;
  traj.sections.reserve(n);
  double p = rng.uniform(lo, hi);
  for (std::size_t i = 0; i < n; ++i) {
    const double q = rng.uniform(lo, hi);
    traj.sections.push_back(fit_section(p, q, section_T));
    p = q;
  }
  return traj;
}

/// CSV dump at fixed resolution: t, phi_hat, phi_dot_hat.
inline void write_trajectory_csv(const Trajectory& traj, std::ostream& out,
                                 double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("write_trajectory_csv: dt must be > 0");
  out << "t,phi_hat,phi_dot_hat\n";
  const double total = traj.total_duration();
  const auto frames = static_cast<std::size_t>(std::llround(total / dt));
  for (std::size_t k = 0; k <= frames; ++k) {
    const double t = static_cast<double>(k) * dt;
    const TrajSample s = sample_clamped(traj, t);
    out << format_double(t) << ',' << format_double(s.phi_hat) << ','
        << format_double(s.phi_dot_hat) << '\n';
  }
}

}  // namespace abrl
