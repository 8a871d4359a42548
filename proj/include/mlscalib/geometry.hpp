#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

namespace mlscalib {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * (kPi / 180.0); }
inline double rad2deg(double rad) { return rad * (180.0 / kPi); }

/// Chord displacement of a point at `range` meters under a rotation by
/// `angle_deg` degrees: 2 * range * sin(angle/2).
inline double chord_displacement(double angle_deg, double range) {
  return 2.0 * range * std::sin(0.5 * deg2rad(std::abs(angle_deg)));
}

/// Euler angle triple in degrees, intrinsic Z-Y-X (yaw, pitch, roll).
struct EulerDeg {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;

  friend bool operator==(const EulerDeg&, const EulerDeg&) = default;
  friend auto operator<=>(const EulerDeg&, const EulerDeg&) = default;
};

/// A proper rotation in 3-space. Internally a unit quaternion; constructible
/// from intrinsic Z-Y-X Euler angles (degrees) and from quaternions.
///
/// Convention note: trajectory orientations are body-to-world. The INS
/// convention is not universal; this library fixes body-to-world throughout.
class Rotation3 {
 public:
  Rotation3() : q_(Quat::Identity()) {}

  explicit Rotation3(const Quat& q) : q_(q.normalized()) {}

  static Rotation3 identity() { return Rotation3(); }

  /// Intrinsic Z-Y-X: yaw about z, then pitch about the rotated y, then roll
  /// about the twice-rotated x. Equivalent to Rz(yaw)*Ry(pitch)*Rx(roll).
  static Rotation3 from_euler(const EulerDeg& e) {
    if (!std::isfinite(e.yaw) || !std::isfinite(e.pitch) || !std::isfinite(e.roll))
      throw std::invalid_argument("Rotation3::from_euler: non-finite angle");
    const Quat q = Eigen::AngleAxisd(deg2rad(e.yaw), Vec3::UnitZ()) *
                   Eigen::AngleAxisd(deg2rad(e.pitch), Vec3::UnitY()) *
                   Eigen::AngleAxisd(deg2rad(e.roll), Vec3::UnitX());
    return Rotation3(q);
  }

  static Rotation3 from_euler(double yaw_deg, double pitch_deg, double roll_deg) {
    return from_euler(EulerDeg{yaw_deg, pitch_deg, roll_deg});
  }

  static Rotation3 from_quaternion(double w, double x, double y, double z) {
    if (!std::isfinite(w) || !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
      throw std::invalid_argument("Rotation3::from_quaternion: non-finite component");
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    if (n < 1e-12)
      throw std::invalid_argument("Rotation3::from_quaternion: near-zero norm");
    return Rotation3(Quat(w, x, y, z));
  }

  /// Z-Y-X extraction; pitch in [-90, 90]. Round-trips from_euler to 1e-9 deg
  /// away from the |pitch| = 90 singularity.
  EulerDeg to_euler() const {
    const Mat3 m = matrix();
    const double sp = std::clamp(-m(2, 0), -1.0, 1.0);
    const double pitch = std::asin(sp);
    double yaw, roll;
    if (std::abs(sp) < 1.0 - 1e-12) {
      yaw = std::atan2(m(1, 0), m(0, 0));
      roll = std::atan2(m(2, 1), m(2, 2));
    } else {
      // gimbal lock: fold roll into yaw
      yaw = std::atan2(-m(0, 1), m(1, 1));
      roll = 0.0;
    }
    return EulerDeg{rad2deg(yaw), rad2deg(pitch), rad2deg(roll)};
  }

  const Quat& quaternion() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }

  Vec3 apply(const Vec3& v) const { return q_ * v; }
  Rotation3 inverse() const { return Rotation3(q_.conjugate()); }

  /// compose(outer, inner): applies inner first, then outer.
  friend Rotation3 compose(const Rotation3& outer, const Rotation3& inner) {
    return Rotation3(outer.q_ * inner.q_);
  }

  Rotation3 operator*(const Rotation3& rhs) const { return compose(*this, rhs); }

  /// Relative rotation angle in degrees (geodesic distance on SO(3)).
  double angular_distance_deg(const Rotation3& other) const {
    return rad2deg(q_.angularDistance(other.q_));
  }

  /// Shortest-arc spherical linear interpolation, u in [0, 1].
  static Rotation3 slerp(const Rotation3& a, const Rotation3& b, double u) {
    return Rotation3(a.q_.slerp(u, b.q_));
  }

 private:
  Quat q_;
};

inline Vec3 apply(const Rotation3& r, const Vec3& v) { return r.apply(v); }
inline Rotation3 inverse(const Rotation3& r) { return r.inverse(); }
inline Rotation3 rotation_from_euler(double yaw_deg, double pitch_deg, double roll_deg) {
  return Rotation3::from_euler(yaw_deg, pitch_deg, roll_deg);
}

/// One INS sample: timestamp, world position, body-to-world orientation.
struct TrajectorySample {
  double t = 0.0;
  Vec3 position = Vec3::Zero();
  Rotation3 orientation;
};

/// Timestamped INS pose stream. Timestamps strictly increasing, >= 2 samples.
class Trajectory {
 public:
  Trajectory() = default;

  explicit Trajectory(std::vector<TrajectorySample> samples) : samples_(std::move(samples)) {
    if (samples_.size() < 2)
      throw std::invalid_argument("Trajectory: needs at least 2 samples");
    for (size_t i = 0; i < samples_.size(); ++i) {
      if (!std::isfinite(samples_[i].t))
        throw std::invalid_argument("Trajectory: non-finite timestamp");
      if (i > 0 && !(samples_[i].t > samples_[i - 1].t))
        throw std::invalid_argument("Trajectory: timestamps not strictly increasing at index " +
                                    std::to_string(i));
    }
  }

  const std::vector<TrajectorySample>& samples() const { return samples_; }
  size_t size() const { return samples_.size(); }
  double t_first() const { return samples_.front().t; }
  double t_last() const { return samples_.back().t; }

  bool covers(double t) const { return t >= t_first() && t <= t_last(); }

  /// Largest gap between consecutive samples overlapping the open (t0, t1).
  double max_gap_within(double t0, double t1) const {
    double g = 0.0;
    for (size_t i = 1; i < samples_.size(); ++i) {
      const double a = samples_[i - 1].t, b = samples_[i].t;
      if (b <= t0 || a >= t1) continue;
      g = std::max(g, b - a);
    }
    return g;
  }

  /// Index of the last sample with t <= query (requires covers(t)).
  size_t lower_index(double t) const {
    auto it = std::upper_bound(samples_.begin(), samples_.end(), t,
                               [](double v, const TrajectorySample& s) { return v < s.t; });
    size_t i = static_cast<size_t>(it - samples_.begin());
    return i == 0 ? 0 : i - 1;
  }

 private:
  std::vector<TrajectorySample> samples_;
};

/// Pose at time t: position by linear interpolation, orientation by
/// shortest-arc slerp between the bracketing samples. No extrapolation.
inline TrajectorySample interpolate_pose(const Trajectory& traj, double t) {
  if (!std::isfinite(t) || !traj.covers(t))
    throw std::out_of_range("interpolate_pose: t=" + std::to_string(t) + " outside span [" +
                            std::to_string(traj.t_first()) + ", " +
                            std::to_string(traj.t_last()) + "]");
  const auto& s = traj.samples();
  const size_t i = traj.lower_index(t);
  const TrajectorySample& a = s[i];
  if (t == a.t) return a;
  const TrajectorySample& b = s[i + 1];
  if (t == b.t) return b;
  const double u = (t - a.t) / (b.t - a.t);
  TrajectorySample out;
  out.t = t;
  out.position = a.position + u * (b.position - a.position);
  out.orientation = Rotation3::slerp(a.orientation, b.orientation, u);
  return out;
}

}  // namespace mlscalib
