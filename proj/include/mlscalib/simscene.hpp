#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlscalib/georef.hpp"

namespace mlscalib {

/// Rotating multi-beam scanner parameterization. All beams of one azimuth
/// step fire simultaneously; steps are uniformly spaced in time.
struct ScannerModel {
  struct Beam {
    double elevation_deg = 0.0;
    double azimuth_offset_deg = 0.0;
  };

  std::vector<Beam> beams;
  double rotation_rate_hz = 10.0;
  double azimuth_step_deg = 0.18;
  double max_range = 120.0;
  double range_noise_sigma = 0.0;  // Gaussian, meters, seedable

  std::size_t steps_per_revolution() const {
    return static_cast<std::size_t>(std::llround(360.0 / azimuth_step_deg));
  }
  double firing_interval() const {
    return 1.0 / (rotation_rate_hz * static_cast<double>(steps_per_revolution()));
  }

  void validate() const {
    if (beams.empty()) throw std::invalid_argument("ScannerModel: no beams");
    if (!(rotation_rate_hz > 0.0)) throw std::invalid_argument("ScannerModel: rotation rate <= 0");
    if (!(azimuth_step_deg > 0.0)) throw std::invalid_argument("ScannerModel: azimuth step <= 0");
    if (!(max_range > 0.0)) throw std::invalid_argument("ScannerModel: max range <= 0");
    if (range_noise_sigma < 0.0) throw std::invalid_argument("ScannerModel: negative noise sigma");
    for (const Beam& b : beams)
      if (b.elevation_deg < -90.0 || b.elevation_deg > 90.0)
        throw std::invalid_argument("ScannerModel: beam elevation outside [-90, 90]");
  }
};

/// Sensor-frame unit direction for (azimuth, elevation), azimuth from +x
/// toward +y about +z.
inline Vec3 beam_direction(double azimuth_deg, double elevation_deg) {
  const double az = deg2rad(azimuth_deg), el = deg2rad(elevation_deg);
  const double c = std::cos(el);
  return Vec3(c * std::cos(az), c * std::sin(az), std::sin(el));
}

/// 64 beams spanning +2.0 deg up to 24.8 deg down (26.8 deg vertical field of
/// view), 10 Hz rotation, 0.18 deg azimuth step, 120 m range, noiseless.
inline ScannerModel default_scanner() {
  ScannerModel s;
  s.beams.resize(64);
  for (int i = 0; i < 64; ++i)
    s.beams[i].elevation_deg = 2.0 + (-24.8 - 2.0) * (static_cast<double>(i) / 63.0);
  return s;
}

/// Finite rectangular planar patch: corner plus two edge vectors.
struct Patch {
  int id = 0;
  Vec3 corner = Vec3::Zero();
  Vec3 edge_u = Vec3::UnitX();
  Vec3 edge_v = Vec3::UnitY();

  Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
};

struct SceneModel {
  std::vector<Patch> patches;

  void validate() const {
    std::vector<int> ids;
    for (const Patch& p : patches) {
      const double area2 = p.edge_u.cross(p.edge_v).norm();
      if (area2 <= 1e-12 * p.edge_u.norm() * p.edge_v.norm())
        throw std::invalid_argument("SceneModel: degenerate patch " + std::to_string(p.id));
      ids.push_back(p.id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw std::invalid_argument("SceneModel: duplicate patch id");
  }
};

/// First intersection of ray origin + s*dir with a patch, s in (0, max_s].
inline std::optional<double> intersect_patch(const Vec3& origin, const Vec3& dir,
                                             const Patch& patch, double max_s) {
  const Vec3 n = patch.edge_u.cross(patch.edge_v);
  const double denom = dir.dot(n);
  if (std::abs(denom) < 1e-14 * n.norm()) return std::nullopt;
  const double s = (patch.corner - origin).dot(n) / denom;
  if (s <= 0.0 || s > max_s) return std::nullopt;
  const Vec3 q = origin + s * dir - patch.corner;
  const double guu = patch.edge_u.squaredNorm(), gvv = patch.edge_v.squaredNorm();
  const double guv = patch.edge_u.dot(patch.edge_v);
  const double qu = q.dot(patch.edge_u), qv = q.dot(patch.edge_v);
  const double det = guu * gvv - guv * guv;
  const double a = (qu * gvv - qv * guv) / det;
  const double b = (qv * guu - qu * guv) / det;
  if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0) return std::nullopt;
  return s;
}

inline std::optional<double> intersect_scene(const SceneModel& scene, const Vec3& origin,
                                             const Vec3& dir, double max_s) {
  std::optional<double> best;
  for (const Patch& p : scene.patches) {
    const auto s = intersect_patch(origin, dir, p, max_s);
    if (s && (!best || *s < *best)) best = s;
  }
  return best;
}

/// Scripted vehicle path: waypoints (t, position, yaw) interpolated with a
/// Catmull-Rom spline; pitch and roll are zero for built-ins.
struct ManeuverScript {
  struct Waypoint {
    double t = 0.0;
    Vec3 position = Vec3::Zero();
    double yaw_deg = 0.0;
  };

  std::vector<Waypoint> waypoints;

  double duration() const { return waypoints.empty() ? 0.0 : waypoints.back().t; }

  void validate(bool built_in = false) const {
    if (waypoints.size() < 2) throw std::invalid_argument("ManeuverScript: needs >= 2 waypoints");
    for (std::size_t i = 1; i < waypoints.size(); ++i) {
      if (!(waypoints[i].t > waypoints[i - 1].t))
        throw std::invalid_argument("ManeuverScript: waypoint times not increasing");
      const double dt = waypoints[i].t - waypoints[i - 1].t;
      const double speed = (waypoints[i].position - waypoints[i - 1].position).norm() / dt;
      if (speed > 15.0 + 1e-9)
        throw std::invalid_argument("ManeuverScript: speed exceeds 15 m/s");
    }
    if (built_in && duration() > 60.0 + 1e-9)
      throw std::invalid_argument("ManeuverScript: built-in duration exceeds 60 s");
  }

  /// Samples the spline into an INS-like pose stream. The window is padded so
  /// consumers can interpolate at every firing time.
  Trajectory sample_trajectory(double rate_hz = 200.0, double pad = 0.05) const {
    validate();
    std::vector<double> yaw_unwrapped(waypoints.size());
    yaw_unwrapped[0] = waypoints[0].yaw_deg;
    for (std::size_t i = 1; i < waypoints.size(); ++i) {
      double d = waypoints[i].yaw_deg - waypoints[i - 1].yaw_deg;
      while (d > 180.0) d -= 360.0;
      while (d < -180.0) d += 360.0;
      yaw_unwrapped[i] = yaw_unwrapped[i - 1] + d;
    }
    const double t0 = waypoints.front().t - pad;
    const double t1 = waypoints.back().t + pad;
    const std::size_t count = static_cast<std::size_t>(std::ceil((t1 - t0) * rate_hz)) + 1;
    std::vector<TrajectorySample> samples;
    samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const double t = t0 + static_cast<double>(i) / rate_hz;
      TrajectorySample s;
      s.t = t;
      double yaw;
      eval(t, yaw_unwrapped, s.position, yaw);
      s.orientation = Rotation3::from_euler(yaw, 0.0, 0.0);
      samples.push_back(s);
    }
    return Trajectory(std::move(samples));
  }

 private:
  void eval(double t, const std::vector<double>& yaws, Vec3& pos, double& yaw) const {
    const std::size_t m = waypoints.size();
    if (t <= waypoints.front().t) {
      pos = waypoints.front().position;
      yaw = yaws.front();
      return;
    }
    if (t >= waypoints.back().t) {
      pos = waypoints.back().position;
      yaw = yaws.back();
      return;
    }
    std::size_t i = 1;
    while (i < m - 1 && waypoints[i].t < t) ++i;
    // segment [i-1, i]
    const auto at = [&](std::size_t j) { return std::min(j, m - 1); };
    const std::size_t i0 = i >= 2 ? i - 2 : 0, i1 = i - 1, i2 = i, i3 = at(i + 1);
    const double u = (t - waypoints[i1].t) / (waypoints[i2].t - waypoints[i1].t);
    auto cr = [u](double p0, double p1, double p2, double p3) {
      return 0.5 * ((2.0 * p1) + (-p0 + p2) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u +
                    (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u);
    };
    for (int a = 0; a < 3; ++a)
      pos[a] = cr(waypoints[i0].position[a], waypoints[i1].position[a], waypoints[i2].position[a],
                  waypoints[i3].position[a]);
    yaw = cr(yaws[i0], yaws[i1], yaws[i2], yaws[i3]);
  }
};

inline ManeuverScript straight_line_script(double speed = 9.0, double duration = 20.0) {
  ManeuverScript s;
  for (double t = 0.0; t <= duration + 1e-9; t += 1.0)
    s.waypoints.push_back({t, Vec3(speed * t, 0.0, 0.0), 0.0});
  s.validate(true);
  return s;
}

/// Curvy calibration drive: forward at `speed` with a sinusoidal lateral
/// weave, heading following the path tangent.
inline ManeuverScript zigzag_script(double speed = 8.5, double amplitude = 2.5,
                                    double period = 8.0, double duration = 20.0) {
  ManeuverScript s;
  const double w = 2.0 * kPi / period;
  for (double t = 0.0; t <= duration + 1e-9; t += 0.5) {
    const Vec3 p(speed * t, amplitude * std::sin(w * t), 0.0);
    const double yaw = rad2deg(std::atan2(amplitude * w * std::cos(w * t), speed));
    s.waypoints.push_back({t, p, yaw});
  }
  s.validate(true);
  return s;
}

/// Rectangular loop around a block, rounded at the corners by the spline.
inline ManeuverScript closed_loop_script(double side = 80.0, double speed = 8.0) {
  ManeuverScript s;
  const Vec3 corners[4] = {Vec3(0, 0, 0), Vec3(side, 0, 0), Vec3(side, side, 0), Vec3(0, side, 0)};
  const double yaws[4] = {0.0, 90.0, 180.0, 270.0};
  const double leg = side / speed;
  for (int k = 0; k <= 4; ++k) {
    const int c = k % 4;
    s.waypoints.push_back({leg * k, corners[c], yaws[c] + (k == 4 ? 360.0 : 0.0)});
  }
  s.validate(true);
  return s;
}

/// Everything a calibration consumer gets plus the withheld truth.
struct GroundTruth {
  EulerDeg injected;    // error baked into the emitted directions
  EulerDeg to_recover;  // Euler angles of the inverse: the calibration target
  MountConfig true_mount;
  std::uint64_t seed = 0;
  double sigma = 0.0;
  double duration = 0.0;
};

struct SimBundle {
  std::vector<RawReturn> returns;
  Trajectory trajectory;
  GroundTruth truth;
};

/// Generates a raw return stream from a scene, scanner, and script.
///
/// Poses come from the emitted 200 Hz trajectory via the same interpolation a
/// consumer will use, so a consumer with the true correction reproduces the
/// exact surface hits. The injected boresight error is baked into the emitted
/// directions: a consumer assuming the nominal boresight must apply the
/// inverse of `injected_error` as its correction to sharpen the cloud.
inline SimBundle simulate(const SceneModel& scene, const ScannerModel& scanner,
                          const ManeuverScript& script, const MountConfig& true_mount,
                          const EulerDeg& injected_error, std::uint64_t seed,
                          double duration = -1.0) {
  scene.validate();
  scanner.validate();
  true_mount.validate();
  if (duration < 0.0) duration = script.duration();

  SimBundle bundle;
  bundle.trajectory = script.sample_trajectory();
  const Rotation3 r_err = Rotation3::from_euler(injected_error);
  bundle.truth.injected = injected_error;
  bundle.truth.to_recover = r_err.inverse().to_euler();
  bundle.truth.true_mount = true_mount;
  bundle.truth.seed = seed;
  bundle.truth.sigma = scanner.range_noise_sigma;
  bundle.truth.duration = duration;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double sigma = scanner.range_noise_sigma;

  const Mat3 r_mount = true_mount.boresight.matrix();
  const Mat3 r_err_m = r_err.matrix();
  const std::size_t steps = scanner.steps_per_revolution();
  const double dt = scanner.firing_interval();
  const std::size_t n_firings = static_cast<std::size_t>(std::llround(duration / dt));

  // precompute sensor-frame beam directions per azimuth step
  const std::size_t nb = scanner.beams.size();
  std::vector<Vec3> dirs(steps * nb);
  for (std::size_t a = 0; a < steps; ++a) {
    const double az = static_cast<double>(a) * scanner.azimuth_step_deg;
    for (std::size_t j = 0; j < nb; ++j)
      dirs[a * nb + j] =
          beam_direction(az + scanner.beams[j].azimuth_offset_deg, scanner.beams[j].elevation_deg);
  }

  bundle.returns.reserve(n_firings * nb);
  for (std::size_t k = 0; k < n_firings; ++k) {
    const double t = static_cast<double>(k) * dt;
    const TrajectorySample pose = interpolate_pose(bundle.trajectory, t);
    const Mat3 r_world = pose.orientation.matrix() * r_mount;
    const Vec3 origin = pose.position + pose.orientation.matrix() * true_mount.lever_arm;
    const std::size_t a = k % steps;
    for (std::size_t j = 0; j < nb; ++j) {
      const Vec3& u = dirs[a * nb + j];
      const Vec3 w = r_world * u;
      const auto s = intersect_scene(scene, origin, w, scanner.max_range);
      if (!s) continue;
      double range = *s;
      if (sigma > 0.0) range = std::max(1e-6, range + sigma * noise(rng));
      RawReturn r;
      r.t = t;
      r.beam_id = static_cast<std::uint32_t>(j);
      r.direction = r_err_m * u;
      r.range = range;
      bundle.returns.push_back(r);
    }
  }
  return bundle;
}

/// Street-canyon stand-in scene: ground, two parallel facade rows 20 m
/// apart, and two perpendicular cross-street facades. Patches are separated
/// by gaps so neighborhoods never straddle two surfaces.
inline SceneModel street_canyon_scene() {
  SceneModel scene;
  scene.patches = {
      {1, Vec3(-20, -22, 0), Vec3(240, 0, 0), Vec3(0, 44, 0)},   // ground
      {2, Vec3(-10, -10, 2), Vec3(200, 0, 0), Vec3(0, 0, 8)},    // left facade row
      {3, Vec3(-10, 10, 2), Vec3(200, 0, 0), Vec3(0, 0, 8)},     // right facade row
      {4, Vec3(-14, -18, 2), Vec3(0, 36, 0), Vec3(0, 0, 8)},     // near cross street
      {5, Vec3(194, -18, 2), Vec3(0, 36, 0), Vec3(0, 0, 8)},     // far cross street
  };
  scene.validate();
  return scene;
}

/// Closed box (inward-facing) for all-rays-hit tests.
inline SceneModel enclosing_box_scene(double half = 40.0) {
  SceneModel scene;
  const double h = half;
  scene.patches = {
      {1, Vec3(-h, -h, -h), Vec3(2 * h, 0, 0), Vec3(0, 2 * h, 0)},  // floor
      {2, Vec3(-h, -h, h), Vec3(2 * h, 0, 0), Vec3(0, 2 * h, 0)},   // ceiling
      {3, Vec3(-h, -h, -h), Vec3(2 * h, 0, 0), Vec3(0, 0, 2 * h)},  // y = -h
      {4, Vec3(-h, h, -h), Vec3(2 * h, 0, 0), Vec3(0, 0, 2 * h)},   // y = +h
      {5, Vec3(-h, -h, -h), Vec3(0, 2 * h, 0), Vec3(0, 0, 2 * h)},  // x = -h
      {6, Vec3(h, -h, -h), Vec3(0, 2 * h, 0), Vec3(0, 0, 2 * h)},   // x = +h
  };
  scene.validate();
  return scene;
}

/// Nominal wedge mounting used by the canonical runs: 45 deg outward, 25 deg
/// tilt, sensor 1.9 m above the INS origin.
inline MountConfig standard_mount() {
  MountConfig m;
  m.lever_arm = Vec3(0.8, 0.0, 1.9);
  m.boresight = Rotation3::from_euler(45.0, 25.0, 0.0);
  return m;
}

/// Canonical 20 s calibration window: zigzag through the street canyon,
/// default scanner with 0.02 m range noise, injected error uniform in
/// +-1 degree per axis drawn from `seed`.
inline SimBundle standard_calibration_run(std::uint64_t seed, double duration = 20.0,
                                          double sigma = 0.02) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  EulerDeg injected{u(rng), u(rng), u(rng)};
  ScannerModel scanner = default_scanner();
  scanner.range_noise_sigma = sigma;
  ManeuverScript script = zigzag_script(8.5, 2.5, 8.0, std::max(duration, 1.0));
  SimBundle bundle =
      simulate(street_canyon_scene(), scanner, script, standard_mount(), injected, rng(), duration);
  bundle.truth.seed = seed;
  return bundle;
}

}  // namespace mlscalib
