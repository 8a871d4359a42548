#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mlscalib/geometry.hpp"

namespace mlscalib {

/// One raw LiDAR range measurement in the sensor frame. The measured point
/// is range * direction, with direction a unit vector.
struct RawReturn {
  double t = 0.0;
  std::uint32_t beam_id = 0;
  Vec3 direction = Vec3::UnitX();
  double range = 0.0;

  Vec3 sensor_point() const { return range * direction; }

  bool valid(double max_range = std::numeric_limits<double>::infinity()) const {
    return std::isfinite(t) && std::isfinite(range) && range > 0.0 && range <= max_range &&
           direction.allFinite() && std::abs(direction.norm() - 1.0) <= 1e-9;
  }
};

/// Returns covering one 1/10-second interval [t_start, t_end). Both bounds
/// are derived from the epoch with the same arithmetic as the index
/// assignment, so interval membership is exact.
struct RawScan {
  std::int64_t index = 0;
  double t_start = 0.0;
  double t_end = 0.0;
  std::vector<RawReturn> returns;

  static constexpr double kDuration = 0.1;
};

/// Sensor mounting relative to the INS: lever arm (sensor origin in the INS
/// frame), nominal boresight rotation (sensor-to-INS), and the boresight
/// correction applied between them. Correction defaults to identity.
struct MountConfig {
  Vec3 lever_arm = Vec3::Zero();
  Rotation3 boresight;
  Rotation3 correction;

  void validate() const {
    if (!lever_arm.allFinite() || lever_arm.norm() >= 10.0)
      throw std::invalid_argument("MountConfig: lever arm must be finite and < 10 m");
  }
};

/// A georeferenced point: world position plus acquisition metadata.
struct GeoPoint {
  Vec3 position = Vec3::Zero();
  double t = 0.0;
  std::uint32_t beam_id = 0;
  std::int64_t scan_index = 0;
};

struct DropStats {
  std::size_t in_span = 0;
  std::size_t dropped_before = 0;  // t < trajectory start
  std::size_t dropped_after = 0;   // t > trajectory end
  std::size_t dropped() const { return dropped_before + dropped_after; }
};

inline std::int64_t scan_index_for(double t, double epoch) {
  auto idx = static_cast<std::int64_t>(std::floor((t - epoch) / RawScan::kDuration));
  // one-ulp fix-up so t always lies in [epoch + idx*dt, epoch + (idx+1)*dt)
  while (t < epoch + static_cast<double>(idx) * RawScan::kDuration) --idx;
  while (t >= epoch + static_cast<double>(idx + 1) * RawScan::kDuration) ++idx;
  return idx;
}

/// World position of one return:
///   p = p_N(t) + R_N(t) * [ R_boresight * R_correction * r_L(t) + d ]
/// with the pose interpolated from the trajectory at the return time.
/// Returns nullopt when t is outside the trajectory span (dropped return).
inline std::optional<GeoPoint> georeference_return(const RawReturn& ret, const Trajectory& traj,
                                                   const MountConfig& mount,
                                                   double scan_epoch = 0.0) {
  if (!traj.covers(ret.t)) return std::nullopt;
  const TrajectorySample pose = interpolate_pose(traj, ret.t);
  const Vec3 sensor = mount.correction.apply(ret.sensor_point());
  const Vec3 ins = mount.boresight.apply(sensor) + mount.lever_arm;
  GeoPoint p;
  p.position = pose.position + pose.orientation.apply(ins);
  p.t = ret.t;
  p.beam_id = ret.beam_id;
  p.scan_index = scan_index_for(ret.t, scan_epoch);
  return p;
}

/// Recovers the sensor-frame measurement from a georeferenced point given the
/// same pose and mount (inverse of the georeferencing chain).
inline Vec3 invert_georeference(const Vec3& world, const TrajectorySample& pose,
                                const MountConfig& mount) {
  const Vec3 ins = pose.orientation.inverse().apply(world - pose.position);
  const Vec3 sensor = mount.boresight.inverse().apply(ins - mount.lever_arm);
  return mount.correction.inverse().apply(sensor);
}

/// Georeferences a time-ordered return stream. Out-of-span returns are
/// counted and dropped, never extrapolated. Output preserves input order.
inline std::pair<std::vector<GeoPoint>, DropStats> georeference_stream(
    std::span<const RawReturn> returns, const Trajectory& traj, const MountConfig& mount,
    double scan_epoch = 0.0) {
  std::vector<GeoPoint> out;
  out.reserve(returns.size());
  DropStats stats;
  for (const RawReturn& r : returns) {
    if (r.t < traj.t_first()) {
      ++stats.dropped_before;
      continue;
    }
    if (r.t > traj.t_last()) {
      ++stats.dropped_after;
      continue;
    }
    out.push_back(*georeference_return(r, traj, mount, scan_epoch));
    ++stats.in_span;
  }
  return {std::move(out), stats};
}

/// Splits a time-ordered stream into 1/10-second scans aligned to `epoch`.
/// Each return lands in scan floor((t - epoch)/0.1); empty scans are omitted.
inline std::vector<RawScan> split_scans(std::span<const RawReturn> returns, double epoch) {
  std::vector<RawScan> scans;
  for (const RawReturn& r : returns) {
    const std::int64_t idx = scan_index_for(r.t, epoch);
    if (scans.empty() || scans.back().index != idx) {
      RawScan s;
      s.index = idx;
      s.t_start = epoch + static_cast<double>(idx) * RawScan::kDuration;
      s.t_end = epoch + static_cast<double>(idx + 1) * RawScan::kDuration;
      scans.push_back(std::move(s));
    }
    scans.back().returns.push_back(r);
  }
  return scans;
}

}  // namespace mlscalib
