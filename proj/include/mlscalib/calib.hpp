#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlscalib/georef.hpp"
#include "mlscalib/parallel.hpp"
#include "mlscalib/scatter.hpp"

namespace mlscalib {

/// Raised when the trajectory does not cover the calibration window or has a
/// hole inside it. The CLI maps this to exit 3.
class CoverageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when the calibration window exceeds the configured maximum. The
/// refusal is overridable (allow_long).
class WindowError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Coarse-to-fine search grid over the three Euler angles of R_C.
struct GridSpec {
  double half_width_deg = 1.5;  // per axis, level 0
  double step_deg = 0.1;        // level 0
  int levels = 3;               // total, including the coarse level
  double shrink = 3.0;          // step divisor per refinement level
  int refine_half_steps = 3;    // refinement half-width, in units of the new step
  EulerDeg center{};

  void validate() const {
    if (!(step_deg > 0.0)) throw std::invalid_argument("GridSpec: step must be > 0");
    // half_width 0 is the documented degenerate single-evaluation grid
    if (half_width_deg != 0.0 && half_width_deg < step_deg)
      throw std::invalid_argument("GridSpec: half-width must be 0 or >= step");
    if (levels < 1) throw std::invalid_argument("GridSpec: levels must be >= 1");
    if (!(shrink > 1.0)) throw std::invalid_argument("GridSpec: shrink must be > 1");
    if (refine_half_steps < 1)
      throw std::invalid_argument("GridSpec: refine_half_steps must be >= 1");
    if (!std::isfinite(half_width_deg) || !std::isfinite(step_deg) ||
        !std::isfinite(center.yaw) || !std::isfinite(center.pitch) ||
        !std::isfinite(center.roll))
      throw std::invalid_argument("GridSpec: non-finite field");
  }
};

struct CalibrationOptions {
  std::size_t neighbors = 8;   // N of the scatter metric
  double skip_radius = 5.0;    // forwarded to average_scatter
  unsigned threads = 0;        // 0 = hardware concurrency; across candidates
  double max_window_s = 20.0;  // refusal threshold, per the 20 s guidance
  bool allow_long = false;
  double max_trajectory_gap_s = 0.5;  // largest tolerated INS sampling hole
  // Coarse scores on a decimated stream are noisy enough to misrank the
  // floor of the shallow valley the Euler coupling produces; the rescore
  // stage therefore re-evaluates the best coarse nodes on the full stream
  // before any refinement re-centers. 0 disables rescoring.
  std::size_t rescore_candidates = 3000;
  // Runtime-bounding subsample schedule indexed by stage (last entry
  // repeats): stage 0 = coarse grid, stage 1 = rescore, stages 2+ =
  // refinement levels. Stream stride decimates the scored stream; query
  // stride decimates the scatter query set.
  std::vector<std::size_t> level_stream_stride = {3, 1, 1};
  std::vector<std::size_t> level_query_stride = {37, 13, 3, 2};
  double cell_scale = 2.2;  // voxel cell = scale x median N-NN radius, per stage
};

struct ScoredCandidate {
  int level = 0;
  EulerDeg angles;
  double S = 0.0;
};

struct CalibrationResult {
  EulerDeg best;
  double best_S = std::numeric_limits<double>::infinity();
  std::vector<ScoredCandidate> table;  // level-major, row-major within a level
  std::size_t evaluations = 0;
  double wall_seconds = 0.0;
  bool flat_minimum_warning = false;
  double flat_relative_spread = 0.0;  // (Smax-Smin)/Smax within 0.1 deg of best
  std::vector<std::string> warnings;
};

namespace detail {

/// Per-return terms of the georeferencing chain that do not depend on the
/// correction: p(R_C) = A * (R_C * s) + b with A = R_N R_LiDAR,
/// b = p_N + R_N d, s = rho u.
struct PreparedWindow {
  std::vector<Mat3> A;
  std::vector<Vec3> b;
  std::vector<Vec3> s;

  std::size_t size() const { return A.size(); }
};

inline PreparedWindow prepare_window(const std::vector<RawReturn>& returns,
                                     const Trajectory& traj, const MountConfig& mount,
                                     std::size_t stride) {
  PreparedWindow w;
  w.A.reserve(returns.size() / stride + 1);
  w.b.reserve(returns.size() / stride + 1);
  w.s.reserve(returns.size() / stride + 1);
  const Mat3 rl = mount.boresight.matrix();
  for (std::size_t i = 0; i < returns.size(); i += stride) {
    const RawReturn& r = returns[i];
    if (!r.valid()) continue;
    if (!traj.covers(r.t)) continue;  // same drop rule as georeference_stream
    const TrajectorySample pose = interpolate_pose(traj, r.t);
    const Mat3 rn = pose.orientation.matrix();
    w.A.push_back(rn * rl);
    w.b.push_back(pose.position + rn * mount.lever_arm);
    w.s.push_back(r.range * r.direction);
  }
  return w;
}

inline PreparedWindow prepare_sub(const PreparedWindow& in, std::size_t stride) {
  PreparedWindow out;
  out.A.reserve(in.size() / stride + 1);
  out.b.reserve(in.size() / stride + 1);
  out.s.reserve(in.size() / stride + 1);
  for (std::size_t i = 0; i < in.size(); i += stride) {
    out.A.push_back(in.A[i]);
    out.b.push_back(in.b[i]);
    out.s.push_back(in.s[i]);
  }
  return out;
}

inline GeoPointCloud materialize(const PreparedWindow& w, const Rotation3& correction) {
  const Mat3 rc = correction.matrix();
  std::vector<GeoPoint> pts(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) pts[i].position = w.A[i] * (rc * w.s[i]) + w.b[i];
  return GeoPointCloud(std::move(pts));
}

/// Index cell size tuned to the N-NN query radius of this cloud (sampled on
/// the level's center candidate; one value per level keeps runs deterministic).
inline double pick_cell_size(const PreparedWindow& w, const Rotation3& center,
                             std::size_t n_neighbors, double scale) {
  GeoPointCloud cloud = materialize(w, center);
  if (cloud.size() < n_neighbors + 1) return 0.0;  // let the index auto-size
  const VoxelIndex& idx = cloud.build_index();
  const std::size_t nsample = std::min<std::size_t>(1000, cloud.size());
  const std::size_t stride = cloud.size() / nsample;
  std::vector<double> radii;
  radii.reserve(nsample);
  std::vector<NeighborHit> hits;
  for (std::size_t s = 0; s < nsample; ++s) {
    const std::size_t i = s * stride;
    idx.query_knn(cloud.xs()[i], cloud.ys()[i], cloud.zs()[i], static_cast<std::uint32_t>(i),
                  n_neighbors, hits);
    if (!hits.empty() && hits.back().d2 > 0.0) radii.push_back(std::sqrt(hits.back().d2));
  }
  if (radii.empty()) return 0.0;
  auto mid = radii.begin() + radii.size() / 2;
  std::nth_element(radii.begin(), mid, radii.end());
  return std::max(1e-9, scale * *mid);
}

inline double eval_candidate(const PreparedWindow& w, const EulerDeg& cand, std::size_t qstride,
                             double cell, const CalibrationOptions& opt) {
  GeoPointCloud cloud =
      materialize(w, Rotation3::from_euler(cand.yaw, cand.pitch, cand.roll));
  cloud.build_index(cell);
  ScatterOptions sopt;
  sopt.neighbors = opt.neighbors;
  sopt.query_stride = qstride;
  sopt.skip_radius = opt.skip_radius;
  sopt.threads = 1;  // parallelism lives across candidates; keeps tables exact
  sopt.collect_lambdas = false;
  return average_scatter(cloud, sopt).S;
}

inline bool lex_better(double s1, const EulerDeg& a1, double s2, const EulerDeg& a2) {
  if (s1 != s2) return s1 < s2;
  return std::tie(a1.yaw, a1.pitch, a1.roll) < std::tie(a2.yaw, a2.pitch, a2.roll);
}

}  // namespace detail

/// Sharpness score of one correction candidate over the full window:
/// georeference with R_C = candidate, then average_scatter with defaults.
inline double score_candidate(const std::vector<RawReturn>& returns, const Trajectory& traj,
                              MountConfig mount, const EulerDeg& candidate,
                              std::size_t n_neighbors = 8) {
  mount.correction = Rotation3::from_euler(candidate.yaw, candidate.pitch, candidate.roll);
  mount.validate();
  auto [points, stats] = georeference_stream(returns, traj, mount);
  GeoPointCloud cloud(std::move(points));
  ScatterOptions opt;
  opt.neighbors = n_neighbors;
  opt.collect_lambdas = false;  // only S is returned
  return average_scatter(cloud, opt).S;
}

/// Coarse-to-fine grid search for the boresight correction minimizing S.
///
/// Stages, recorded in the table under the `level` field:
///   0            full coarse grid around grid.center (decimated stream)
///   1            rescore: best coarse nodes re-evaluated on the full stream
///   2..levels    refinements re-centering on the previous stage's best,
///                step shrunk by grid.shrink per level
/// Scores from different streams are not comparable, so each stage picks its
/// own lexicographic minimum and the result reports the final stage's. The
/// rescore stage exists because the Euler axes couple into a shallow valley
/// whose floor varies by only a few percent; decimated-stream noise can
/// misrank it by several coarse steps, beyond any refinement's reach.
/// A half_width of 0 is the degenerate grid: one full-stream evaluation of
/// grid.center, no refinement.
inline CalibrationResult calibrate(const std::vector<RawReturn>& returns, const Trajectory& traj,
                                   const MountConfig& mount, const GridSpec& grid = {},
                                   const CalibrationOptions& options = {}) {
  const auto wall0 = std::chrono::steady_clock::now();
  grid.validate();
  mount.validate();
  if (options.neighbors < 2) throw std::invalid_argument("calibrate: N must be >= 2");
  if (returns.empty()) throw std::invalid_argument("calibrate: empty return stream");

  double t_min = returns.front().t, t_max = returns.front().t;
  for (const RawReturn& r : returns) {
    t_min = std::min(t_min, r.t);
    t_max = std::max(t_max, r.t);
  }
  const double duration = t_max - t_min;
  if (duration > options.max_window_s && !options.allow_long)
    throw WindowError(
        "calibration window of " + std::to_string(duration) +
        " s exceeds the " + std::to_string(options.max_window_s) +
        " s guidance (calibration maneuvers are typically no longer than 20 s); "
        "pass allow_long to override");
  if (!traj.covers(t_min) || !traj.covers(t_max)) {
    const double s0 = traj.t_first(), s1 = traj.t_last();
    std::string uncovered;
    if (t_min < s0)
      uncovered += "[" + std::to_string(t_min) + ", " + std::to_string(std::min(t_max, s0)) + ")";
    if (t_max > s1) {
      if (!uncovered.empty()) uncovered += " and ";
      uncovered += "(" + std::to_string(std::max(t_min, s1)) + ", " + std::to_string(t_max) + "]";
    }
    throw CoverageError("trajectory does not cover the calibration window: uncovered " +
                        uncovered);
  }
  const double gap = traj.max_gap_within(t_min, t_max);
  if (gap > options.max_trajectory_gap_s)
    throw CoverageError("trajectory gap of " + std::to_string(gap) +
                        " s inside the calibration window [" + std::to_string(t_min) + ", " +
                        std::to_string(t_max) + "] exceeds the tolerated " +
                        std::to_string(options.max_trajectory_gap_s) + " s");

  const detail::PreparedWindow full = detail::prepare_window(returns, traj, mount, 1);
  if (full.size() < options.neighbors + 1)
    throw std::invalid_argument("calibrate: usable returns fewer than N+1");

  auto sched = [](const std::vector<std::size_t>& v, int stage, std::size_t fallback) {
    if (v.empty()) return fallback;
    const std::size_t s = v[std::min<std::size_t>(stage, v.size() - 1)];
    return s == 0 ? fallback : s;
  };

  CalibrationResult result;

  // Evaluates one stage's candidate list (slot-indexed writes keep the table
  // byte-identical for any thread count) and returns the stage's lex-min.
  auto run_stage = [&](int stage, const detail::PreparedWindow& window, std::size_t query_stride,
                       const EulerDeg& cell_probe,
                       const std::vector<EulerDeg>& cands) -> ScoredCandidate {
    if (window.size() < options.neighbors + 1)
      throw std::invalid_argument("calibrate: subsampled stream smaller than N+1");
    const double cell = detail::pick_cell_size(
        window, Rotation3::from_euler(cell_probe.yaw, cell_probe.pitch, cell_probe.roll),
        options.neighbors, options.cell_scale);
    std::vector<ScoredCandidate> scores(cands.size());
    parallel_for_blocks(cands.size(), 1, options.threads,
                        [&](std::size_t, std::size_t begin, std::size_t end) {
                          for (std::size_t c = begin; c < end; ++c) {
                            ScoredCandidate& out = scores[c];
                            out.level = stage;
                            out.angles = cands[c];
                            out.S = detail::eval_candidate(window, out.angles, query_stride, cell,
                                                           options);
                          }
                        });
    ScoredCandidate best = scores.front();
    for (const ScoredCandidate& sc : scores)
      if (detail::lex_better(sc.S, sc.angles, best.S, best.angles)) best = sc;
    result.table.insert(result.table.end(), scores.begin(), scores.end());
    result.evaluations += scores.size();
    return best;
  };

  auto box = [](const EulerDeg& center, int half, double step) {
    std::vector<EulerDeg> cands;
    cands.reserve(std::size_t(2 * half + 1) * (2 * half + 1) * (2 * half + 1));
    for (int iy = -half; iy <= half; ++iy)
      for (int ip = -half; ip <= half; ++ip)
        for (int ir = -half; ir <= half; ++ir)
          cands.push_back(
              {center.yaw + iy * step, center.pitch + ip * step, center.roll + ir * step});
    return cands;
  };

  if (grid.half_width_deg == 0.0) {  // degenerate grid: one full-stream evaluation
    const ScoredCandidate best = run_stage(0, full, 1, grid.center, {grid.center});
    result.best = best.angles;
    result.best_S = best.S;
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return result;
  }

  // stage 0: coarse grid on the decimated stream
  ScoredCandidate incumbent;
  std::size_t coarse_count = 0;
  {
    const int half = static_cast<int>(std::round(grid.half_width_deg / grid.step_deg));
    const std::size_t stream_stride = sched(options.level_stream_stride, 0, 1);
    const detail::PreparedWindow sub =
        stream_stride > 1 ? detail::prepare_sub(full, stream_stride) : detail::PreparedWindow{};
    const detail::PreparedWindow& window = stream_stride > 1 ? sub : full;
    incumbent = run_stage(0, window, sched(options.level_query_stride, 0, 1), grid.center,
                          box(grid.center, half, grid.step_deg));
    coarse_count = result.table.size();
  }

  // stage 1: rescore the best coarse nodes on the full stream
  if (options.rescore_candidates > 0) {
    std::vector<const ScoredCandidate*> order;
    order.reserve(coarse_count);
    for (std::size_t i = 0; i < coarse_count; ++i) order.push_back(&result.table[i]);
    const std::size_t keep = std::min(options.rescore_candidates, order.size());
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [](const ScoredCandidate* a, const ScoredCandidate* b) {
                        return detail::lex_better(a->S, a->angles, b->S, b->angles);
                      });
    std::vector<EulerDeg> cands;
    cands.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) cands.push_back(order[i]->angles);
    const std::size_t stream_stride = sched(options.level_stream_stride, 1, 1);
    const detail::PreparedWindow sub =
        stream_stride > 1 ? detail::prepare_sub(full, stream_stride) : detail::PreparedWindow{};
    const detail::PreparedWindow& window = stream_stride > 1 ? sub : full;
    incumbent = run_stage(1, window, sched(options.level_query_stride, 1, 1), incumbent.angles,
                          cands);
  }

  // stages 2..levels: shrinking refinement boxes around the incumbent
  for (int r = 1; r < grid.levels; ++r) {
    const int stage = r + 1;
    const double step = grid.step_deg / std::pow(grid.shrink, r);
    const std::size_t stream_stride = sched(options.level_stream_stride, stage, 1);
    const detail::PreparedWindow sub =
        stream_stride > 1 ? detail::prepare_sub(full, stream_stride) : detail::PreparedWindow{};
    const detail::PreparedWindow& window = stream_stride > 1 ? sub : full;
    incumbent = run_stage(stage, window, sched(options.level_query_stride, stage, 1),
                          incumbent.angles, box(incumbent.angles, grid.refine_half_steps, step));
  }

  result.best = incumbent.angles;
  result.best_S = incumbent.S;

  // Flat-minimum check over full-stream stages (stage >= 1) within 0.1 deg of
  // the best, max-abs over axes; a flat bowl means the scene cannot resolve
  // R_C. Falls back to all entries when no full-stream stage ran.
  double smin = std::numeric_limits<double>::infinity(), smax = 0.0;
  std::size_t in_window = 0;
  for (int pass = 0; pass < 2 && in_window < 2; ++pass) {
    smin = std::numeric_limits<double>::infinity();
    smax = 0.0;
    in_window = 0;
    for (const ScoredCandidate& sc : result.table) {
      if (pass == 0 && sc.level < 1) continue;
      if (std::abs(sc.angles.yaw - result.best.yaw) <= 0.1 &&
          std::abs(sc.angles.pitch - result.best.pitch) <= 0.1 &&
          std::abs(sc.angles.roll - result.best.roll) <= 0.1) {
        smin = std::min(smin, sc.S);
        smax = std::max(smax, sc.S);
        ++in_window;
      }
    }
  }
  result.flat_relative_spread = smax > 0.0 ? (smax - smin) / smax : 0.0;
  if (in_window >= 2 && result.flat_relative_spread < 1e-3) {
    result.flat_minimum_warning = true;
    result.warnings.push_back(
        "flat minimum: relative S spread " + std::to_string(result.flat_relative_spread) +
        " within 0.1 deg of the best candidate is below 1e-3; the scene geometry "
        "likely cannot resolve all three angles (add surfaces with varied orientations)");
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return result;
}

}  // namespace mlscalib
