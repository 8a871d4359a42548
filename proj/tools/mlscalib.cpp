// mlscalib: simulate / georeference / score / calibrate a rotating multi-beam
// LiDAR against an INS trajectory. See README.md for formats and exit codes.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mlscalib/calib.hpp"
#include "mlscalib/geometry.hpp"
#include "mlscalib/georef.hpp"
#include "mlscalib/io.hpp"
#include "mlscalib/scatter.hpp"
#include "mlscalib/simscene.hpp"

namespace fs = std::filesystem;
using namespace mlscalib;

namespace {

// Exit codes (also in README): 0 ok, 2 I/O, 3 coverage, 4 degenerate input,
// 5 invalid arguments.
constexpr int kExitOk = 0;
constexpr int kExitIo = 2;
constexpr int kExitCoverage = 3;
constexpr int kExitDegenerate = 4;
constexpr int kExitUsage = 5;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string triple(const EulerDeg& e, const char* f = "%.6f") {
  return "yaw=" + fmt(f, e.yaw) + " pitch=" + fmt(f, e.pitch) + " roll=" + fmt(f, e.roll);
}

EulerDeg to_euler(const std::vector<double>& v) { return {v[0], v[1], v[2]}; }
Vec3 to_vec(const std::vector<double>& v) { return Vec3(v[0], v[1], v[2]); }

std::string timestamp_now() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

void decimate(std::vector<RawReturn>& returns, std::size_t stride) {
  if (stride <= 1) return;
  std::size_t w = 0;
  for (std::size_t i = 0; i < returns.size(); i += stride) returns[w++] = returns[i];
  returns.resize(w);
}

struct SimulateArgs {
  std::string scenario = "standard";
  std::uint64_t seed = 7;
  double duration = 20.0;
  bool duration_set = false;
  double sigma = 0.02;
  std::string out_dir;
  std::string format = "csv";
};

int require(std::initializer_list<std::pair<const char*, const std::string*>> fields) {
  for (const auto& [flag, value] : fields)
    if (value->empty()) {
      std::cerr << "error: " << flag << " is required\n";
      return kExitUsage;
    }
  return kExitOk;
}

int cmd_simulate(const SimulateArgs& a) {
  if (int rc = require({{"--out", &a.out_dir}})) return rc;
  SimBundle bundle;
  if (a.scenario == "standard") {
    bundle = standard_calibration_run(a.seed, a.duration, a.sigma);
  } else {
    std::mt19937_64 rng(a.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const EulerDeg injected{u(rng), u(rng), u(rng)};
    ScannerModel scanner = default_scanner();
    scanner.range_noise_sigma = a.sigma;
    ManeuverScript script;
    double duration = a.duration;
    if (a.scenario == "straight") {
      script = straight_line_script(9.0, std::max(a.duration, 1.0));
    } else {  // loop
      script = closed_loop_script(80.0, 8.0);
      if (!a.duration_set) duration = -1.0;  // full loop
    }
    bundle = simulate(street_canyon_scene(), scanner, script, standard_mount(), injected, rng(),
                      duration);
    bundle.truth.seed = a.seed;
  }

  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + a.out_dir + ": " + ec.message());

  const bool binary = a.format == "binary";
  const std::string returns_path = a.out_dir + (binary ? "/returns.bin" : "/returns.csv");
  const std::string traj_path = a.out_dir + "/trajectory.csv";
  const std::string truth_path = a.out_dir + "/ground_truth.json";
  if (binary)
    write_returns_binary(returns_path, bundle.returns);
  else
    write_returns_csv(returns_path, bundle.returns);
  write_trajectory_csv(traj_path, bundle.trajectory);
  write_ground_truth_json(truth_path, bundle.truth, bundle.truth.true_mount);

  std::cout << "scenario: " << a.scenario << "  seed: " << a.seed << "\n"
            << "returns: " << bundle.returns.size() << "  trajectory samples: "
            << bundle.trajectory.size() << "\n"
            << "injected error (deg): " << triple(bundle.truth.injected) << "\n"
            << "wrote " << returns_path << "\n"
            << "wrote " << traj_path << "\n"
            << "wrote " << truth_path << "\n";
  return kExitOk;
}

struct MountArgs {
  std::vector<double> lever = {0.0, 0.0, 0.0};
  std::vector<double> boresight = {0.0, 0.0, 0.0};
  std::vector<double> rc = {0.0, 0.0, 0.0};

  MountConfig build() const {
    MountConfig m;
    m.lever_arm = to_vec(lever);
    m.boresight = Rotation3::from_euler(to_euler(boresight));
    m.correction = Rotation3::from_euler(to_euler(rc));
    m.validate();
    return m;
  }
};

void add_mount_flags(CLI::App* sub, MountArgs& m, bool with_rc) {
  sub->add_option("--lever", m.lever, "lever arm x,y,z in the INS frame [m]")
      ->delimiter(',')
      ->expected(3)
      ->capture_default_str();
  sub->add_option("--boresight", m.boresight, "nominal boresight Euler yaw,pitch,roll [deg]")
      ->delimiter(',')
      ->expected(3)
      ->capture_default_str();
  if (with_rc)
    sub->add_option("--rc", m.rc, "boresight correction Euler yaw,pitch,roll [deg]")
        ->delimiter(',')
        ->expected(3)
        ->capture_default_str();
}

struct GeorefArgs {
  std::string returns_path, traj_path, out_path;
  MountArgs mount;
  std::string cloud_format = "binary";
};

int cmd_georef(const GeorefArgs& a) {
  if (int rc = require({{"--returns", &a.returns_path},
                        {"--trajectory", &a.traj_path},
                        {"--out", &a.out_path}}))
    return rc;
  const std::vector<RawReturn> returns = read_returns(a.returns_path);
  const Trajectory traj = read_trajectory_csv(a.traj_path);
  const MountConfig mount = a.mount.build();
  const bool binary = a.cloud_format == "binary";

  if (returns.empty()) {
    write_cloud_ply(a.out_path, {}, binary);
    std::cerr << "warning: " << a.returns_path << " contains no returns; wrote empty cloud\n";
    std::cout << "returns: 0  georeferenced: 0  dropped: 0\nwrote " << a.out_path << "\n";
    return kExitOk;
  }

  auto [points, stats] = georeference_stream(returns, traj, mount);
  if (points.empty()) {
    double t0 = returns.front().t, t1 = returns.front().t;
    for (const RawReturn& r : returns) {
      t0 = std::min(t0, r.t);
      t1 = std::max(t1, r.t);
    }
    std::cerr << "error: trajectory [" << traj.t_first() << ", " << traj.t_last()
              << "] covers none of the returns; uncovered interval [" << t0 << ", " << t1
              << "]\n";
    return kExitCoverage;
  }
  write_cloud_ply(a.out_path, points, binary);
  std::cout << "returns: " << returns.size() << "  georeferenced: " << stats.in_span
            << "  dropped: " << stats.dropped() << " (" << stats.dropped_before
            << " before trajectory start, " << stats.dropped_after << " after end)\n"
            << "wrote " << a.out_path << "\n";
  if (stats.dropped() > 0)
    std::cerr << "warning: " << stats.dropped()
              << " returns fell outside the trajectory span and were dropped\n";
  return kExitOk;
}

struct ScoreArgs {
  std::string cloud_path, returns_path, traj_path;
  MountArgs mount;
  std::size_t neighbors = 8;
  std::size_t query_stride = 1;
  double skip_radius = 5.0;
  unsigned threads = 0;
  std::string lambdas_path, json_path;
};

int cmd_score(const ScoreArgs& a) {
  if (a.cloud_path.empty() == a.returns_path.empty()) {
    std::cerr << "error: pass either --cloud or --returns with --trajectory\n";
    return kExitUsage;
  }
  if (a.neighbors < 2) {
    std::cerr << "error: --neighbors must be >= 2\n";
    return kExitUsage;
  }

  std::vector<GeoPoint> points;
  if (!a.cloud_path.empty()) {
    points = read_cloud_ply(a.cloud_path);
  } else {
    if (a.traj_path.empty()) {
      std::cerr << "error: --returns requires --trajectory\n";
      return kExitUsage;
    }
    const std::vector<RawReturn> returns = read_returns(a.returns_path);
    const Trajectory traj = read_trajectory_csv(a.traj_path);
    points = georeference_stream(returns, traj, a.mount.build()).first;
  }
  if (points.size() < a.neighbors + 1) {
    std::cerr << "error: cloud has " << points.size() << " points; scoring needs at least N+1 = "
              << a.neighbors + 1 << "\n";
    return kExitDegenerate;
  }

  GeoPointCloud cloud(std::move(points));
  ScatterOptions opt;
  opt.neighbors = a.neighbors;
  opt.query_stride = a.query_stride;
  opt.skip_radius = a.skip_radius;
  opt.threads = a.threads;
  opt.collect_lambdas = !a.lambdas_path.empty();
  ScatterReport rep;
  try {
    rep = average_scatter(cloud, opt);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDegenerate;
  }

  std::cout << "S = " << detail::format_g17(rep.S) << " m^2\n"
            << "n_p = " << rep.n_p << "\n"
            << "N = " << rep.neighbors << "\n"
            << "skipped = " << rep.skipped << " (neighborhood radius > "
            << fmt("%g", a.skip_radius) << " m)\n"
            << "cloud points = " << rep.cloud_size << "\n";

  if (!a.lambdas_path.empty()) {
    auto f = detail::open_out(a.lambdas_path, false);
    std::string buf = "query_index,lambda\n";
    for (std::size_t i = 0; i < rep.lambdas.size(); ++i) {
      buf += std::to_string(rep.query_index[i]);
      buf += ',';
      buf += detail::format_g17(rep.lambdas[i]);
      buf += '\n';
      if (buf.size() > (1u << 20)) {
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        buf.clear();
      }
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    detail::check_stream(f, a.lambdas_path);
    std::cout << "wrote " << a.lambdas_path << "\n";
  }
  if (!a.json_path.empty()) {
    nlohmann::json j;
    j["S"] = rep.S;
    j["n_p"] = rep.n_p;
    j["neighbors"] = rep.neighbors;
    j["skipped"] = rep.skipped;
    j["cloud_size"] = rep.cloud_size;
    auto f = detail::open_out(a.json_path, false);
    f << j.dump(2) << "\n";
    detail::check_stream(f, a.json_path);
    std::cout << "wrote " << a.json_path << "\n";
  }
  return kExitOk;
}

struct CalibrateArgs {
  std::string returns_path, traj_path, truth_path, out_dir;
  MountArgs mount;
  bool mount_given = false;
  double grid_halfwidth = 1.5;
  double grid_step = 0.1;
  int grid_levels = 3;
  double grid_shrink = 3.0;
  int refine_half_steps = 3;
  std::vector<double> center = {0.0, 0.0, 0.0};
  std::size_t neighbors = 8;
  double skip_radius = 5.0;
  unsigned threads = 0;
  double max_window = 20.0;
  bool allow_long = false;
  std::size_t stream_stride = 241;
  std::size_t rescore_candidates = 3000;
  std::vector<std::size_t> level_stream_strides = {3, 1, 1};
  std::vector<std::size_t> level_query_strides = {37, 13, 3, 2};
  double cell_scale = 2.2;
  bool no_timestamp = false;
};

int cmd_calibrate(const CalibrateArgs& a) {
  if (int rc = require({{"--returns", &a.returns_path},
                        {"--trajectory", &a.traj_path},
                        {"--out", &a.out_dir}}))
    return rc;
  GridSpec grid;
  grid.half_width_deg = a.grid_halfwidth;
  grid.step_deg = a.grid_step;
  grid.levels = a.grid_levels;
  grid.shrink = a.grid_shrink;
  grid.refine_half_steps = a.refine_half_steps;
  grid.center = to_euler(a.center);
  try {
    grid.validate();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (a.neighbors < 2) {
    std::cerr << "error: --neighbors must be >= 2\n";
    return kExitUsage;
  }
  if (a.stream_stride < 1) {
    std::cerr << "error: --stream-stride must be >= 1\n";
    return kExitUsage;
  }

  std::vector<RawReturn> returns = read_returns(a.returns_path);
  const std::size_t n_loaded = returns.size();
  const Trajectory traj = read_trajectory_csv(a.traj_path);

  bool truth_present = false;
  GroundTruthFile truth;
  if (!a.truth_path.empty()) {
    truth = read_ground_truth_json(a.truth_path);
    truth_present = true;
  }
  // Mount precedence: explicit flags, else the ground-truth file's mount.
  MountConfig mount = a.mount.build();
  bool mount_from_truth = false;
  if (!a.mount_given && truth_present) {
    mount = truth.mount;
    mount_from_truth = true;
  }

  decimate(returns, a.stream_stride);

  CalibrationOptions opt;
  opt.neighbors = a.neighbors;
  opt.skip_radius = a.skip_radius;
  opt.threads = a.threads;
  opt.max_window_s = a.max_window;
  opt.allow_long = a.allow_long;
  opt.rescore_candidates = a.rescore_candidates;
  opt.level_stream_stride = a.level_stream_strides;
  opt.level_query_stride = a.level_query_strides;
  opt.cell_scale = a.cell_scale;

  CalibrationResult res;
  try {
    res = calibrate(returns, traj, mount, grid, opt);
  } catch (const WindowError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDegenerate;
  }

  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + a.out_dir + ": " + ec.message());

  // Full score table, byte-stable across thread counts.
  const std::string table_path = a.out_dir + "/score_table.csv";
  {
    auto f = detail::open_out(table_path, false);
    std::string buf = "level,yaw_deg,pitch_deg,roll_deg,S\n";
    for (const ScoredCandidate& c : res.table) {
      buf += std::to_string(c.level);
      buf += ',';
      buf += detail::format_g17(c.angles.yaw);
      buf += ',';
      buf += detail::format_g17(c.angles.pitch);
      buf += ',';
      buf += detail::format_g17(c.angles.roll);
      buf += ',';
      buf += detail::format_g17(c.S);
      buf += '\n';
      if (buf.size() > (1u << 20)) {
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        buf.clear();
      }
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    detail::check_stream(f, table_path);
  }

  double window_t0 = 0.0, window_t1 = 0.0;
  if (!returns.empty()) {
    window_t0 = window_t1 = returns.front().t;
    for (const RawReturn& r : returns) {
      window_t0 = std::min(window_t0, r.t);
      window_t1 = std::max(window_t1, r.t);
    }
  }

  const int warning_status = res.warnings.empty() ? 0 : 1;
  EulerDeg err{};
  double max_err = 0.0;
  if (truth_present) {
    err = {res.best.yaw - truth.to_recover.yaw, res.best.pitch - truth.to_recover.pitch,
           res.best.roll - truth.to_recover.roll};
    max_err = std::max({std::abs(err.yaw), std::abs(err.pitch), std::abs(err.roll)});
  }

  const std::string result_path = a.out_dir + "/result.json";
  {
    nlohmann::json j;
    j["best_correction_deg"] = {res.best.yaw, res.best.pitch, res.best.roll};
    j["best_S"] = res.best_S;
    j["evaluations"] = res.evaluations;
    j["warning_status"] = warning_status;
    j["warnings"] = res.warnings;
    j["flat_minimum_warning"] = res.flat_minimum_warning;
    j["flat_relative_spread"] = res.flat_relative_spread;
    j["grid"] = {{"half_width_deg", grid.half_width_deg}, {"step_deg", grid.step_deg},
                 {"levels", grid.levels},                 {"shrink", grid.shrink},
                 {"refine_half_steps", grid.refine_half_steps},
                 {"center_deg", {grid.center.yaw, grid.center.pitch, grid.center.roll}}};
    j["returns_loaded"] = n_loaded;
    j["returns_used"] = returns.size();
    j["stream_stride"] = a.stream_stride;
    j["window"] = {{"t_start", window_t0}, {"t_end", window_t1},
                   {"duration_s", window_t1 - window_t0}};
    j["neighbors"] = a.neighbors;
    if (truth_present) {
      j["truth_correction_deg"] = {truth.to_recover.yaw, truth.to_recover.pitch,
                                   truth.to_recover.roll};
      j["recovery_error_deg"] = {err.yaw, err.pitch, err.roll};
      j["max_axis_error_deg"] = max_err;
    }
    if (!a.no_timestamp) j["wall_seconds"] = res.wall_seconds;
    auto f = detail::open_out(result_path, false);
    f << j.dump(2) << "\n";
    detail::check_stream(f, result_path);
  }

  std::string rep = "boresight calibration report\n";
  if (!a.no_timestamp) rep += "generated: " + timestamp_now() + "\n";
  rep += "returns: " + a.returns_path + " (" + std::to_string(n_loaded) + " loaded, " +
         std::to_string(returns.size()) + " used at stride " + std::to_string(a.stream_stride) +
         ")\n";
  rep += "trajectory: " + a.traj_path + " (" + std::to_string(traj.size()) + " samples)\n";
  rep += "window: " + fmt("%.3f", window_t0) + " s .. " + fmt("%.3f", window_t1) + " s (" +
         fmt("%.3f", window_t1 - window_t0) + " s)\n";
  rep += "mount: lever = (" + fmt("%g", mount.lever_arm.x()) + ", " +
         fmt("%g", mount.lever_arm.y()) + ", " + fmt("%g", mount.lever_arm.z()) +
         ") m, boresight " + triple(mount.boresight.to_euler(), "%.4f") +
         (mount_from_truth ? " [from ground-truth file]" : "") + "\n";
  rep += "grid: half-width " + fmt("%g", grid.half_width_deg) + " deg, step " +
         fmt("%g", grid.step_deg) + " deg, " + std::to_string(grid.levels) +
         " levels, shrink " + fmt("%g", grid.shrink) + "\n";
  rep += "best correction (deg): " + triple(res.best) + "\n";
  rep += "best score S: " + detail::format_g17(res.best_S) + " m^2\n";
  rep += "evaluations: " + std::to_string(res.evaluations) + "\n";
  if (!a.no_timestamp) rep += "wall time: " + fmt("%.1f", res.wall_seconds) + " s\n";
  rep += "warning status: " + std::to_string(warning_status) + "\n";
  for (const std::string& w : res.warnings) rep += "warning: " + w + "\n";
  rep += "reference: a 0.6 deg boresight error displaces a 100 m point by " +
         fmt("%.7f", chord_displacement(0.6, 100.0)) + " m\n";
  rep += "reference: a 0.1 deg boresight error displaces a 100 m point by " +
         fmt("%.7f", chord_displacement(0.1, 100.0)) + " m\n";
  if (truth_present) {
    rep += "ground truth correction (deg): " + triple(truth.to_recover) + "\n";
    rep += "recovery error (deg): " + triple(err) + "\n";
    rep += "max axis error: " + fmt("%.6f", max_err) + " deg -> displaces a 100 m point by " +
           fmt("%.6f", chord_displacement(max_err, 100.0)) + " m\n";
  }

  const std::string report_path = a.out_dir + "/report.txt";
  {
    auto f = detail::open_out(report_path, false);
    f << rep;
    detail::check_stream(f, report_path);
  }
  std::cout << rep << "wrote " << table_path << "\nwrote " << result_path << "\nwrote "
            << report_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"boresight self-calibration for a vehicle-mounted rotating LiDAR"};
  app.require_subcommand(0, 1);
  app.set_config("--config", "", "read options from a `key = value` file");
  bool print_config = false;
  const char* kPrintConfigHelp =
      "print the effective configuration (all defaults included) and exit";
  app.add_flag("--print-config", print_config, kPrintConfigHelp);

  SimulateArgs sim;
  CLI::App* c_sim = app.add_subcommand("simulate", "generate a synthetic run with ground truth");
  c_sim->add_option("--scenario", sim.scenario, "standard | straight | loop")
      ->check(CLI::IsMember({"standard", "straight", "loop"}))
      ->capture_default_str();
  c_sim->add_option("--seed", sim.seed, "RNG seed (injected error and range noise)")
      ->envname("MLSCALIB_SEED")
      ->capture_default_str();
  c_sim->add_option("--duration", sim.duration, "simulated window length [s]")
      ->capture_default_str();
  c_sim->add_option("--sigma", sim.sigma, "range noise sigma [m]")->capture_default_str();
  c_sim->add_option("--format", sim.format, "returns file format: csv | binary")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();
  c_sim->add_option("--out", sim.out_dir, "output directory");

  GeorefArgs geo;
  CLI::App* c_geo = app.add_subcommand("georef", "georeference raw returns into a world cloud");
  c_geo->add_option("--returns", geo.returns_path, "returns file (csv or binary)");
  c_geo->add_option("--trajectory", geo.traj_path, "trajectory csv");
  add_mount_flags(c_geo, geo.mount, true);
  c_geo->add_option("--out", geo.out_path, "output PLY path");
  c_geo->add_option("--cloud-format", geo.cloud_format, "ascii | binary")
      ->check(CLI::IsMember({"ascii", "binary"}))
      ->capture_default_str();

  ScoreArgs sco;
  CLI::App* c_sco = app.add_subcommand("score", "average local scatter of a cloud");
  c_sco->add_option("--cloud", sco.cloud_path, "PLY cloud to score");
  c_sco->add_option("--returns", sco.returns_path, "returns file (scored after georeferencing)");
  c_sco->add_option("--trajectory", sco.traj_path, "trajectory csv (with --returns)");
  add_mount_flags(c_sco, sco.mount, true);
  c_sco->add_option("--neighbors", sco.neighbors, "N nearest neighbors")->capture_default_str();
  c_sco->add_option("--query-stride", sco.query_stride, "evaluate every k-th point")
      ->capture_default_str();
  c_sco->add_option("--skip-radius", sco.skip_radius, "skip neighborhoods wider than this [m]")
      ->capture_default_str();
  c_sco->add_option("--threads", sco.threads, "worker threads (0 = hardware)")
      ->envname("MLSCALIB_THREADS")
      ->capture_default_str();
  c_sco->add_option("--lambdas", sco.lambdas_path, "write per-point lambda table (csv)");
  c_sco->add_option("--json", sco.json_path, "write the report as JSON");

  CalibrateArgs cal;
  CLI::App* c_cal = app.add_subcommand("calibrate", "grid-search the boresight correction");
  c_cal->add_option("--returns", cal.returns_path, "returns file (csv or binary)");
  c_cal->add_option("--trajectory", cal.traj_path, "trajectory csv");
  c_cal->add_option("--truth", cal.truth_path,
                    "ground-truth json; enables the recovery-error report section");
  add_mount_flags(c_cal, cal.mount, false);
  c_cal->add_option("--grid-halfwidth", cal.grid_halfwidth, "level-0 half-width per axis [deg]")
      ->capture_default_str();
  c_cal->add_option("--grid-step", cal.grid_step, "level-0 step [deg]")->capture_default_str();
  c_cal->add_option("--grid-levels", cal.grid_levels, "refinement levels (>= 1)")
      ->capture_default_str();
  c_cal->add_option("--grid-shrink", cal.grid_shrink, "step divisor per level")
      ->capture_default_str();
  c_cal->add_option("--grid-refine-half-steps", cal.refine_half_steps,
                    "refinement half-width in new-step units")
      ->capture_default_str();
  c_cal->add_option("--grid-center", cal.center, "search center yaw,pitch,roll [deg]")
      ->delimiter(',')
      ->expected(3)
      ->capture_default_str();
  c_cal->add_option("--neighbors", cal.neighbors, "N nearest neighbors")->capture_default_str();
  c_cal->add_option("--skip-radius", cal.skip_radius, "skip neighborhoods wider than this [m]")
      ->capture_default_str();
  c_cal->add_option("--threads", cal.threads, "worker threads (0 = hardware)")
      ->envname("MLSCALIB_THREADS")
      ->capture_default_str();
  c_cal->add_option("--max-window", cal.max_window, "refuse windows longer than this [s]")
      ->capture_default_str();
  c_cal->add_flag("--allow-long", cal.allow_long, "override the window-length refusal");
  c_cal->add_option("--stream-stride", cal.stream_stride,
                    "keep every k-th return before calibrating")
      ->capture_default_str();
  c_cal->add_option("--rescore-candidates", cal.rescore_candidates,
                    "coarse nodes re-scored on the full stream (0 disables)")
      ->capture_default_str();
  c_cal->add_option("--level-stream-strides", cal.level_stream_strides,
                    "per-level extra stream decimation (last repeats)")
      ->delimiter(',')
      ->capture_default_str();
  c_cal->add_option("--level-query-strides", cal.level_query_strides,
                    "per-level scatter query stride (last repeats)")
      ->delimiter(',')
      ->capture_default_str();
  c_cal->add_option("--cell-scale", cal.cell_scale, "voxel cell as multiple of median N-NN radius")
      ->capture_default_str();
  c_cal->add_flag("--no-timestamp", cal.no_timestamp,
                  "omit timestamps and wall time for byte-stable outputs")
      ->envname("MLSCALIB_NO_TIMESTAMP");
  c_cal->add_option("--out", cal.out_dir, "output directory");

  for (CLI::App* sub : {c_sim, c_geo, c_sco, c_cal})
    sub->add_flag("--print-config", print_config, kPrintConfigHelp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (print_config) {
    std::cout << app.config_to_str(true, true);
    return kExitOk;
  }
  cal.mount_given = c_cal->count("--lever") > 0 || c_cal->count("--boresight") > 0;
  sim.duration_set = c_sim->count("--duration") > 0;

  try {
    if (c_sim->parsed()) return cmd_simulate(sim);
    if (c_geo->parsed()) return cmd_georef(geo);
    if (c_sco->parsed()) return cmd_score(sco);
    if (c_cal->parsed()) return cmd_calibrate(cal);
    std::cerr << app.help();
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CoverageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCoverage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
}
