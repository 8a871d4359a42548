#include <sys/wait.h>

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mlscalib/calib.hpp"
#include "mlscalib/io.hpp"
#include "mlscalib/simscene.hpp"

using namespace mlscalib;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mlscalib_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Small returns vector with adversarial doubles for round-trip checks.
std::vector<RawReturn> sample_returns() {
  std::vector<RawReturn> out;
  const double ranges[] = {12.345678901234567, 1e-3, 99.99999999999999, 250.0, 7.25,
                           0.30000000000000004, 123.45600000000002};
  for (std::uint32_t i = 0; i < 7; ++i) {
    RawReturn r;
    r.t = 0.1 + 0.01 * static_cast<double>(i) + 1e-13;
    r.beam_id = i * 9 + 1;
    r.direction = Vec3(0.1 * static_cast<double>(i) - 0.3, 0.2, 0.9).normalized();
    r.range = ranges[i];
    out.push_back(r);
  }
  return out;
}

Trajectory sample_trajectory() {
  std::vector<TrajectorySample> samples;
  for (int i = 0; i < 5; ++i) {
    TrajectorySample s;
    s.t = 0.25 * static_cast<double>(i);
    s.position = Vec3(1.5 * i, -0.25 * i, 0.1 * i * i);
    s.orientation = Rotation3::from_euler(10.0 * i, 3.0 * i, -2.0 * i);
    samples.push_back(s);
  }
  return Trajectory(std::move(samples));
}

struct CliResult {
  int code = -1;
  std::string out;  // stdout + stderr
};

CliResult run_cli(const std::string& args) {
  static int serial = 0;
  const fs::path log =
      fs::temp_directory_path() / ("mlscalib_cli_log_" + std::to_string(serial++) + ".txt");
  const std::string cmd =
      std::string(MLSCALIB_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  fs::remove(log);
  return r;
}

std::string triple_arg(const EulerDeg& e) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", e.yaw, e.pitch, e.roll);
  return buf;
}

// Cached tiny simulated run shared by the CLI pipeline tests.
const fs::path& sim_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch_dir("sim_shared");
    const CliResult r = run_cli("simulate --scenario standard --seed 5 --duration 0.4 "
                                "--format binary --out " +
                                d.string());
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("returns csv round-trip is bit-exact", "[io]") {
  const fs::path dir = scratch_dir("returns_csv");
  const auto ret = sample_returns();
  write_returns_csv((dir / "r.csv").string(), ret);
  const auto back = read_returns((dir / "r.csv").string());
  REQUIRE(back.size() == ret.size());
  for (std::size_t i = 0; i < ret.size(); ++i) {
    CHECK(same_bits(back[i].t, ret[i].t));
    CHECK(back[i].beam_id == ret[i].beam_id);
    CHECK(same_bits(back[i].direction.x(), ret[i].direction.x()));
    CHECK(same_bits(back[i].direction.y(), ret[i].direction.y()));
    CHECK(same_bits(back[i].direction.z(), ret[i].direction.z()));
    CHECK(same_bits(back[i].range, ret[i].range));
  }
  fs::remove_all(dir);
}

TEST_CASE("returns binary round-trip is bit-exact and sized", "[io]") {
  const fs::path dir = scratch_dir("returns_bin");
  const auto ret = sample_returns();
  write_returns_binary((dir / "r.bin").string(), ret);
  CHECK(fs::file_size(dir / "r.bin") == 8 + kReturnsRecordSize * ret.size());
  const auto back = read_returns((dir / "r.bin").string());
  REQUIRE(back.size() == ret.size());
  for (std::size_t i = 0; i < ret.size(); ++i) {
    CHECK(same_bits(back[i].t, ret[i].t));
    CHECK(back[i].beam_id == ret[i].beam_id);
    CHECK(same_bits(back[i].direction.x(), ret[i].direction.x()));
    CHECK(same_bits(back[i].range, ret[i].range));
  }
  fs::remove_all(dir);
}

TEST_CASE("returns reader failure modes", "[io]") {
  const fs::path dir = scratch_dir("returns_bad");
  CHECK_THROWS_AS(read_returns((dir / "missing.csv").string()), IoError);

  {
    std::ofstream f(dir / "bad_header.csv");
    f << "time,beam,x,y,z,r\n1,2,3,4,5,6\n";
  }
  CHECK_THROWS_AS(read_returns((dir / "bad_header.csv").string()), IoError);

  {
    std::ofstream f(dir / "bad_row.csv");
    f << "t,beam_id,dir_x,dir_y,dir_z,range\n0.1,0,0,0,1,5\n0.2,oops,0,0,1,5\n";
  }
  CHECK_THROWS_AS(read_returns((dir / "bad_row.csv").string()), IoError);

  write_returns_binary((dir / "trunc.bin").string(), sample_returns());
  {
    std::ofstream f(dir / "trunc.bin", std::ios::binary | std::ios::app);
    f << "xyz";  // 3 stray bytes break the record alignment
  }
  CHECK_THROWS_AS(read_returns((dir / "trunc.bin").string()), IoError);

  {
    std::ofstream f(dir / "empty.csv");
  }
  CHECK(read_returns((dir / "empty.csv").string()).empty());

  {
    std::ofstream f(dir / "header_only.csv");
    f << "t,beam_id,dir_x,dir_y,dir_z,range\n";
  }
  CHECK(read_returns((dir / "header_only.csv").string()).empty());
  fs::remove_all(dir);
}

TEST_CASE("trajectory csv round-trip", "[io]") {
  const fs::path dir = scratch_dir("traj");
  const Trajectory traj = sample_trajectory();
  write_trajectory_csv((dir / "t.csv").string(), traj);
  const Trajectory back = read_trajectory_csv((dir / "t.csv").string());
  REQUIRE(back.size() == traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const auto& a = traj.samples()[i];
    const auto& b = back.samples()[i];
    CHECK(same_bits(a.t, b.t));
    CHECK(same_bits(a.position.x(), b.position.x()));
    CHECK(same_bits(a.position.y(), b.position.y()));
    CHECK(same_bits(a.position.z(), b.position.z()));
    // quaternions go through one normalization on read
    const Quat qa = a.orientation.quaternion(), qb = b.orientation.quaternion();
    CHECK(std::abs(qa.w() - qb.w()) < 1e-15);
    CHECK(std::abs(qa.x() - qb.x()) < 1e-15);
    CHECK(std::abs(qa.y() - qb.y()) < 1e-15);
    CHECK(std::abs(qa.z() - qb.z()) < 1e-15);
  }

  {
    std::ofstream f(dir / "bad.csv");
    f << "t,x,y,z,qw,qx,qy,qz\n0,0,0,0,1,0,0\n";  // seven fields
  }
  CHECK_THROWS_AS(read_trajectory_csv((dir / "bad.csv").string()), IoError);
  {
    std::ofstream f(dir / "short.csv");
    f << "t,x,y,z,qw,qx,qy,qz\n0,0,0,0,1,0,0,0\n";  // one sample cannot interpolate
  }
  CHECK_THROWS_AS(read_trajectory_csv((dir / "short.csv").string()), IoError);
  CHECK_THROWS_AS(read_trajectory_csv((dir / "missing.csv").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("ply round-trips in both formats", "[io]") {
  const fs::path dir = scratch_dir("ply");
  std::vector<GeoPoint> pts;
  for (int i = 0; i < 9; ++i) {
    GeoPoint p;
    p.position = Vec3(1e5 + 0.123456789 * i, -47.5 + i, 0.25 * i * i + 1e-7);
    p.t = 1.75 + 0.001 * i;
    p.beam_id = static_cast<std::uint32_t>(i * 7);
    pts.push_back(p);
  }
  for (const bool binary : {false, true}) {
    const fs::path path = dir / (binary ? "c.bin.ply" : "c.ascii.ply");
    write_cloud_ply(path.string(), pts, binary);
    const auto back = read_cloud_ply(path.string());
    REQUIRE(back.size() == pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(same_bits(back[i].position.x(), pts[i].position.x()));
      CHECK(same_bits(back[i].position.y(), pts[i].position.y()));
      CHECK(same_bits(back[i].position.z(), pts[i].position.z()));
      CHECK(same_bits(back[i].t, pts[i].t));
      CHECK(back[i].beam_id == pts[i].beam_id);
    }
  }
  const std::string header = slurp(dir / "c.ascii.ply");
  CHECK(header.rfind("ply\nformat ascii 1.0\n", 0) == 0);

  {
    std::ofstream f(dir / "bad.ply");
    f << "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
  }
  CHECK_THROWS_AS(read_cloud_ply((dir / "bad.ply").string()), IoError);
  {
    std::ofstream f(dir / "short.ply");
    f << "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\n"
         "property double z\nproperty double t\nproperty uint beam_id\nend_header\n"
         "0 0 0 0 0\n";
  }
  CHECK_THROWS_AS(read_cloud_ply((dir / "short.ply").string()), IoError);
  CHECK_THROWS_AS(read_cloud_ply((dir / "missing.ply").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("ground truth json round-trip", "[io]") {
  const fs::path dir = scratch_dir("gt");
  GroundTruth truth;
  truth.injected = {0.61234567890123, -0.4987654321, 0.25};
  truth.to_recover = Rotation3::from_euler(truth.injected).inverse().to_euler();
  truth.seed = 123456789012345ull;
  truth.sigma = 0.02;
  truth.duration = 20.0;
  const MountConfig mount = standard_mount();
  write_ground_truth_json((dir / "gt.json").string(), truth, mount);
  const GroundTruthFile back = read_ground_truth_json((dir / "gt.json").string());
  CHECK(back.seed == truth.seed);
  CHECK(back.sigma == truth.sigma);
  CHECK(back.duration == truth.duration);
  CHECK(same_bits(back.injected.yaw, truth.injected.yaw));
  CHECK(same_bits(back.injected.pitch, truth.injected.pitch));
  CHECK(same_bits(back.injected.roll, truth.injected.roll));
  CHECK(same_bits(back.to_recover.yaw, truth.to_recover.yaw));
  CHECK(back.mount.lever_arm.x() == Approx(mount.lever_arm.x()).margin(1e-15));
  CHECK(back.mount.lever_arm.z() == Approx(mount.lever_arm.z()).margin(1e-15));
  // boresight goes through Euler angles once
  const Mat3 d = back.mount.boresight.matrix() - mount.boresight.matrix();
  CHECK(d.cwiseAbs().maxCoeff() < 1e-12);

  {
    std::ofstream f(dir / "bad.json");
    f << "{\"seed\": 1}\n";
  }
  CHECK_THROWS_AS(read_ground_truth_json((dir / "bad.json").string()), IoError);
  {
    std::ofstream f(dir / "notjson.json");
    f << "not json at all\n";
  }
  CHECK_THROWS_AS(read_ground_truth_json((dir / "notjson.json").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("cli: simulate writes a readable self-consistent bundle", "[cli]") {
  const fs::path& dir = sim_dir();
  const auto returns = read_returns((dir / "returns.bin").string());
  const Trajectory traj = read_trajectory_csv((dir / "trajectory.csv").string());
  const GroundTruthFile truth = read_ground_truth_json((dir / "ground_truth.json").string());
  CHECK(returns.size() > 100000);  // 0.4 s of the default scanner
  CHECK(traj.size() > 50);
  CHECK(truth.seed == 5);
  CHECK(truth.sigma == Approx(0.02));
  // injected and to_recover are mutual inverses
  const Mat3 prod =
      Rotation3::from_euler(truth.injected).matrix() * Rotation3::from_euler(truth.to_recover).matrix();
  CHECK((prod - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  for (const RawReturn& r : returns) {
    REQUIRE(r.t >= 0.0);
    REQUIRE(r.t <= 0.4);
  }
}

TEST_CASE("cli: georef-score pipeline matches the library", "[cli]") {
  const fs::path& dir = sim_dir();
  const GroundTruthFile truth = read_ground_truth_json((dir / "ground_truth.json").string());
  char lever[128];
  std::snprintf(lever, sizeof(lever), "%.17g,%.17g,%.17g", truth.mount.lever_arm.x(),
                truth.mount.lever_arm.y(), truth.mount.lever_arm.z());
  const std::string boresight = triple_arg(truth.mount.boresight.to_euler());
  const std::string rc = triple_arg(truth.to_recover);

  const fs::path cloud = dir / "cloud.ply";
  const CliResult g = run_cli("georef --returns " + (dir / "returns.bin").string() +
                              " --trajectory " + (dir / "trajectory.csv").string() + " --lever " +
                              lever + " --boresight " + boresight + " --rc " + rc + " --out " +
                              cloud.string());
  REQUIRE(g.code == 0);
  CHECK(g.out.find("georeferenced:") != std::string::npos);

  const CliResult s = run_cli("score --cloud " + cloud.string() + " --query-stride 7");
  REQUIRE(s.code == 0);
  const auto pos = s.out.find("S = ");
  REQUIRE(pos != std::string::npos);
  const double cli_S = std::strtod(s.out.c_str() + pos + 4, nullptr);

  // same computation through the library on the same files
  MountConfig mount = truth.mount;
  mount.correction = Rotation3::from_euler(truth.to_recover);
  const auto returns = read_returns((dir / "returns.bin").string());
  const Trajectory traj = read_trajectory_csv((dir / "trajectory.csv").string());
  auto points = georeference_stream(returns, traj, mount).first;
  GeoPointCloud pc(std::move(points));
  ScatterOptions opt;
  opt.query_stride = 7;
  opt.collect_lambdas = false;
  const double lib_S = average_scatter(pc, opt).S;
  CHECK(cli_S == Approx(lib_S).epsilon(1e-12));

  // scoring the raw stream directly must agree with the cloud path
  const CliResult s2 = run_cli("score --returns " + (dir / "returns.bin").string() +
                               " --trajectory " + (dir / "trajectory.csv").string() + " --lever " +
                               lever + " --boresight " + boresight + " --rc " + rc +
                               " --query-stride 7");
  REQUIRE(s2.code == 0);
  const auto pos2 = s2.out.find("S = ");
  REQUIRE(pos2 != std::string::npos);
  const double cli_S2 = std::strtod(s2.out.c_str() + pos2 + 4, nullptr);
  CHECK(cli_S2 == Approx(lib_S).epsilon(1e-12));
}

TEST_CASE("cli: georef edge cases", "[cli]") {
  const fs::path dir = scratch_dir("georef_edge");
  write_trajectory_csv((dir / "t.csv").string(), sample_trajectory());

  // no returns at all: warn, write an empty cloud, exit 0
  write_returns_csv((dir / "empty.csv").string(), {});
  const CliResult e = run_cli("georef --returns " + (dir / "empty.csv").string() +
                              " --trajectory " + (dir / "t.csv").string() + " --out " +
                              (dir / "empty.ply").string());
  CHECK(e.code == 0);
  CHECK(e.out.find("warning") != std::string::npos);
  CHECK(read_cloud_ply((dir / "empty.ply").string()).empty());

  // returns entirely outside the trajectory span: coverage failure, exit 3
  auto ret = sample_returns();
  for (RawReturn& r : ret) r.t += 100.0;
  write_returns_csv((dir / "late.csv").string(), ret);
  const CliResult c = run_cli("georef --returns " + (dir / "late.csv").string() +
                              " --trajectory " + (dir / "t.csv").string() + " --out " +
                              (dir / "late.ply").string());
  CHECK(c.code == 3);
  CHECK(c.out.find("covers none") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cli: exit codes for bad input", "[cli]") {
  const fs::path dir = scratch_dir("exit_codes");
  write_trajectory_csv((dir / "t.csv").string(), sample_trajectory());

  // 2: missing file
  CHECK(run_cli("calibrate --returns " + (dir / "nope.bin").string() + " --trajectory " +
                (dir / "t.csv").string() + " --out " + (dir / "o").string())
            .code == 2);
  // 4: too few points to score
  const auto sr = sample_returns();
  write_returns_csv((dir / "few.csv").string(), {sr.begin(), sr.begin() + 3});
  CHECK(run_cli("score --returns " + (dir / "few.csv").string() + " --trajectory " +
                (dir / "t.csv").string())
            .code == 4);
  // 5: usage errors
  CHECK(run_cli("simulate").code == 5);                       // missing --out
  CHECK(run_cli("--definitely-not-a-flag").code == 5);        // parse error
  CHECK(run_cli("").code == 5);                               // no subcommand
  CHECK(run_cli("score --cloud a.ply --returns b.csv").code == 5);
  CHECK(run_cli("calibrate --returns " + (dir / "few.csv").string() + " --trajectory " +
                (dir / "t.csv").string() + " --out " + (dir / "o").string() + " --grid-step 0")
            .code == 5);
  CHECK(run_cli("simulate --scenario warp --out " + dir.string()).code == 5);
  fs::remove_all(dir);
}

TEST_CASE("cli: calibrate writes stable outputs", "[cli]") {
  const fs::path& sim = sim_dir();
  const fs::path out1 = scratch_dir("calib_out1");
  const fs::path out2 = scratch_dir("calib_out2");
  const std::string common =
      "calibrate --returns " + (sim / "returns.bin").string() + " --trajectory " +
      (sim / "trajectory.csv").string() + " --truth " + (sim / "ground_truth.json").string() +
      " --stream-stride 97 --grid-halfwidth 0.1 --grid-step 0.1 --grid-levels 1 " +
      "--rescore-candidates 8 --level-stream-strides 2,1 --level-query-strides 5,2 " +
      "--threads 1 --no-timestamp --out ";

  const CliResult a = run_cli(common + out1.string());
  REQUIRE(a.code == 0);
  CHECK(a.out.find("best correction (deg):") != std::string::npos);
  CHECK(a.out.find("recovery error (deg):") != std::string::npos);
  CHECK(a.out.find("warning status:") != std::string::npos);
  CHECK(a.out.find("reference: a 0.6 deg boresight error displaces a 100 m point by 1.0471928 m") !=
        std::string::npos);
  CHECK(a.out.find("reference: a 0.1 deg boresight error displaces a 100 m point by 0.1745329 m") !=
        std::string::npos);

  // 3^3 coarse nodes + 8 rescores, plus the csv header
  const std::string table = slurp(out1 / "score_table.csv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 27 + 8 + 1);

  const CliResult b = run_cli(common + out2.string());
  REQUIRE(b.code == 0);
  CHECK(slurp(out1 / "score_table.csv") == slurp(out2 / "score_table.csv"));
  CHECK(slurp(out1 / "result.json") == slurp(out2 / "result.json"));
  CHECK(slurp(out1 / "report.txt") == slurp(out2 / "report.txt"));

  // the mount was adopted from the ground-truth file and the report says so
  CHECK(a.out.find("[from ground-truth file]") != std::string::npos);
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("cli: print-config lists defaults", "[cli]") {
  const CliResult r = run_cli("calibrate --print-config");
  CHECK(r.code == 0);
  CHECK(r.out.find("stream-stride") != std::string::npos);
  CHECK(r.out.find("241") != std::string::npos);
  const CliResult top = run_cli("--print-config");
  CHECK(top.code == 0);
}
