#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlscalib/georef.hpp"
#include "mlscalib/simscene.hpp"

namespace mlscalib {

/// Raised on any file-format or filesystem failure; the CLI maps it to exit 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void byteswap_inplace(unsigned char* p, std::size_t n) {
  for (std::size_t i = 0; i < n / 2; ++i) std::swap(p[i], p[n - 1 - i]);
}

template <typename T>
void put_le(std::string& out, T v) {
  std::array<unsigned char, sizeof(T)> buf;
  std::memcpy(buf.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) byteswap_inplace(buf.data(), sizeof(T));
  out.append(reinterpret_cast<const char*>(buf.data()), sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  std::array<unsigned char, sizeof(T)> buf;
  std::memcpy(buf.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) byteswap_inplace(buf.data(), sizeof(T));
  T v;
  std::memcpy(&v, buf.data(), sizeof(T));
  return v;
}

inline std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw IoError("cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path, bool binary) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) throw IoError("cannot open for reading: " + path);
  return f;
}

/// Splits a CSV line on commas and parses every field as a double.
inline bool parse_doubles(const std::string& line, double* out, std::size_t n) {
  const char* p = line.c_str();
  for (std::size_t i = 0; i < n; ++i) {
    char* end = nullptr;
    out[i] = std::strtod(p, &end);
    if (end == p) return false;
    p = end;
    if (i + 1 < n) {
      while (*p == ' ') ++p;
      if (*p != ',') return false;
      ++p;
    }
  }
  while (*p == ' ' || *p == '\r') ++p;
  return *p == '\0';
}

inline void check_stream(const std::ostream& f, const std::string& path) {
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Returns: CSV `t,beam_id,dir_x,dir_y,dir_z,range` or binary `MLSR0001`
// (little-endian 48-byte records: t f64, beam_id u32, reserved u32 = 0,
// dir_x/dir_y/dir_z f64, range f64).
// ---------------------------------------------------------------------------

inline constexpr char kReturnsMagic[9] = "MLSR0001";
inline constexpr std::size_t kReturnsRecordSize = 48;

inline void write_returns_csv(const std::string& path, const std::vector<RawReturn>& returns) {
  auto f = detail::open_out(path, false);
  std::string buf = "t,beam_id,dir_x,dir_y,dir_z,range\n";
  for (const auto& r : returns) {
    buf += detail::format_g17(r.t);
    buf += ',';
    buf += std::to_string(r.beam_id);
    buf += ',';
    buf += detail::format_g17(r.direction.x());
    buf += ',';
    buf += detail::format_g17(r.direction.y());
    buf += ',';
    buf += detail::format_g17(r.direction.z());
    buf += ',';
    buf += detail::format_g17(r.range);
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  detail::check_stream(f, path);
}

inline void write_returns_binary(const std::string& path, const std::vector<RawReturn>& returns) {
  auto f = detail::open_out(path, true);
  std::string buf(kReturnsMagic, 8);
  buf.reserve(1u << 20);
  for (const auto& r : returns) {
    detail::put_le(buf, r.t);
    detail::put_le(buf, r.beam_id);
    detail::put_le(buf, std::uint32_t{0});
    detail::put_le(buf, r.direction.x());
    detail::put_le(buf, r.direction.y());
    detail::put_le(buf, r.direction.z());
    detail::put_le(buf, r.range);
    if (buf.size() > (1u << 20)) {
      f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  detail::check_stream(f, path);
}

/// Reads either format, sniffing the binary magic first.
inline std::vector<RawReturn> read_returns(const std::string& path) {
  auto f = detail::open_in(path, true);
  char magic[8] = {};
  f.read(magic, 8);
  std::vector<RawReturn> out;
  if (f.gcount() == 8 && std::memcmp(magic, kReturnsMagic, 8) == 0) {
    f.seekg(0, std::ios::end);
    const auto end = f.tellg();
    if (end < 8 || (static_cast<std::size_t>(end) - 8) % kReturnsRecordSize != 0)
      throw IoError("truncated binary returns file: " + path);
    const std::size_t n = (static_cast<std::size_t>(end) - 8) / kReturnsRecordSize;
    f.seekg(8);
    out.resize(n);
    std::vector<char> buf(1u << 20);
    std::size_t i = 0;
    while (i < n) {
      const std::size_t chunk = std::min(n - i, buf.size() / kReturnsRecordSize);
      f.read(buf.data(), static_cast<std::streamsize>(chunk * kReturnsRecordSize));
      if (static_cast<std::size_t>(f.gcount()) != chunk * kReturnsRecordSize)
        throw IoError("short read in binary returns file: " + path);
      for (std::size_t j = 0; j < chunk; ++j, ++i) {
        const char* p = buf.data() + j * kReturnsRecordSize;
        RawReturn& r = out[i];
        r.t = detail::get_le<double>(p);
        r.beam_id = detail::get_le<std::uint32_t>(p + 8);
        r.direction = Vec3(detail::get_le<double>(p + 16), detail::get_le<double>(p + 24),
                           detail::get_le<double>(p + 32));
        r.range = detail::get_le<double>(p + 40);
      }
    }
    return out;
  }
  // CSV path
  f.close();
  auto c = detail::open_in(path, false);
  std::string line;
  if (!std::getline(c, line)) return out;  // empty file -> empty stream
  if (line.rfind("t,beam_id,dir_x,dir_y,dir_z,range", 0) != 0)
    throw IoError("unrecognized returns header in " + path + ": " + line);
  std::size_t lineno = 1;
  double v[6];
  while (std::getline(c, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    if (!detail::parse_doubles(line, v, 6))
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed returns row");
    RawReturn r;
    r.t = v[0];
    r.beam_id = static_cast<std::uint32_t>(v[1]);
    r.direction = Vec3(v[2], v[3], v[4]);
    r.range = v[5];
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory: CSV `t,x,y,z,qw,qx,qy,qz`
// ---------------------------------------------------------------------------

inline void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  auto f = detail::open_out(path, false);
  std::string buf = "t,x,y,z,qw,qx,qy,qz\n";
  for (const auto& s : traj.samples()) {
    const Quat q = s.orientation.quaternion();
    buf += detail::format_g17(s.t);
    for (double v : {s.position.x(), s.position.y(), s.position.z(), q.w(), q.x(), q.y(), q.z()}) {
      buf += ',';
      buf += detail::format_g17(v);
    }
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  detail::check_stream(f, path);
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  auto f = detail::open_in(path, false);
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty trajectory file: " + path);
  if (line.rfind("t,x,y,z,qw,qx,qy,qz", 0) != 0)
    throw IoError("unrecognized trajectory header in " + path + ": " + line);
  std::vector<TrajectorySample> samples;
  std::size_t lineno = 1;
  double v[8];
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    if (!detail::parse_doubles(line, v, 8))
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed trajectory row");
    TrajectorySample s;
    s.t = v[0];
    s.position = Vec3(v[1], v[2], v[3]);
    s.orientation = Rotation3::from_quaternion(v[4], v[5], v[6], v[7]);
    samples.push_back(s);
  }
  try {
    return Trajectory(std::move(samples));
  } catch (const std::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Point clouds: PLY (ascii or binary_little_endian) with x,y,z,t,beam_id
// ---------------------------------------------------------------------------

inline void write_cloud_ply(const std::string& path, const std::vector<GeoPoint>& points,
                            bool binary) {
  auto f = detail::open_out(path, true);
  std::string buf = "ply\nformat ";
  buf += binary ? "binary_little_endian" : "ascii";
  buf +=
      " 1.0\nelement vertex " + std::to_string(points.size()) +
      "\nproperty double x\nproperty double y\nproperty double z\nproperty double t\n"
      "property uint beam_id\nend_header\n";
  for (const auto& p : points) {
    if (binary) {
      detail::put_le(buf, p.position.x());
      detail::put_le(buf, p.position.y());
      detail::put_le(buf, p.position.z());
      detail::put_le(buf, p.t);
      detail::put_le(buf, p.beam_id);
    } else {
      buf += detail::format_g17(p.position.x());
      buf += ' ';
      buf += detail::format_g17(p.position.y());
      buf += ' ';
      buf += detail::format_g17(p.position.z());
      buf += ' ';
      buf += detail::format_g17(p.t);
      buf += ' ';
      buf += std::to_string(p.beam_id);
      buf += '\n';
    }
    if (buf.size() > (1u << 20)) {
      f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  detail::check_stream(f, path);
}

inline std::vector<GeoPoint> read_cloud_ply(const std::string& path) {
  auto f = detail::open_in(path, true);
  std::string line;
  if (!std::getline(f, line) || (line != "ply" && line != "ply\r"))
    throw IoError("not a PLY file: " + path);
  bool binary = false;
  std::size_t count = 0;
  std::vector<std::string> props;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "end_header") break;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      ss >> word;
      if (word == "binary_little_endian")
        binary = true;
      else if (word != "ascii")
        throw IoError(path + ": unsupported PLY format " + word);
    } else if (word == "element") {
      std::string what;
      ss >> what >> count;
      if (what != "vertex") throw IoError(path + ": unsupported PLY element " + what);
    } else if (word == "property") {
      std::string type, name;
      ss >> type >> name;
      props.push_back(type + " " + name);
    } else if (word != "comment" && word != "obj_info") {
      throw IoError(path + ": unsupported PLY header line: " + line);
    }
  }
  const std::vector<std::string> want = {"double x", "double y", "double z", "double t",
                                         "uint beam_id"};
  if (props != want) throw IoError(path + ": PLY properties must be x,y,z,t,beam_id doubles+uint");
  std::vector<GeoPoint> out(count);
  if (binary) {
    constexpr std::size_t rec = 4 * sizeof(double) + sizeof(std::uint32_t);
    std::vector<char> buf(count * rec);
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(f.gcount()) != buf.size())
      throw IoError("short read in PLY payload: " + path);
    for (std::size_t i = 0; i < count; ++i) {
      const char* p = buf.data() + i * rec;
      out[i].position = Vec3(detail::get_le<double>(p), detail::get_le<double>(p + 8),
                             detail::get_le<double>(p + 16));
      out[i].t = detail::get_le<double>(p + 24);
      out[i].beam_id = detail::get_le<std::uint32_t>(p + 32);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(f, line)) throw IoError("short PLY payload: " + path);
      std::istringstream ss(line);
      double x, y, z, t;
      std::uint32_t beam;
      if (!(ss >> x >> y >> z >> t >> beam))
        throw IoError(path + ": malformed PLY vertex row " + std::to_string(i));
      out[i].position = Vec3(x, y, z);
      out[i].t = t;
      out[i].beam_id = beam;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth and calibration results (JSON)
// ---------------------------------------------------------------------------

inline void write_ground_truth_json(const std::string& path, const GroundTruth& truth,
                                    const MountConfig& mount) {
  nlohmann::json j;
  j["seed"] = truth.seed;
  j["duration_s"] = truth.duration;
  j["range_noise_sigma_m"] = truth.sigma;
  j["injected_error_deg"] = {truth.injected.yaw, truth.injected.pitch, truth.injected.roll};
  j["correction_to_recover_deg"] = {truth.to_recover.yaw, truth.to_recover.pitch,
                                    truth.to_recover.roll};
  const EulerDeg b = mount.boresight.to_euler();
  j["mount"] = {{"lever_arm_m", {mount.lever_arm.x(), mount.lever_arm.y(), mount.lever_arm.z()}},
                {"boresight_euler_deg", {b.yaw, b.pitch, b.roll}}};
  auto f = detail::open_out(path, false);
  f << j.dump(2) << "\n";
  detail::check_stream(f, path);
}

struct GroundTruthFile {
  EulerDeg injected;
  EulerDeg to_recover;
  MountConfig mount;
  std::uint64_t seed = 0;
  double sigma = 0.0;
  double duration = 0.0;
};

inline GroundTruthFile read_ground_truth_json(const std::string& path) {
  auto f = detail::open_in(path, false);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  try {
    GroundTruthFile g;
    g.seed = j.at("seed").get<std::uint64_t>();
    g.duration = j.at("duration_s").get<double>();
    g.sigma = j.at("range_noise_sigma_m").get<double>();
    auto inj = j.at("injected_error_deg");
    g.injected = {inj.at(0).get<double>(), inj.at(1).get<double>(), inj.at(2).get<double>()};
    auto rec = j.at("correction_to_recover_deg");
    g.to_recover = {rec.at(0).get<double>(), rec.at(1).get<double>(), rec.at(2).get<double>()};
    auto lever = j.at("mount").at("lever_arm_m");
    g.mount.lever_arm =
        Vec3(lever.at(0).get<double>(), lever.at(1).get<double>(), lever.at(2).get<double>());
    auto bs = j.at("mount").at("boresight_euler_deg");
    g.mount.boresight = Rotation3::from_euler(bs.at(0).get<double>(), bs.at(1).get<double>(),
                                              bs.at(2).get<double>());
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace mlscalib
