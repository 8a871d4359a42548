#pragma once

// Brute-force and independently-derived reference implementations used only
// by the test and acceptance suites. Deliberately slow and obvious.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "mlscalib/geometry.hpp"

namespace oracle {

using mlscalib::Mat3;
using mlscalib::Vec3;

/// Z-Y-X intrinsic Euler matrix written out entry by entry (independent of
/// any quaternion or AngleAxis machinery).
inline Mat3 euler_zyx_matrix(double yaw_deg, double pitch_deg, double roll_deg) {
  const double cy = std::cos(mlscalib::deg2rad(yaw_deg)), sy = std::sin(mlscalib::deg2rad(yaw_deg));
  const double cp = std::cos(mlscalib::deg2rad(pitch_deg)),
               sp = std::sin(mlscalib::deg2rad(pitch_deg));
  const double cr = std::cos(mlscalib::deg2rad(roll_deg)),
               sr = std::sin(mlscalib::deg2rad(roll_deg));
  Mat3 m;
  m << cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,  //
      sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,   //
      -sp, cp * sr, cp * cr;
  return m;
}

/// Linear-scan k-nearest-neighbors, ties broken by lower index.
inline std::vector<std::uint32_t> brute_knn(const std::vector<Vec3>& pts, std::size_t query,
                                            std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> d;
  d.reserve(pts.size() - 1);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i == query) continue;
    d.emplace_back((pts[i] - pts[query]).squaredNorm(), static_cast<std::uint32_t>(i));
  }
  const std::size_t take = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take), d.end());
  d.resize(take);
  std::vector<std::uint32_t> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i].second;
  return out;
}

/// Smallest eigenvalue of the population covariance of a point set, via
/// Eigen's dense symmetric eigensolver.
inline double smallest_cov_eigenvalue(const std::vector<Vec3>& pts) {
  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : pts) {
    const Vec3 d = p - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(pts.size());
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  return es.eigenvalues()(0);
}

inline double brute_local_scatter(const std::vector<Vec3>& pts, std::size_t query, std::size_t n) {
  const auto nn = brute_knn(pts, query, n);
  std::vector<Vec3> hood;
  hood.push_back(pts[query]);
  for (auto i : nn) hood.push_back(pts[i]);
  return smallest_cov_eigenvalue(hood);
}

struct BruteScatter {
  double S = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

/// Average local scatter evaluated the slow way: linear-scan kNN, dense
/// eigensolver, straight left-to-right summation.
inline BruteScatter brute_average_scatter(const std::vector<Vec3>& pts, std::size_t n,
                                          std::size_t query_stride = 1,
                                          double skip_radius = 5.0) {
  BruteScatter out;
  long double sum = 0.0L;
  for (std::size_t q = 0; q < pts.size(); q += query_stride) {
    const auto nn = brute_knn(pts, q, n);
    const double worst = (pts[nn.back()] - pts[q]).norm();
    if (worst > skip_radius) {
      ++out.skipped;
      continue;
    }
    std::vector<Vec3> hood;
    hood.push_back(pts[q]);
    for (auto i : nn) hood.push_back(pts[i]);
    sum += smallest_cov_eigenvalue(hood);
    ++out.evaluated;
  }
  out.S = static_cast<double>(sum) /
          (static_cast<double>(out.evaluated) * static_cast<double>(n + 1));
  return out;
}

/// Ray-rectangle intersection solved as the 3x3 linear system
/// origin + s*dir = corner + a*eu + b*ev via Cramer's rule.
inline std::optional<double> ray_rect_cramer(const Vec3& origin, const Vec3& dir,
                                             const Vec3& corner, const Vec3& eu, const Vec3& ev,
                                             double max_s) {
  Mat3 A;
  A.col(0) = dir;
  A.col(1) = -eu;
  A.col(2) = -ev;
  const double det = A.determinant();
  if (std::abs(det) < 1e-14) return std::nullopt;
  const Vec3 rhs = corner - origin;
  Mat3 As = A, Aa = A, Ab = A;
  As.col(0) = rhs;
  Aa.col(1) = rhs;
  Ab.col(2) = rhs;
  const double s = As.determinant() / det;
  const double a = Aa.determinant() / det;
  const double b = Ab.determinant() / det;
  if (s <= 0.0 || s > max_s || a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0) return std::nullopt;
  return s;
}

}  // namespace oracle
