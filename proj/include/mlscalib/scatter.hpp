#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "mlscalib/georef.hpp"
#include "mlscalib/parallel.hpp"

namespace mlscalib {

/// Smallest eigenvalue of a symmetric 3x3 matrix, by the closed-form
/// solution of the characteristic cubic plus a Newton polish. Exact-ish for
/// rank-deficient and diagonal inputs.
inline double smallest_eigenvalue_sym3(double axx, double axy, double axz, double ayy, double ayz,
                                       double azz) {
  const double p1 = axy * axy + axz * axz + ayz * ayz;
  double lmin;
  if (p1 == 0.0) {
    lmin = std::min({axx, ayy, azz});
  } else {
    const double q = (axx + ayy + azz) / 3.0;
    const double bxx = axx - q, byy = ayy - q, bzz = azz - q;
    const double p2 = bxx * bxx + byy * byy + bzz * bzz + 2.0 * p1;
    const double p = std::sqrt(p2 / 6.0);
    // r = det(B/p)/2, clamped against roundoff
    const double det = bxx * (byy * bzz - ayz * ayz) - axy * (axy * bzz - ayz * axz) +
                       axz * (axy * ayz - byy * axz);
    const double r = std::clamp(det / (2.0 * p * p * p), -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    lmin = q + 2.0 * p * std::cos(phi + 2.0 * kPi / 3.0);

    // one or two Newton steps on the monic characteristic cubic
    const double c2 = axx + ayy + azz;
    const double c1 = (axx * ayy - axy * axy) + (axx * azz - axz * axz) + (ayy * azz - ayz * ayz);
    const double c0 = axx * (ayy * azz - ayz * ayz) - axy * (axy * azz - ayz * axz) +
                      axz * (axy * ayz - ayy * axz);
    double f = ((lmin - c2) * lmin + c1) * lmin - c0;
    for (int it = 0; it < 2; ++it) {
      const double fp = (3.0 * lmin - 2.0 * c2) * lmin + c1;
      if (fp == 0.0) break;
      const double next = lmin - f / fp;
      const double fn = ((next - c2) * next + c1) * next - c0;
      if (!(std::abs(fn) < std::abs(f))) break;
      lmin = next;
      f = fn;
    }
  }
  // Roundoff headroom: coplanar neighborhoods far from the origin lose ~7
  // digits to cancellation, so exact zeros come back as small negatives.
  assert(lmin >= -1e-8 * std::max({1.0, std::abs(axx), std::abs(ayy), std::abs(azz)}));
  return lmin < 0.0 ? 0.0 : lmin;
}

struct NeighborHit {
  double d2 = std::numeric_limits<double>::infinity();
  std::uint32_t index = 0;

  // ties broken by lower point index
  bool operator<(const NeighborHit& o) const {
    return d2 < o.d2 || (d2 == o.d2 && index < o.index);
  }
};

/// Uniform voxel grid over a fixed point set with exact k-nearest-neighbor
/// queries via expanding-ring search. Buffers are reused across build() calls.
class VoxelIndex {
 public:
  /// cell_size <= 0 selects it automatically (2x median 1-NN distance of a
  /// 1,000-point sample). The grid is capped at kMaxCells by growing cells.
  void build(std::span<const double> xs, std::span<const double> ys, std::span<const double> zs,
             double cell_size = 0.0) {
    const std::size_t n = xs.size();
    if (n == 0) throw std::invalid_argument("VoxelIndex: empty point set");
    if (n > std::numeric_limits<std::uint32_t>::max() - 1)
      throw std::invalid_argument("VoxelIndex: point set too large");
    min_ = {xs[0], ys[0], zs[0]};
    double maxv[3] = {xs[0], ys[0], zs[0]};
    for (std::size_t i = 1; i < n; ++i) {
      min_[0] = std::min(min_[0], xs[i]);
      min_[1] = std::min(min_[1], ys[i]);
      min_[2] = std::min(min_[2], zs[i]);
      maxv[0] = std::max(maxv[0], xs[i]);
      maxv[1] = std::max(maxv[1], ys[i]);
      maxv[2] = std::max(maxv[2], zs[i]);
    }
    if (cell_size <= 0.0) cell_size = auto_cell_size(xs, ys, zs);
    for (;;) {
      std::size_t ncells = 1;
      for (int a = 0; a < 3; ++a) {
        dims_[a] = static_cast<std::uint32_t>((maxv[a] - min_[a]) / cell_size) + 1;
        ncells *= dims_[a];
      }
      if (ncells <= kMaxCells) break;
      cell_size *= 1.26;  // ~2x fewer cells per doubling of volume
    }
    cell_ = cell_size;
    inv_cell_ = 1.0 / cell_size;

    const std::size_t ncells =
        std::size_t(dims_[0]) * std::size_t(dims_[1]) * std::size_t(dims_[2]);
    cell_start_.assign(ncells + 1, 0);
    for (std::size_t i = 0; i < n; ++i) ++cell_start_[cell_key(xs[i], ys[i], zs[i]) + 1];
    for (std::size_t c = 0; c < ncells; ++c) cell_start_[c + 1] += cell_start_[c];
    xs_.resize(n);
    ys_.resize(n);
    zs_.resize(n);
    order_.resize(n);
    cursor_.assign(cell_start_.begin(), cell_start_.end() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t pos = cursor_[cell_key(xs[i], ys[i], zs[i])]++;
      xs_[pos] = xs[i];
      ys_[pos] = ys[i];
      zs_[pos] = zs[i];
      order_[pos] = static_cast<std::uint32_t>(i);
    }
    n_ = n;
  }

  double cell_size() const { return cell_; }
  std::size_t size() const { return n_; }

  /// Exact k nearest neighbors of (qx,qy,qz), excluding original index
  /// `exclude` (pass a value >= size() to exclude nothing). Results sorted by
  /// (distance, original index). k must be <= size()-1 when excluding.
  void query_knn(double qx, double qy, double qz, std::uint32_t exclude, std::size_t k,
                 std::vector<NeighborHit>& out) const {
    out.clear();
    if (k == 0) return;
    const auto qc = clamped_coords(qx, qy, qz);
    const std::uint32_t max_r =
        std::max({std::max(qc[0], dims_[0] - 1 - qc[0]), std::max(qc[1], dims_[1] - 1 - qc[1]),
                  std::max(qc[2], dims_[2] - 1 - qc[2])});
    for (std::uint32_t r = 0;; ++r) {
      scan_ring(qx, qy, qz, qc, r, exclude, k, out);
      const double ring_bound = static_cast<double>(r) * cell_;
      if (out.size() == k && out.back().d2 < ring_bound * ring_bound) break;
      if (r >= max_r) break;
    }
  }

 private:
  static constexpr std::size_t kMaxCells = std::size_t(1) << 22;

  std::array<std::uint32_t, 3> clamped_coords(double x, double y, double z) const {
    auto coord = [&](double v, int a) {
      const double f = (v - min_[a]) * inv_cell_;
      if (f <= 0.0) return std::uint32_t(0);
      const std::uint32_t c = static_cast<std::uint32_t>(f);
      return std::min(c, dims_[a] - 1);
    };
    return {coord(x, 0), coord(y, 1), coord(z, 2)};
  }

  std::size_t cell_key(double x, double y, double z) const {
    const auto c = clamped_coords(x, y, z);
    return (std::size_t(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
  }

  void scan_cell(std::size_t key, double qx, double qy, double qz, std::uint32_t exclude,
                 std::size_t k, std::vector<NeighborHit>& out) const {
    const std::uint32_t b = cell_start_[key], e = cell_start_[key + 1];
    for (std::uint32_t p = b; p < e; ++p) {
      const std::uint32_t idx = order_[p];
      if (idx == exclude) continue;
      const double dx = xs_[p] - qx, dy = ys_[p] - qy, dz = zs_[p] - qz;
      const NeighborHit hit{dx * dx + dy * dy + dz * dz, idx};
      if (out.size() == k && !(hit < out.back())) continue;
      auto it = std::upper_bound(out.begin(), out.end(), hit);
      if (out.size() == k) out.pop_back();
      out.insert(it, hit);
    }
  }

  void scan_ring(double qx, double qy, double qz, const std::array<std::uint32_t, 3>& qc,
                 std::uint32_t r, std::uint32_t exclude, std::size_t k,
                 std::vector<NeighborHit>& out) const {
    const std::int64_t cx = qc[0], cy = qc[1], cz = qc[2];
    const std::int64_t ri = r;
    // iterate only the in-grid portion of the Chebyshev shell; clamping keeps
    // degenerate (thin) grids O(shell cells) instead of O(r) per ring
    const std::int64_t zlo = std::max<std::int64_t>(cz - ri, 0);
    const std::int64_t zhi = std::min<std::int64_t>(cz + ri, std::int64_t(dims_[2]) - 1);
    const std::int64_t ylo = std::max<std::int64_t>(cy - ri, 0);
    const std::int64_t yhi = std::min<std::int64_t>(cy + ri, std::int64_t(dims_[1]) - 1);
    const std::int64_t xlo = std::max<std::int64_t>(cx - ri, 0);
    const std::int64_t xhi = std::min<std::int64_t>(cx + ri, std::int64_t(dims_[0]) - 1);
    auto scan_xyz = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
      const std::size_t key = (std::size_t(z) * dims_[1] + std::size_t(y)) * dims_[0] +
                              std::size_t(x);
      scan_cell(key, qx, qy, qz, exclude, k, out);
    };
    for (std::int64_t z = zlo; z <= zhi; ++z) {
      const bool z_face = z == cz - ri || z == cz + ri;
      for (std::int64_t y = ylo; y <= yhi; ++y) {
        const bool face = z_face || y == cy - ri || y == cy + ri;
        if (face || r == 0) {
          for (std::int64_t x = xlo; x <= xhi; ++x) scan_xyz(x, y, z);
        } else {
          if (cx - ri >= 0) scan_xyz(cx - ri, y, z);
          if (cx + ri < std::int64_t(dims_[0])) scan_xyz(cx + ri, y, z);
        }
      }
    }
  }

  double auto_cell_size(std::span<const double> xs, std::span<const double> ys,
                        std::span<const double> zs) const {
    const std::size_t n = xs.size();
    if (n < 2) return 1.0;
    // provisional grid with a volume-based cell guess; exactness of the ring
    // search does not depend on the guess
    const double ext[3] = {std::max(1e-12, (std::max_element(xs.begin(), xs.end())[0] - min_[0])),
                           std::max(1e-12, (std::max_element(ys.begin(), ys.end())[0] - min_[1])),
                           std::max(1e-12, (std::max_element(zs.begin(), zs.end())[0] - min_[2]))};
    const double vol = ext[0] * ext[1] * ext[2];
    // the volume guess collapses for flat or collinear clouds; bound it by the
    // largest extent so the provisional grid stays a few hundred cells wide
    const double guess =
        std::max({1e-9, std::cbrt(vol / double(n)), std::max({ext[0], ext[1], ext[2]}) / 512.0});
    VoxelIndex prov;
    prov.build(xs, ys, zs, guess);
    const std::size_t nsample = std::min<std::size_t>(1000, n);
    const std::size_t stride = n / nsample;
    std::vector<double> d1;
    d1.reserve(nsample);
    std::vector<NeighborHit> hit;
    for (std::size_t s = 0; s < nsample; ++s) {
      const std::size_t i = s * stride;
      prov.query_knn(xs[i], ys[i], zs[i], static_cast<std::uint32_t>(i), 1, hit);
      if (!hit.empty() && hit[0].d2 > 0.0) d1.push_back(std::sqrt(hit[0].d2));
    }
    if (d1.empty()) return guess;
    auto mid = d1.begin() + d1.size() / 2;
    std::nth_element(d1.begin(), mid, d1.end());
    return std::max(1e-9, 2.0 * *mid);
  }

  std::array<double, 3> min_{};
  std::array<std::uint32_t, 3> dims_{};
  double cell_ = 1.0;
  double inv_cell_ = 1.0;
  std::size_t n_ = 0;
  std::vector<std::uint32_t> cell_start_;
  std::vector<std::uint32_t> cursor_;
  std::vector<std::uint32_t> order_;
  std::vector<double> xs_, ys_, zs_;
};

/// Smallest covariance eigenvalue of the (N+1)-point set {query} + its N
/// nearest neighbors, population covariance (divisor N+1). Also reports the
/// squared neighborhood radius (query to farthest neighbor).
inline double neighborhood_scatter(std::span<const double> xs, std::span<const double> ys,
                                   std::span<const double> zs, const VoxelIndex& index,
                                   std::size_t query, std::size_t n_neighbors,
                                   std::vector<NeighborHit>& scratch, double* radius2 = nullptr) {
  index.query_knn(xs[query], ys[query], zs[query], static_cast<std::uint32_t>(query), n_neighbors,
                  scratch);
  if (radius2 != nullptr) *radius2 = scratch.empty() ? 0.0 : scratch.back().d2;
  const double m = static_cast<double>(scratch.size() + 1);
  double mx = xs[query], my = ys[query], mz = zs[query];
  for (const NeighborHit& h : scratch) {
    mx += xs[h.index];
    my += ys[h.index];
    mz += zs[h.index];
  }
  mx /= m;
  my /= m;
  mz /= m;
  double cxx = 0, cxy = 0, cxz = 0, cyy = 0, cyz = 0, czz = 0;
  auto accumulate = [&](double x, double y, double z) {
    const double dx = x - mx, dy = y - my, dz = z - mz;
    cxx += dx * dx;
    cxy += dx * dy;
    cxz += dx * dz;
    cyy += dy * dy;
    cyz += dy * dz;
    czz += dz * dz;
  };
  accumulate(xs[query], ys[query], zs[query]);
  for (const NeighborHit& h : scratch) accumulate(xs[h.index], ys[h.index], zs[h.index]);
  return smallest_eigenvalue_sym3(cxx / m, cxy / m, cxz / m, cyy / m, cyz / m, czz / m);
}

struct ScatterOptions {
  std::size_t neighbors = 8;      // N in the local-scatter metric
  std::size_t query_stride = 1;   // evaluate every k-th point
  double skip_radius = 5.0;       // skip neighborhoods wider than this [m]
  unsigned threads = 0;           // 0 = hardware concurrency
  bool collect_lambdas = true;
  std::size_t block_size = 4096;  // fixed reduction granularity
};

/// Average local scatter over a cloud: S = sum(lambda_i1) / (n_q * (N+1)),
/// where n_q counts the evaluated (non-skipped) query points.
struct ScatterReport {
  double S = 0.0;
  std::size_t n_p = 0;         // evaluated query points (normalization count)
  std::size_t cloud_size = 0;
  std::size_t neighbors = 0;   // N
  std::size_t skipped = 0;
  std::vector<double> lambdas;             // per evaluated query, in query order
  std::vector<std::uint32_t> query_index;  // cloud index per lambda entry
};

namespace detail {

struct ScatterSums {
  double lambda_sum = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

/// Deterministic block map-reduce over strided queries. Per-block results are
/// independent of the thread count; the final sum is a fixed pairwise tree.
template <typename PerLambda>
ScatterSums scatter_sums(std::span<const double> xs, std::span<const double> ys,
                         std::span<const double> zs, const VoxelIndex& index,
                         const ScatterOptions& opt, PerLambda&& per_lambda) {
  const std::size_t n = xs.size();
  const std::size_t stride = std::max<std::size_t>(1, opt.query_stride);
  const std::size_t nq = (n + stride - 1) / stride;
  const double skip2 = opt.skip_radius * opt.skip_radius;
  const std::size_t nblocks = (nq + opt.block_size - 1) / opt.block_size;
  std::vector<double> block_sums(nblocks, 0.0);
  std::vector<std::size_t> block_eval(nblocks, 0), block_skip(nblocks, 0);
  parallel_for_blocks(nq, opt.block_size, opt.threads,
                      [&](std::size_t b, std::size_t begin, std::size_t end) {
                        std::vector<NeighborHit> scratch;
                        scratch.reserve(opt.neighbors + 1);
                        std::vector<double> partial;
                        partial.reserve(end - begin);
                        for (std::size_t q = begin; q < end; ++q) {
                          const std::size_t i = q * stride;
                          double r2 = 0.0;
                          const double lambda = neighborhood_scatter(xs, ys, zs, index, i,
                                                                     opt.neighbors, scratch, &r2);
                          if (r2 > skip2) {
                            ++block_skip[b];
                            per_lambda(q, i, lambda, true);
                            continue;
                          }
                          partial.push_back(lambda);
                          ++block_eval[b];
                          per_lambda(q, i, lambda, false);
                        }
                        block_sums[b] = pairwise_sum(std::move(partial));
                      });
  ScatterSums out;
  out.lambda_sum = pairwise_sum(std::move(block_sums));
  for (std::size_t b = 0; b < nblocks; ++b) {
    out.evaluated += block_eval[b];
    out.skipped += block_skip[b];
  }
  return out;
}

}  // namespace detail

/// Aggregated world-frame point cloud with a lazily built spatial index.
class GeoPointCloud {
 public:
  GeoPointCloud() = default;
  explicit GeoPointCloud(std::vector<GeoPoint> points) : points_(std::move(points)) {}

  const std::vector<GeoPoint>& points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  std::span<const double> xs() const { ensure_soa(); return xs_; }
  std::span<const double> ys() const { ensure_soa(); return ys_; }
  std::span<const double> zs() const { ensure_soa(); return zs_; }

  /// Builds (or rebuilds) the spatial index. Single-writer; afterwards the
  /// cloud and index are immutable and queries may run concurrently.
  const VoxelIndex& build_index(double cell_size = 0.0) const {
    ensure_soa();
    if (!index_ || cell_size > 0.0 || index_->size() != points_.size()) {
      index_ = std::make_unique<VoxelIndex>();
      index_->build(xs_, ys_, zs_, cell_size);
    }
    return *index_;
  }

  const VoxelIndex& index() const {
    if (!index_) build_index();
    return *index_;
  }

 private:
  void ensure_soa() const {
    if (xs_.size() == points_.size()) return;
    xs_.resize(points_.size());
    ys_.resize(points_.size());
    zs_.resize(points_.size());
    for (std::size_t i = 0; i < points_.size(); ++i) {
      xs_[i] = points_[i].position.x();
      ys_[i] = points_[i].position.y();
      zs_[i] = points_[i].position.z();
    }
  }

  std::vector<GeoPoint> points_;
  mutable std::vector<double> xs_, ys_, zs_;
  mutable std::unique_ptr<VoxelIndex> index_;
};

/// The N nearest neighbors of cloud point `query_index`, excluding the point
/// itself, sorted by ascending distance with ties broken by lower index.
inline std::vector<std::uint32_t> knn(const GeoPointCloud& cloud, std::size_t query_index,
                                      std::size_t n_neighbors) {
  if (cloud.size() < 2) throw std::invalid_argument("knn: cloud needs at least 2 points");
  if (query_index >= cloud.size()) throw std::invalid_argument("knn: query index out of range");
  if (n_neighbors < 1 || n_neighbors > cloud.size() - 1)
    throw std::invalid_argument("knn: N must be in [1, n_p - 1]");
  std::vector<NeighborHit> hits;
  cloud.index().query_knn(cloud.xs()[query_index], cloud.ys()[query_index],
                          cloud.zs()[query_index], static_cast<std::uint32_t>(query_index),
                          n_neighbors, hits);
  std::vector<std::uint32_t> out(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) out[i] = hits[i].index;
  return out;
}

/// Smallest covariance eigenvalue of {p_i} + its N nearest neighbors.
inline double local_scatter(const GeoPointCloud& cloud, std::size_t query_index,
                            std::size_t n_neighbors) {
  if (n_neighbors < 2) throw std::invalid_argument("local_scatter: N must be >= 2");
  if (cloud.size() < n_neighbors + 1)
    throw std::invalid_argument("local_scatter: cloud smaller than N+1");
  std::vector<NeighborHit> scratch;
  return neighborhood_scatter(cloud.xs(), cloud.ys(), cloud.zs(), cloud.index(), query_index,
                              n_neighbors, scratch);
}

inline ScatterReport average_scatter(const GeoPointCloud& cloud,
                                     const ScatterOptions& opt = {}) {
  const std::size_t n = cloud.size();
  if (opt.neighbors < 2) throw std::invalid_argument("average_scatter: N must be >= 2");
  if (n < opt.neighbors + 1)
    throw std::invalid_argument("average_scatter: cloud smaller than N+1");
  const VoxelIndex& index = cloud.index();

  const std::size_t stride = std::max<std::size_t>(1, opt.query_stride);
  const std::size_t nq = (n + stride - 1) / stride;
  std::vector<double> lambdas;
  std::vector<std::uint32_t> qidx;
  std::vector<std::uint8_t> skipped_flag;
  if (opt.collect_lambdas) {
    lambdas.assign(nq, 0.0);
    qidx.assign(nq, 0);
    skipped_flag.assign(nq, 0);
  }
  auto per_lambda = [&](std::size_t q, std::size_t i, double lambda, bool skipped) {
    if (!opt.collect_lambdas) return;
    lambdas[q] = lambda;
    qidx[q] = static_cast<std::uint32_t>(i);
    skipped_flag[q] = skipped ? 1 : 0;
  };
  const auto sums =
      detail::scatter_sums(cloud.xs(), cloud.ys(), cloud.zs(), index, opt, per_lambda);
  if (sums.evaluated == 0)
    throw std::invalid_argument("average_scatter: every neighborhood exceeded the skip radius");

  ScatterReport report;
  report.S = sums.lambda_sum /
             (static_cast<double>(sums.evaluated) * static_cast<double>(opt.neighbors + 1));
  report.n_p = sums.evaluated;
  report.cloud_size = n;
  report.neighbors = opt.neighbors;
  report.skipped = sums.skipped;
  if (opt.collect_lambdas) {
    report.lambdas.reserve(sums.evaluated);
    report.query_index.reserve(sums.evaluated);
    for (std::size_t q = 0; q < nq; ++q) {
      if (skipped_flag[q]) continue;
      report.lambdas.push_back(lambdas[q]);
      report.query_index.push_back(qidx[q]);
    }
  }
  return report;
}

}  // namespace mlscalib
