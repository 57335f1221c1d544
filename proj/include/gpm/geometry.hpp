#pragma once

// Point-cloud partitioning (farthest point sampling + kNN patches) and the
// Chamfer set distance. All distances are evaluated in double precision.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/parallel.hpp"
#include "gpm/common/random.hpp"

namespace gpm {

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  const Point3& operator[](std::size_t i) const { return points[i]; }
  Point3& operator[](std::size_t i) { return points[i]; }
};

/// m centers plus m center-relative groups of k points.
struct PatchSet {
  std::size_t m = 0;
  std::size_t k = 0;
  std::vector<std::size_t> center_indices;               // into the source cloud, FPS order
  std::vector<Point3> centers;                           // m
  std::vector<Point3> patches;                           // m*k, row-major by patch
  std::vector<std::size_t> source_indices;               // m*k

  std::span<const Point3> patch(std::size_t i) const { return {patches.data() + i * k, k}; }
  std::span<const std::size_t> indices(std::size_t i) const { return {source_indices.data() + i * k, k}; }
};

enum class ChamferNorm { euclidean, manhattan };

inline double distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline double manhattan(const Point3& a, const Point3& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

inline bool all_finite(const PointCloud& cloud) {
  return std::all_of(cloud.points.begin(), cloud.points.end(), [](const Point3& p) {
    return std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2]);
  });
}

/// Greedy farthest point sampling starting from a given index.
inline std::vector<std::size_t> fps_from(const PointCloud& cloud, std::size_t m, std::size_t first) {
  const std::size_t n = cloud.size();
  if (n == 0) throw InvalidArgument("fps: empty cloud");
  if (m < 1 || m > n) throw InvalidArgument("fps: need 1 <= m <= N, got m=" + std::to_string(m) + " N=" + std::to_string(n));
  if (first >= n) throw InvalidArgument("fps: first index out of range");

  std::vector<std::size_t> picked;
  picked.reserve(m);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = first;
  for (std::size_t step = 0; step < m; ++step) {
    picked.push_back(current);
    taken[current] = 1;
    if (step + 1 == m) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], distance(cloud[i], cloud[current]));
      if (min_dist[i] > best_d) {  // strict: the lowest index wins ties
        best_d = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return picked;
}

/// FPS with the first index drawn uniformly from a generator seeded by `seed`.
inline std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t m, std::uint64_t seed) {
  if (cloud.empty()) throw InvalidArgument("fps: empty cloud");
  Rng rng = make_rng(seed, {0xF95ULL});
  return fps_from(cloud, m, uniform_index(rng, cloud.size()));
}

/// Indices of the k smallest values of dist(i), ties broken by lowest index.
template <class DistFn>
std::vector<std::size_t> k_smallest(std::size_t n, std::size_t k, DistFn&& dist) {
  std::vector<std::pair<double, std::size_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) keyed[i] = {dist(i), i};
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = keyed[i].second;
  return out;
}

/// The k nearest points to cloud[center_index], including the center itself.
inline std::vector<std::size_t> knn_patch(const PointCloud& cloud, std::size_t center_index, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k > n) throw InvalidArgument("knn_patch: k=" + std::to_string(k) + " exceeds N=" + std::to_string(n));
  if (center_index >= n) throw InvalidArgument("knn_patch: center index out of range");
  const Point3& c = cloud[center_index];
  return k_smallest(n, k, [&](std::size_t i) { return distance(cloud[i], c); });
}

inline PatchSet build_patches(const PointCloud& cloud, std::size_t m, std::size_t k, std::uint64_t seed) {
  if (k > cloud.size()) throw InvalidArgument("build_patches: k exceeds cloud size");
  PatchSet ps;
  ps.m = m;
  ps.k = k;
  ps.center_indices = fps(cloud, m, seed);
  ps.centers.resize(m);
  ps.patches.resize(m * k);
  ps.source_indices.resize(m * k);
  parallel_for(m, [&](std::size_t p) {
    const std::size_t ci = ps.center_indices[p];
    const Point3 c = cloud[ci];
    ps.centers[p] = c;
    const auto nn = knn_patch(cloud, ci, k);
    for (std::size_t j = 0; j < k; ++j) {
      const Point3& q = cloud[nn[j]];
      ps.source_indices[p * k + j] = nn[j];
      ps.patches[p * k + j] = {q[0] - c[0], q[1] - c[1], q[2] - c[2]};
    }
  }, 4);
  return ps;
}

/// For each point of `from`, the index of its nearest point in `to`
/// (lowest index on ties) and that distance.
inline void nearest_neighbors(std::span<const Point3> from, std::span<const Point3> to, ChamferNorm norm,
                              std::vector<std::size_t>& idx, std::vector<double>& dist) {
  idx.assign(from.size(), 0);
  dist.assign(from.size(), 0.0);
  parallel_for(from.size(), [&](std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    const Point3& p = from[i];
    for (std::size_t j = 0; j < to.size(); ++j) {
      const double d = norm == ChamferNorm::euclidean ? distance(p, to[j]) : manhattan(p, to[j]);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    idx[i] = arg;
    dist[i] = best;
  }, 128);
}

/// Symmetric Chamfer distance with non-squared norms:
/// mean_p min_g |p-g| + mean_g min_p |g-p|.
inline double chamfer_l1(std::span<const Point3> pred, std::span<const Point3> truth,
                         ChamferNorm norm = ChamferNorm::euclidean) {
  if (pred.empty() || truth.empty()) throw InvalidArgument("chamfer_l1: empty cloud");
  std::vector<std::size_t> idx;
  std::vector<double> d;
  nearest_neighbors(pred, truth, norm, idx, d);
  double a = 0.0;
  for (double v : d) a += v;
  nearest_neighbors(truth, pred, norm, idx, d);
  double b = 0.0;
  for (double v : d) b += v;
  return a / static_cast<double>(pred.size()) + b / static_cast<double>(truth.size());
}

inline double chamfer_l1(const PointCloud& pred, const PointCloud& truth, ChamferNorm norm = ChamferNorm::euclidean) {
  return chamfer_l1(std::span<const Point3>(pred.points), std::span<const Point3>(truth.points), norm);
}

}  // namespace gpm
