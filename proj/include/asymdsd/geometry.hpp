#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "asymdsd/common.hpp"
#include "asymdsd/rng.hpp"
#include "asymdsd/tensor.hpp"

namespace asymdsd::geometry {

// One shape: N x 3 positions plus an optional N x F feature block.
struct PointCloud {
  Tensor positions;  // (N, 3)
  Tensor features;   // (N, F), F may be 0

  int size() const { return positions.rows(); }
  int feature_dim() const { return features.numel() == 0 ? 0 : features.cols(); }

  static PointCloud of(std::vector<float> xyz) {
    PointCloud pc;
    const int n = int(xyz.size()) / 3;
    pc.positions = Tensor::from({n, 3}, std::move(xyz));
    return pc;
  }

  void validate() const {
    check(positions.rows() >= 1, "point cloud: N >= 1 required");
    check(positions.cols() == 3, "point cloud: positions must be N x 3");
    check(positions.all_finite(), "point cloud: non-finite position");
    if (features.numel() > 0) {
      check(features.rows() == positions.rows(),
            "point cloud: feature row count mismatch");
      check(features.all_finite(), "point cloud: non-finite feature");
    }
  }
};

// Local point groups re-centered on their patch centers.
struct PatchSet {
  int n_patches = 0;
  int points_per_patch = 0;
  int point_dim = 3;          // 3 + F
  Tensor patch_points;        // (n_patches * K, 3 + F), patch-major rows
  Tensor centers;             // (n_patches, 3)
  std::vector<int> center_indices;  // indices of centers in the source cloud
};

enum class CropKind { kGlobal, kLocal };

struct CropSpec {
  CropKind kind = CropKind::kGlobal;
  float c_min = 0.4f;
  float c_max = 1.0f;
  int target_points = 1024;
  int target_patches = 64;

  void validate() const {
    check(c_min > 0.f && c_min <= c_max && c_max <= 1.f,
          "crop spec: fraction range must satisfy 0 < min <= max <= 1");
    if (kind == CropKind::kGlobal)
      check(c_min >= 0.4f, "crop spec: global fraction range must be within [0.4, 1.0]");
    else
      check(c_min >= 0.05f && c_max <= 0.4f,
            "crop spec: local fraction range must be within [0.05, 0.4]");
    check(target_points >= target_patches,
          "crop spec: target_points must be >= target_patches");
  }
};

// ---- normalization and augmentation ----

// Centroid to origin, max norm scaled to 1. A degenerate cloud (all points
// identical) collapses to the origin instead of dividing by zero.
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  cloud.validate();
  const int n = cloud.size();
  PointCloud out = cloud;
  double cx = 0, cy = 0, cz = 0;
  for (int i = 0; i < n; ++i) {
    cx += cloud.positions.at(i, 0);
    cy += cloud.positions.at(i, 1);
    cz += cloud.positions.at(i, 2);
  }
  cx /= n; cy /= n; cz /= n;
  double max_norm = 0;
  for (int i = 0; i < n; ++i) {
    float* p = out.positions.row(i);
    p[0] = float(p[0] - cx);
    p[1] = float(p[1] - cy);
    p[2] = float(p[2] - cz);
    max_norm = std::max(max_norm, double(p[0]) * p[0] + double(p[1]) * p[1] +
                                      double(p[2]) * p[2]);
  }
  max_norm = std::sqrt(max_norm);
  if (max_norm < 1e-12) {
    for (auto& v : out.positions.data) v = 0.f;
    return out;
  }
  const float inv = float(1.0 / max_norm);
  for (auto& v : out.positions.data) v *= inv;
  return out;
}

// Deterministic core of augment: rotate about z by `angle`, then scale each
// axis independently.
inline PointCloud augment_with(const PointCloud& cloud, float angle,
                               std::array<float, 3> scales) {
  const float ca = std::cos(angle), sa = std::sin(angle);
  PointCloud out = cloud;
  for (int i = 0; i < cloud.size(); ++i) {
    const float* p = cloud.positions.row(i);
    float* q = out.positions.row(i);
    q[0] = (ca * p[0] - sa * p[1]) * scales[0];
    q[1] = (sa * p[0] + ca * p[1]) * scales[1];
    q[2] = p[2] * scales[2];
  }
  return out;
}

// Rotation angle uniform in [0, 2 pi), per-axis scales uniform in [0.8, 1.2].
inline PointCloud augment(const PointCloud& cloud, Rng& rng) {
  const float angle = float(rng.uniform(0.0, 2.0 * std::numbers::pi));
  std::array<float, 3> scales;
  for (auto& s : scales) s = float(rng.uniform(0.8, 1.2));
  return augment_with(cloud, angle, scales);
}

// ---- sampling ----

// Farthest point sampling. First pick is start_index; every later pick
// maximizes the minimum distance to the already-selected set, ties broken
// by lowest index.
inline std::vector<int> fps(const Tensor& positions, int count, int start_index) {
  const int n = positions.rows();
  check(count >= 1 && count <= n, "fps: insufficient points");
  check(start_index >= 0 && start_index < n, "fps: start index out of range");
  std::vector<int> picked(static_cast<size_t>(count));
  std::vector<double> min_d2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  picked[0] = start_index;
  int last = start_index;
  for (int m = 1; m < count; ++m) {
    const float* lp = positions.row(last);
    int best = -1;
    double best_d2 = -1.0;
    for (int i = 0; i < n; ++i) {
      const float* p = positions.row(i);
      const double dx = double(p[0]) - lp[0], dy = double(p[1]) - lp[1],
                   dz = double(p[2]) - lp[2];
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < min_d2[size_t(i)]) min_d2[size_t(i)] = d2;
      if (min_d2[size_t(i)] > best_d2) {
        best_d2 = min_d2[size_t(i)];
        best = i;
      }
    }
    picked[m] = best;
    last = best;
  }
  return picked;
}

// Per center, the k nearest positions sorted ascending by (distance, index).
inline std::vector<std::vector<int>> knn(const Tensor& centers,
                                         const Tensor& positions, int k) {
  const int n = positions.rows();
  check(k >= 1 && k <= n, "knn: insufficient points");
  std::vector<std::vector<int>> out(static_cast<size_t>(centers.rows()));
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(n));
  for (int c = 0; c < centers.rows(); ++c) {
    const float* cp = centers.row(c);
    for (int i = 0; i < n; ++i) {
      const float* p = positions.row(i);
      const double dx = double(p[0]) - cp[0], dy = double(p[1]) - cp[1],
                   dz = double(p[2]) - cp[2];
      dist[size_t(i)] = {dx * dx + dy * dy + dz * dz, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    auto& row = out[size_t(c)];
    row.resize(size_t(k));
    for (int j = 0; j < k; ++j) row[size_t(j)] = dist[size_t(j)].second;
  }
  return out;
}

// FPS centers + kNN gather, with patch coordinates translated to their
// center. Features ride along untouched.
inline PatchSet patchify_at(const PointCloud& cloud, int n_patches, int k,
                            int start_index) {
  const int f = cloud.feature_dim();
  const std::vector<int> center_idx = fps(cloud.positions, n_patches, start_index);
  Tensor centers({n_patches, 3});
  for (int i = 0; i < n_patches; ++i)
    std::copy(cloud.positions.row(center_idx[size_t(i)]),
              cloud.positions.row(center_idx[size_t(i)]) + 3, centers.row(i));
  const auto nbr = knn(centers, cloud.positions, k);
  PatchSet ps;
  ps.n_patches = n_patches;
  ps.points_per_patch = k;
  ps.point_dim = 3 + f;
  ps.centers = std::move(centers);
  ps.center_indices = center_idx;
  ps.patch_points = Tensor({n_patches * k, 3 + f});
  for (int i = 0; i < n_patches; ++i) {
    const float* c = ps.centers.row(i);
    for (int j = 0; j < k; ++j) {
      const int src = nbr[size_t(i)][size_t(j)];
      float* dst = ps.patch_points.row(i * k + j);
      const float* p = cloud.positions.row(src);
      dst[0] = p[0] - c[0];
      dst[1] = p[1] - c[1];
      dst[2] = p[2] - c[2];
      for (int q = 0; q < f; ++q) dst[3 + q] = cloud.features.at(src, q);
    }
  }
  return ps;
}

inline PatchSet patchify(const PointCloud& cloud, int n_patches, int k, Rng& rng) {
  return patchify_at(cloud, n_patches, k, int(rng.uniform_int(uint64_t(cloud.size()))));
}

// ---- cropping ----

namespace detail {

// Uniform random rotation matrix from a uniform quaternion (Shoemake).
inline std::array<float, 9> random_rotation(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double two_pi = 2.0 * std::numbers::pi;
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double qx = a * std::sin(two_pi * u2), qy = a * std::cos(two_pi * u2);
  const double qz = b * std::sin(two_pi * u3), qw = b * std::cos(two_pi * u3);
  return {
      float(1 - 2 * (qy * qy + qz * qz)), float(2 * (qx * qy - qz * qw)),
      float(2 * (qx * qz + qy * qw)),     float(2 * (qx * qy + qz * qw)),
      float(1 - 2 * (qx * qx + qz * qz)), float(2 * (qy * qz - qx * qw)),
      float(2 * (qx * qz - qy * qw)),     float(2 * (qy * qz + qx * qw)),
      float(1 - 2 * (qx * qx + qy * qy))};
}

}  // namespace detail

// Crops by a randomly rotated box with random aspect ratios, centered on a
// random cloud point and scaled so that exactly round(c * N) points are
// retained, then subsampled to spec.target_points.
//
// The retention scale is found by bisection on the per-point inclusion
// scale s_i = max_axis |q_axis| / aspect_axis; exact ties at the final
// threshold are trimmed by lowest index so the count is always exact.
inline PointCloud sample_crop(const PointCloud& cloud, const CropSpec& spec,
                              Rng& rng) {
  spec.validate();
  const int n = cloud.size();
  const double c = rng.uniform(spec.c_min, spec.c_max);
  check(c * n >= 1.0, "sample_crop: empty crop");
  const int target = std::max(1, int(std::floor(c * n + 0.5)));

  const auto rot = detail::random_rotation(rng);
  std::array<double, 3> aspect;
  for (auto& a : aspect) a = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
  const int anchor = int(rng.uniform_int(uint64_t(n)));
  const float* ap = cloud.positions.row(anchor);

  std::vector<double> incl(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* p = cloud.positions.row(i);
    const double dx = double(p[0]) - ap[0], dy = double(p[1]) - ap[1],
                 dz = double(p[2]) - ap[2];
    const double qx = rot[0] * dx + rot[1] * dy + rot[2] * dz;
    const double qy = rot[3] * dx + rot[4] * dy + rot[5] * dz;
    const double qz = rot[6] * dx + rot[7] * dy + rot[8] * dz;
    incl[size_t(i)] = std::max({std::abs(qx) / aspect[0], std::abs(qy) / aspect[1],
                                std::abs(qz) / aspect[2]});
  }

  double lo = 0.0, hi = *std::max_element(incl.begin(), incl.end());
  for (int it = 0; it < 64; ++it) {
    const double mid = 0.5 * (lo + hi);
    int cnt = 0;
    for (double v : incl) cnt += v <= mid;
    if (cnt < target) lo = mid; else hi = mid;
  }
  std::vector<int> retained;
  retained.reserve(size_t(target) + 8);
  for (int i = 0; i < n && int(retained.size()) < target; ++i)
    if (incl[size_t(i)] <= hi) retained.push_back(i);
  // Bisection can land one step short when lo == hi to double precision.
  if (int(retained.size()) < target) {
    std::vector<std::pair<double, int>> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = {incl[size_t(i)], i};
    std::nth_element(order.begin(), order.begin() + target - 1, order.end());
    std::sort(order.begin(), order.begin() + target,
              [](auto& a, auto& b) { return a.second < b.second; });
    retained.clear();
    for (int i = 0; i < target; ++i) retained.push_back(order[size_t(i)].second);
  }

  std::vector<int> chosen;
  chosen.reserve(size_t(spec.target_points));
  if (int(retained.size()) >= spec.target_points) {
    auto pick = rng.sample_without_replacement(int(retained.size()), spec.target_points);
    for (int idx : pick) chosen.push_back(retained[size_t(idx)]);
  } else {
    for (int i = 0; i < spec.target_points; ++i)
      chosen.push_back(retained[rng.uniform_int(retained.size())]);
  }

  const int f = cloud.feature_dim();
  PointCloud out;
  out.positions = Tensor({spec.target_points, 3});
  if (f > 0) out.features = Tensor({spec.target_points, f});
  for (int i = 0; i < spec.target_points; ++i) {
    std::copy(cloud.positions.row(chosen[size_t(i)]),
              cloud.positions.row(chosen[size_t(i)]) + 3, out.positions.row(i));
    if (f > 0)
      std::copy(cloud.features.row(chosen[size_t(i)]),
                cloud.features.row(chosen[size_t(i)]) + f, out.features.row(i));
  }
  return out;
}

// Number of points retained by sample_crop before subsampling, for tests.
inline int crop_retention_count(int n, double c) {
  return std::max(1, int(std::floor(c * n + 0.5)));
}

// ---- multi-crop ----

struct View {
  CropKind kind = CropKind::kGlobal;
  PointCloud cloud;
  PatchSet patches;
};

struct MultiCropConfig {
  int n_local = 4;
  int global_points = 1024;
  int global_patches = 64;
  int local_points = 256;
  int local_patches = 16;
  int patch_points = 32;  // K, shared by both crop kinds
  float global_c_min = 0.4f, global_c_max = 1.0f;
  float local_c_min = 0.05f, local_c_max = 0.4f;
};

// Two global crops plus n_local local crops, each independently patchified.
inline std::vector<View> multi_crop(const PointCloud& cloud,
                                    const MultiCropConfig& cfg, Rng& rng) {
  std::vector<View> views;
  views.reserve(size_t(2 + cfg.n_local));
  for (int g = 0; g < 2; ++g) {
    CropSpec spec{CropKind::kGlobal, cfg.global_c_min, cfg.global_c_max,
                  cfg.global_points, cfg.global_patches};
    View v;
    v.kind = CropKind::kGlobal;
    v.cloud = sample_crop(cloud, spec, rng);
    v.patches = patchify(v.cloud, cfg.global_patches, cfg.patch_points, rng);
    views.push_back(std::move(v));
  }
  for (int l = 0; l < cfg.n_local; ++l) {
    CropSpec spec{CropKind::kLocal, cfg.local_c_min, cfg.local_c_max,
                  cfg.local_points, cfg.local_patches};
    View v;
    v.kind = CropKind::kLocal;
    v.cloud = sample_crop(cloud, spec, rng);
    v.patches = patchify(v.cloud, cfg.local_patches, cfg.patch_points, rng);
    views.push_back(std::move(v));
  }
  return views;
}

}  // namespace asymdsd::geometry
