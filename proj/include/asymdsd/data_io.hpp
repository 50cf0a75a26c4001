#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "asymdsd/common.hpp"
#include "asymdsd/geometry.hpp"
#include "asymdsd/rng.hpp"

namespace asymdsd::data {

enum class ShapeClass { kSphere = 0, kBox, kCylinder, kTorus, kCone };

inline const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names{"sphere", "box", "cylinder",
                                              "torus", "cone"};
  return names;
}

struct SyntheticShapeSpec {
  ShapeClass cls = ShapeClass::kSphere;
  std::vector<double> size;  // per-class size parameters
  int points = 1024;
};

// Uniform surface sampling in the canonical pose. Every point lies on the
// parametric surface exactly (up to float rounding).
inline geometry::PointCloud sample_surface(const SyntheticShapeSpec& spec,
                                           Rng& rng) {
  geometry::PointCloud pc;
  pc.positions = Tensor({spec.points, 3});
  const double two_pi = 2.0 * std::numbers::pi;
  switch (spec.cls) {
    case ShapeClass::kSphere: {
      const double r = spec.size.at(0);
      for (int i = 0; i < spec.points; ++i) {
        double x, y, z, n;
        do {
          x = rng.normal(); y = rng.normal(); z = rng.normal();
          n = std::sqrt(x * x + y * y + z * z);
        } while (n < 1e-9);
        float* p = pc.positions.row(i);
        p[0] = float(r * x / n); p[1] = float(r * y / n); p[2] = float(r * z / n);
      }
      break;
    }
    case ShapeClass::kBox: {
      // side lengths (a, b, c); faces chosen by area
      const double a = spec.size.at(0), b = spec.size.at(1), c = spec.size.at(2);
      const double area_xy = a * b, area_xz = a * c, area_yz = b * c;
      const double total = 2 * (area_xy + area_xz + area_yz);
      for (int i = 0; i < spec.points; ++i) {
        const double pick = rng.uniform(0.0, total);
        const double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
        const double sgn = rng.uniform() < 0.5 ? -0.5 : 0.5;
        float* p = pc.positions.row(i);
        if (pick < 2 * area_xy) {
          p[0] = float(u * a); p[1] = float(v * b); p[2] = float(sgn * c);
        } else if (pick < 2 * (area_xy + area_xz)) {
          p[0] = float(u * a); p[1] = float(sgn * b); p[2] = float(v * c);
        } else {
          p[0] = float(sgn * a); p[1] = float(u * b); p[2] = float(v * c);
        }
      }
      break;
    }
    case ShapeClass::kCylinder: {
      const double r = spec.size.at(0), h = spec.size.at(1);
      const double lateral = two_pi * r * h;
      const double cap = std::numbers::pi * r * r;
      const double total = lateral + 2 * cap;
      for (int i = 0; i < spec.points; ++i) {
        const double pick = rng.uniform(0.0, total);
        const double theta = rng.uniform(0.0, two_pi);
        float* p = pc.positions.row(i);
        if (pick < lateral) {
          p[0] = float(r * std::cos(theta));
          p[1] = float(r * std::sin(theta));
          p[2] = float(rng.uniform(-h / 2, h / 2));
        } else {
          const double rho = r * std::sqrt(rng.uniform());
          p[0] = float(rho * std::cos(theta));
          p[1] = float(rho * std::sin(theta));
          p[2] = float(pick < lateral + cap ? h / 2 : -h / 2);
        }
      }
      break;
    }
    case ShapeClass::kTorus: {
      // ring radius R, tube radius r; tube angle by rejection so that the
      // density matches the surface element (R + r cos t)
      const double R = spec.size.at(0), r = spec.size.at(1);
      for (int i = 0; i < spec.points; ++i) {
        const double phi = rng.uniform(0.0, two_pi);
        double t;
        do {
          t = rng.uniform(0.0, two_pi);
        } while (rng.uniform() > (R + r * std::cos(t)) / (R + r));
        float* p = pc.positions.row(i);
        p[0] = float((R + r * std::cos(t)) * std::cos(phi));
        p[1] = float((R + r * std::cos(t)) * std::sin(phi));
        p[2] = float(r * std::sin(t));
      }
      break;
    }
    case ShapeClass::kCone: {
      // base radius r at z = 0, apex at z = h; lateral area pi r s, base pi r^2
      const double r = spec.size.at(0), h = spec.size.at(1);
      const double slant = std::sqrt(r * r + h * h);
      const double lateral = std::numbers::pi * r * slant;
      const double base = std::numbers::pi * r * r;
      for (int i = 0; i < spec.points; ++i) {
        const double theta = rng.uniform(0.0, two_pi);
        float* p = pc.positions.row(i);
        if (rng.uniform(0.0, lateral + base) < lateral) {
          const double t = std::sqrt(rng.uniform());  // area-uniform on slant
          p[0] = float(r * t * std::cos(theta));
          p[1] = float(r * t * std::sin(theta));
          p[2] = float(h * (1.0 - t));
        } else {
          const double rho = r * std::sqrt(rng.uniform());
          p[0] = float(rho * std::cos(theta));
          p[1] = float(rho * std::sin(theta));
          p[2] = 0.f;
        }
      }
      break;
    }
  }
  return pc;
}

// Distance to the canonical parametric surface, used by the generation
// invariant tests.
inline double surface_distance(const SyntheticShapeSpec& spec, const float* p) {
  const double x = p[0], y = p[1], z = p[2];
  switch (spec.cls) {
    case ShapeClass::kSphere:
      return std::abs(std::sqrt(x * x + y * y + z * z) - spec.size.at(0));
    case ShapeClass::kBox: {
      const double hx = spec.size.at(0) / 2, hy = spec.size.at(1) / 2,
                   hz = spec.size.at(2) / 2;
      const double dx = std::abs(x) - hx, dy = std::abs(y) - hy,
                   dz = std::abs(z) - hz;
      // on-surface means inside the box with one coordinate on a face
      const double inside = std::max({dx, dy, dz});
      return std::abs(inside);
    }
    case ShapeClass::kCylinder: {
      const double r = spec.size.at(0), h = spec.size.at(1);
      const double rho = std::sqrt(x * x + y * y);
      const double d_lat = std::max(std::abs(rho - r), std::abs(z) - h / 2);
      const double d_cap = std::max(rho - r, std::abs(std::abs(z) - h / 2));
      return std::abs(std::min(std::abs(d_lat), std::abs(d_cap)));
    }
    case ShapeClass::kTorus: {
      const double R = spec.size.at(0), r = spec.size.at(1);
      const double q = std::sqrt(x * x + y * y) - R;
      return std::abs(std::sqrt(q * q + z * z) - r);
    }
    case ShapeClass::kCone: {
      const double r = spec.size.at(0), h = spec.size.at(1);
      const double rho = std::sqrt(x * x + y * y);
      if (std::abs(z) < 1e-9 && rho <= r + 1e-9) return 0.0;  // base
      // lateral surface: rho / r + z / h == 1 along the slant
      const double slant = std::sqrt(r * r + h * h);
      return std::abs(rho * h + r * z - r * h) / slant;
    }
  }
  return 0.0;
}

// Random size parameters per class, within documented ranges.
inline SyntheticShapeSpec random_shape(ShapeClass cls, int points, Rng& rng) {
  SyntheticShapeSpec s;
  s.cls = cls;
  s.points = points;
  switch (cls) {
    case ShapeClass::kSphere: s.size = {rng.uniform(0.5, 1.0)}; break;
    case ShapeClass::kBox:
      s.size = {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5),
                rng.uniform(0.5, 1.5)};
      break;
    case ShapeClass::kCylinder:
      s.size = {rng.uniform(0.3, 0.7), rng.uniform(0.8, 1.6)};
      break;
    case ShapeClass::kTorus:
      s.size = {rng.uniform(0.5, 0.9), rng.uniform(0.15, 0.3)};
      break;
    case ShapeClass::kCone:
      s.size = {rng.uniform(0.4, 0.8), rng.uniform(0.8, 1.5)};
      break;
  }
  return s;
}

// Pose: uniform random rotation plus a small translation jitter.
inline geometry::PointCloud apply_pose(const geometry::PointCloud& pc, Rng& rng,
                                       double translation_jitter = 0.1) {
  const auto rot = geometry::detail::random_rotation(rng);
  std::array<double, 3> tr;
  for (auto& v : tr) v = rng.uniform(-translation_jitter, translation_jitter);
  geometry::PointCloud out = pc;
  for (int i = 0; i < pc.size(); ++i) {
    const float* p = pc.positions.row(i);
    float* q = out.positions.row(i);
    q[0] = float(rot[0] * p[0] + rot[1] * p[1] + rot[2] * p[2] + tr[0]);
    q[1] = float(rot[3] * p[0] + rot[4] * p[1] + rot[5] * p[2] + tr[1]);
    q[2] = float(rot[6] * p[0] + rot[7] * p[1] + rot[8] * p[2] + tr[2]);
  }
  return out;
}

// ---- cloud files: magic "APCD", u32 version, u32 N, u32 F, f32 data ----

constexpr uint32_t kCloudVersion = 1;

inline void write_cloud(const std::string& path,
                        const geometry::PointCloud& cloud) {
  cloud.validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), "write_cloud: cannot open '", path, "'");
  f.write("APCD", 4);
  const uint32_t version = kCloudVersion;
  const uint32_t n = uint32_t(cloud.size());
  const uint32_t fdim = uint32_t(cloud.feature_dim());
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&n), 4);
  f.write(reinterpret_cast<const char*>(&fdim), 4);
  for (int i = 0; i < cloud.size(); ++i) {
    f.write(reinterpret_cast<const char*>(cloud.positions.row(i)), 12);
    if (fdim > 0)
      f.write(reinterpret_cast<const char*>(cloud.features.row(i)),
              std::streamsize(4 * fdim));
  }
  check(f.good(), "write_cloud: write to '", path, "' failed");
}

inline geometry::PointCloud read_cloud(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "read_cloud: cannot open '", path, "'");
  char magic[4];
  f.read(magic, 4);
  check(f.gcount() == 4 && std::memcmp(magic, "APCD", 4) == 0,
        "read_cloud: bad magic in '", path, "'");
  uint32_t version = 0, n = 0, fdim = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&n), 4);
  f.read(reinterpret_cast<char*>(&fdim), 4);
  check(f.good(), "read_cloud: truncated header in '", path, "'");
  check(version == kCloudVersion, "read_cloud: version mismatch (file ",
        version, ", expected ", kCloudVersion, ")");
  check(n >= 1, "read_cloud: zero-point cloud in '", path, "'");
  check(fdim <= 1024, "read_cloud: implausible feature width in '", path, "'");
  geometry::PointCloud pc;
  pc.positions = Tensor({int(n), 3});
  if (fdim > 0) pc.features = Tensor({int(n), int(fdim)});
  for (uint32_t i = 0; i < n; ++i) {
    f.read(reinterpret_cast<char*>(pc.positions.row(int(i))), 12);
    if (fdim > 0)
      f.read(reinterpret_cast<char*>(pc.features.row(int(i))),
             std::streamsize(4 * fdim));
    check(f.gcount() > 0 && f.good(), "read_cloud: short read in '", path,
          "' at point ", i);
  }
  return pc;
}

// ---- dataset generation and manifests ----

struct ManifestRow {
  std::string id;
  std::string cls;
  std::string path;
};

inline void write_manifest(const std::string& path,
                           const std::vector<ManifestRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), "write_manifest: cannot open '", path, "'");
  f << "id,class,path\n";
  for (const auto& r : rows) f << r.id << "," << r.cls << "," << r.path << "\n";
  check(f.good(), "write_manifest: write failed");
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "read_manifest: cannot open '", path, "'");
  std::string line;
  check(bool(std::getline(f, line)), "read_manifest: empty file");
  check(line == "id,class,path", "read_manifest: unexpected header '", line, "'");
  std::vector<ManifestRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    check(c1 != std::string::npos && c2 != std::string::npos,
          "read_manifest: malformed row '", line, "'");
    rows.push_back({line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1),
                    line.substr(c2 + 1)});
  }
  return rows;
}

// Deterministically generates n_per_class clouds for each shape class,
// writes one APCD file per cloud plus a manifest.csv into out_dir.
inline std::vector<ManifestRow> generate_dataset(const std::string& out_dir,
                                                 int n_per_class,
                                                 int points_per_cloud,
                                                 uint64_t seed,
                                                 double noise_sigma = 0.0) {
  check(n_per_class >= 1, "generate_dataset: n_per_class must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  check(!ec, "generate_dataset: cannot create directory '", out_dir, "'");

  std::vector<ManifestRow> rows;
  int id = 0;
  for (size_t c = 0; c < shape_class_names().size(); ++c) {
    for (int i = 0; i < n_per_class; ++i, ++id) {
      Rng rng = Rng::stream(seed, {0xDA7A, uint64_t(c), uint64_t(i)});
      auto spec = random_shape(ShapeClass(c), points_per_cloud, rng);
      auto cloud = apply_pose(sample_surface(spec, rng), rng);
      if (noise_sigma > 0.0)
        for (auto& v : cloud.positions.data)
          v += float(rng.normal() * noise_sigma);
      char name[64];
      std::snprintf(name, sizeof(name), "cloud_%05d.apcd", id);
      const std::string rel = name;
      write_cloud((std::filesystem::path(out_dir) / rel).string(), cloud);
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "%05d", id);
      rows.push_back({idbuf, shape_class_names()[c], rel});
    }
  }
  write_manifest((std::filesystem::path(out_dir) / "manifest.csv").string(),
                 rows);
  return rows;
}

// Loads every cloud in a manifest; paths are relative to the manifest dir.
struct Dataset {
  std::vector<geometry::PointCloud> clouds;
  std::vector<int> labels;
  std::vector<std::string> class_names;
};

inline Dataset load_dataset(const std::string& dir) {
  const auto manifest_path = (std::filesystem::path(dir) / "manifest.csv").string();
  const auto rows = read_manifest(manifest_path);
  check(!rows.empty(), "load_dataset: empty manifest in '", dir, "'");
  Dataset ds;
  std::map<std::string, int> class_ids;
  for (const auto& r : rows) {
    if (!class_ids.count(r.cls)) {
      class_ids[r.cls] = 0;  // renumbered below, sorted by name
    }
  }
  int next = 0;
  for (auto& [name, cid] : class_ids) {
    cid = next++;
    ds.class_names.push_back(name);
  }
  for (const auto& r : rows) {
    ds.clouds.push_back(
        read_cloud((std::filesystem::path(dir) / r.path).string()));
    ds.labels.push_back(class_ids[r.cls]);
  }
  return ds;
}

}  // namespace asymdsd::data
