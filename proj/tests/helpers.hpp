#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <unistd.h>

#include "defret/common.hpp"
#include "defret/geometry.hpp"
#include "defret/synthetic.hpp"

namespace defret::test {

inline TriangleMesh tetrahedron() {
  return TriangleMesh({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)},
                      {Triangle{0, 2, 1}, Triangle{0, 1, 3}, Triangle{0, 3, 2}, Triangle{1, 2, 3}});
}

inline TriangleMesh unit_cube() {
  std::vector<Vec3> v;
  for (int i = 0; i < 8; ++i) v.emplace_back(i & 1, (i >> 1) & 1, (i >> 2) & 1);
  std::vector<Triangle> t{{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                          {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return TriangleMesh(std::move(v), std::move(t));
}

// Latitude-longitude sphere of the given radius around the origin.
inline TriangleMesh uv_sphere(double radius, int rings, int segments) {
  std::vector<Vec3> v{Vec3(0, 0, radius)};
  for (int r = 1; r < rings; ++r) {
    const double th = std::numbers::pi * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double ph = 2.0 * std::numbers::pi * s / segments;
      v.emplace_back(radius * std::sin(th) * std::cos(ph), radius * std::sin(th) * std::sin(ph),
                     radius * std::cos(th));
    }
  }
  v.emplace_back(0, 0, -radius);
  const auto id = [&](int r, int s) { return static_cast<std::uint32_t>(1 + (r - 1) * segments + s % segments); };
  const auto south = static_cast<std::uint32_t>(v.size() - 1);
  std::vector<Triangle> t;
  for (int s = 0; s < segments; ++s) t.push_back({0, id(1, s), id(1, s + 1)});
  for (int r = 1; r + 1 < rings; ++r) {
    for (int s = 0; s < segments; ++s) {
      t.push_back({id(r, s), id(r + 1, s), id(r + 1, s + 1)});
      t.push_back({id(r, s), id(r + 1, s + 1), id(r, s + 1)});
    }
  }
  for (int s = 0; s < segments; ++s) t.push_back({south, id(rings - 1, s + 1), id(rings - 1, s)});
  return TriangleMesh(std::move(v), std::move(t));
}

inline TriangleMesh translated(const TriangleMesh& m, const Vec3& d) {
  auto v = m.vertices();
  for (auto& p : v) p += d;
  return m.with_vertices(std::move(v));
}

inline std::vector<Vec3> random_points(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<Vec3> out(n);
  for (auto& p : out) p = Vec3(uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi));
  return out;
}

inline PointCloud cloud(std::vector<Vec3> pts) {
  PointCloud c;
  c.points = std::move(pts);
  return c;
}

// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("defret-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& name = {}) const { return name.empty() ? path_.string() : (path_ / name).string(); }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace defret::test
