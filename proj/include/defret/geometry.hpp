#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace defret {

using Vec3 = Eigen::Vector3d;
using Triangle = std::array<std::uint32_t, 3>;
using Edge = std::pair<std::uint32_t, std::uint32_t>;

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  void extend(const Aabb& b) {
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
  }
  bool empty() const { return (lo.array() > hi.array()).any(); }
  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return hi - lo; }
  double squared_distance(const Vec3& p) const {
    return (lo - p).cwiseMax(p - hi).cwiseMax(0.0).squaredNorm();
  }
};

// Triangle mesh with a derived, sorted, deduplicated undirected edge list.
class TriangleMesh {
 public:
  TriangleMesh() = default;
  // Validates indices and derives edges.
  TriangleMesh(std::vector<Vec3> vertices, std::vector<Triangle> triangles);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }
  const std::vector<Edge>& edges() const { return edges_; }

  // Same connectivity, new positions.
  TriangleMesh with_vertices(std::vector<Vec3> vertices) const;

  Aabb bounds() const;
  double triangle_area(std::size_t t) const;
  double surface_area() const;

 private:
  std::vector<Vec3> vertices_;
  std::vector<Triangle> triangles_;
  std::vector<Edge> edges_;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::string source_shape_id;
  std::uint64_t seed = 0;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

inline constexpr std::size_t kTrainCloudPoints = 2048;
inline constexpr std::size_t kEvalCloudPoints = 50000;

struct ShapeRecord {
  std::string id;
  TriangleMesh mesh;
  PointCloud cloud_train;
  PointCloud cloud_eval;
};

// Centers the bounding box at the origin and scales its diagonal to 1.
TriangleMesh normalize(const TriangleMesh& mesh);

// Area-weighted triangle choice followed by uniform barycentric sampling.
PointCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed,
                          std::string source_shape_id = {});

// The same samples (triangle choice by the areas of `mesh`, barycentric
// coordinates) placed on the triangles moved to `positions`. Used to carry a
// shape's seeded cloud through a deformation point for point.
PointCloud sample_surface_at(const TriangleMesh& mesh, std::span<const Vec3> positions, std::size_t n,
                             std::uint64_t seed, std::string source_shape_id = {});

// Normalizes the mesh and samples both clouds from it. Cloud seeds are
// derived from `seed` and the shape id.
ShapeRecord make_shape_record(std::string id, const TriangleMesh& mesh, std::uint64_t seed,
                              std::size_t train_points = kTrainCloudPoints,
                              std::size_t eval_points = kEvalCloudPoints);

// ---- mesh and cloud files ------------------------------------------------

// OBJ, OFF, or PLY (ascii / binary little- or big-endian) chosen by
// extension. Polygons are fan-triangulated.
TriangleMesh load_mesh(const std::string& path);
TriangleMesh parse_obj(const std::string& text);
TriangleMesh parse_off(const std::string& text);
TriangleMesh parse_ply(const std::string& bytes);

std::string to_obj(const TriangleMesh& mesh);
void save_obj(const TriangleMesh& mesh, const std::string& path);

// "DRPC" + u32 count + count*3 little-endian f32.
std::string encode_cloud(const PointCloud& cloud);
PointCloud decode_cloud(const std::string& bytes);
void save_cloud(const PointCloud& cloud, const std::string& path);
PointCloud load_cloud(const std::string& path);
std::string to_xyz(const PointCloud& cloud);

}  // namespace defret
