#include "defret/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "defret/common.hpp"

namespace defret {

TriangleMesh::TriangleMesh(std::vector<Vec3> vertices, std::vector<Triangle> triangles)
    : vertices_(std::move(vertices)), triangles_(std::move(triangles)) {
  const auto nv = static_cast<std::uint32_t>(vertices_.size());
  edges_.reserve(triangles_.size() * 3);
  for (const auto& t : triangles_) {
    for (int k = 0; k < 3; ++k) {
      require(t[k] < nv, ErrorCode::Format,
              "triangle index " + std::to_string(t[k]) + " out of range (" + std::to_string(nv) + " vertices)");
    }
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = t[k], b = t[(k + 1) % 3];
      if (a == b) continue;
      edges_.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
}

TriangleMesh TriangleMesh::with_vertices(std::vector<Vec3> vertices) const {
  require(vertices.size() == vertices_.size(), ErrorCode::InvalidArgument, "vertex count mismatch");
  TriangleMesh out = *this;
  out.vertices_ = std::move(vertices);
  return out;
}

Aabb TriangleMesh::bounds() const {
  Aabb box;
  for (const auto& v : vertices_) box.extend(v);
  return box;
}

double TriangleMesh::triangle_area(std::size_t t) const {
  const auto& tri = triangles_[t];
  const Vec3& a = vertices_[tri[0]];
  return 0.5 * (vertices_[tri[1]] - a).cross(vertices_[tri[2]] - a).norm();
}

double TriangleMesh::surface_area() const {
  double total = 0.0;
  for (std::size_t t = 0; t < triangles_.size(); ++t) total += triangle_area(t);
  return total;
}

TriangleMesh normalize(const TriangleMesh& mesh) {
  require(!mesh.vertices().empty(), ErrorCode::InvalidArgument, "normalize: mesh has no vertices");
  const Aabb box = mesh.bounds();
  const double diag = box.extent().norm();
  require(diag > 0.0 && std::isfinite(diag), ErrorCode::InvalidArgument,
          "normalize: degenerate bounding box (all vertices coincide)");
  const Vec3 c = box.center();
  std::vector<Vec3> v;
  v.reserve(mesh.vertices().size());
  for (const auto& p : mesh.vertices()) v.push_back((p - c) / diag);
  return mesh.with_vertices(std::move(v));
}

PointCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed,
                          std::string source_shape_id) {
  return sample_surface_at(mesh, mesh.vertices(), n, seed, std::move(source_shape_id));
}

PointCloud sample_surface_at(const TriangleMesh& mesh, std::span<const Vec3> positions, std::size_t n,
                             std::uint64_t seed, std::string source_shape_id) {
  require(positions.size() == mesh.vertices().size(), ErrorCode::InvalidArgument,
          "sample_surface_at: vertex count mismatch");
  const auto& tris = mesh.triangles();
  std::vector<double> cdf(tris.size());
  double total = 0.0;
  for (std::size_t t = 0; t < tris.size(); ++t) {
    total += mesh.triangle_area(t);
    cdf[t] = total;
  }
  require(total > 0.0, ErrorCode::InvalidArgument, "sample_surface: mesh has no triangle with positive area");

  PointCloud cloud;
  cloud.source_shape_id = std::move(source_shape_id);
  cloud.seed = seed;
  cloud.points.reserve(n);
  Rng rng(seed);
  const auto& V = positions;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform01(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), tris.size() - 1);
    const double r1 = std::sqrt(uniform01(rng));
    const double r2 = uniform01(rng);
    const auto& tri = tris[t];
    cloud.points.push_back((1.0 - r1) * V[tri[0]] + r1 * (1.0 - r2) * V[tri[1]] + r1 * r2 * V[tri[2]]);
  }
  return cloud;
}

ShapeRecord make_shape_record(std::string id, const TriangleMesh& mesh, std::uint64_t seed,
                              std::size_t train_points, std::size_t eval_points) {
  ShapeRecord rec;
  rec.mesh = normalize(mesh);
  rec.cloud_train = sample_surface(rec.mesh, train_points, derive_seed(seed, "cloud_train/" + id), id);
  if (eval_points > 0) rec.cloud_eval = sample_surface(rec.mesh, eval_points, derive_seed(seed, "cloud_eval/" + id), id);
  rec.id = std::move(id);
  return rec;
}

}  // namespace defret
