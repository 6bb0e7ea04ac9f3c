#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "defret/geometry.hpp"

namespace defret {

// Squared distance from p to the closed triangle (a, b, c). Degenerate
// triangles fall back to the nearest of their edges.
double point_triangle_squared_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

inline double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  return std::sqrt(point_triangle_squared_distance(p, a, b, c));
}

double point_segment_squared_distance(const Vec3& p, const Vec3& a, const Vec3& b);

struct Neighbor {
  std::uint32_t index = 0;
  double squared_distance = 0.0;
};

// Balanced KD-tree over a point set. Read-only after construction, so
// concurrent queries are safe. Ties resolve to the lowest point index.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 8);

  Neighbor nearest(const Vec3& q) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::uint32_t begin, end;   // range in order_
    std::int32_t left = -1, right = -1;
    int axis = -1;
    double split = 0.0;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size);
  void search(std::int32_t node, const Vec3& q, Neighbor& best) const;

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

// Bounding-volume hierarchy over the triangles of a mesh for exact
// point-to-surface distance.
class TriangleBvh {
 public:
  explicit TriangleBvh(const TriangleMesh& mesh);

  double squared_distance(const Vec3& p) const;
  double distance(const Vec3& p) const { return std::sqrt(squared_distance(p)); }

 private:
  struct Node {
    Aabb box;
    std::uint32_t begin, end;
    std::int32_t left = -1, right = -1;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<std::array<Vec3, 3>> tris_;
  std::vector<Vec3> centroids_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace defret
