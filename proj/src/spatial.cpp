#include "defret/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "defret/common.hpp"

namespace defret {

double point_segment_squared_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return (p - a).squaredNorm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).squaredNorm();
}

// Voronoi-region walk over vertices, edges, then the face interior.
double point_triangle_squared_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a;
  if (ab.cross(ac).squaredNorm() <= 0.0) {
    return std::min({point_segment_squared_distance(p, a, b), point_segment_squared_distance(p, b, c),
                     point_segment_squared_distance(p, c, a)});
  }
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return ap.squaredNorm();

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return bp.squaredNorm();

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return (p - (a + v * ab)).squaredNorm();
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return cp.squaredNorm();

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return (p - (a + w * ac)).squaredNorm();
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return (p - (b + w * (c - b))).squaredNorm();
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return (p - (a + ab * v + ac * w)).squaredNorm();
}

// ---- KdTree ---------------------------------------------------------------

KdTree::KdTree(std::span<const Vec3> points, std::size_t leaf_size) : points_(points.begin(), points.end()) {
  require(!points_.empty(), ErrorCode::InvalidArgument, "KdTree: empty point set");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  nodes_.reserve(2 * points_.size() / std::max<std::size_t>(leaf_size, 1) + 1);
  build(0, static_cast<std::uint32_t>(points_.size()), std::max<std::size_t>(leaf_size, 1));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= leaf_size) return id;

  Aabb box;
  for (auto i = begin; i < end; ++i) box.extend(points_[order_[i]]);
  int axis;
  box.extent().maxCoeff(&axis);
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     const double pa = points_[a][axis], pb = points_[b][axis];
                     return pa < pb || (pa == pb && a < b);
                   });
  const double split = points_[order_[mid]][axis];
  const auto left = build(begin, mid, leaf_size);
  const auto right = build(mid, end, leaf_size);
  Node& n = nodes_[id];
  n.axis = axis;
  n.split = split;
  n.left = left;
  n.right = right;
  return id;
}

void KdTree::search(std::int32_t id, const Vec3& q, Neighbor& best) const {
  const Node& n = nodes_[id];
  if (n.axis < 0) {
    for (auto i = n.begin; i < n.end; ++i) {
      const std::uint32_t idx = order_[i];
      const double d = (points_[idx] - q).squaredNorm();
      if (d < best.squared_distance || (d == best.squared_distance && idx < best.index)) best = {idx, d};
    }
    return;
  }
  // Left holds coordinates <= split, right holds >= split.
  const double diff = q[n.axis] - n.split;
  const std::int32_t near = diff <= 0.0 ? n.left : n.right;
  const std::int32_t far = diff <= 0.0 ? n.right : n.left;
  search(near, q, best);
  if (diff * diff <= best.squared_distance) search(far, q, best);
}

Neighbor KdTree::nearest(const Vec3& q) const {
  Neighbor best{std::numeric_limits<std::uint32_t>::max(), std::numeric_limits<double>::infinity()};
  search(0, q, best);
  return best;
}

// ---- TriangleBvh ----------------------------------------------------------

TriangleBvh::TriangleBvh(const TriangleMesh& mesh) {
  require(!mesh.triangles().empty(), ErrorCode::InvalidArgument, "TriangleBvh: mesh has no triangles");
  const auto& V = mesh.vertices();
  tris_.reserve(mesh.triangles().size());
  for (const auto& t : mesh.triangles()) {
    tris_.push_back({V[t[0]], V[t[1]], V[t[2]]});
    centroids_.push_back((V[t[0]] + V[t[1]] + V[t[2]]) / 3.0);
  }
  order_.resize(tris_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  nodes_.reserve(2 * tris_.size());
  build(0, static_cast<std::uint32_t>(tris_.size()));
}

std::int32_t TriangleBvh::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  Aabb box, cbox;
  for (auto i = begin; i < end; ++i) {
    for (const auto& v : tris_[order_[i]]) box.extend(v);
    cbox.extend(centroids_[order_[i]]);
  }
  nodes_.push_back({box, begin, end});
  if (end - begin <= 4) return id;
  int axis;
  cbox.extent().maxCoeff(&axis);
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) { return centroids_[a][axis] < centroids_[b][axis]; });
  const auto left = build(begin, mid);
  const auto right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

double TriangleBvh::squared_distance(const Vec3& p) const {
  double best = std::numeric_limits<double>::infinity();
  std::int32_t stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& n = nodes_[stack[--top]];
    if (n.box.squared_distance(p) >= best) continue;
    if (n.left < 0) {
      for (auto i = n.begin; i < n.end; ++i) {
        const auto& t = tris_[order_[i]];
        best = std::min(best, point_triangle_squared_distance(p, t[0], t[1], t[2]));
      }
      continue;
    }
    // Visit the nearer child first.
    const double dl = nodes_[n.left].box.squared_distance(p);
    const double dr = nodes_[n.right].box.squared_distance(p);
    if (dl < dr) {
      stack[top++] = n.right;
      stack[top++] = n.left;
    } else {
      stack[top++] = n.left;
      stack[top++] = n.right;
    }
  }
  return best;
}

}  // namespace defret
