#include "defret/chamfer.hpp"

#include <cmath>

#include "defret/common.hpp"
#include "defret/spatial.hpp"

namespace defret {

namespace {

inline double term(double squared_distance, const ChamferOptions& opts) {
  return opts.squared ? squared_distance : std::sqrt(squared_distance);
}

double one_side(const PointCloud& from, const KdTree& to, const ChamferOptions& opts) {
  double sum = 0.0;
  for (const auto& p : from.points) sum += term(to.nearest(p).squared_distance, opts);
  return sum / static_cast<double>(from.size());
}

double one_side_brute(const PointCloud& from, const PointCloud& to, const ChamferOptions& opts) {
  double sum = 0.0;
  for (const auto& p : from.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to.points) best = std::min(best, (q - p).squaredNorm());
    sum += term(best, opts);
  }
  return sum / static_cast<double>(from.size());
}

void require_clouds(const PointCloud& a, const PointCloud& b, const char* what) {
  require(!a.empty() && !b.empty(), ErrorCode::InvalidArgument, std::string(what) + ": empty point cloud");
}

}  // namespace

double chamfer_pp(const PointCloud& a, const PointCloud& b, ChamferOptions opts) {
  require_clouds(a, b, "chamfer_pp");
  const KdTree ta(a.points), tb(b.points);
  return one_side(a, tb, opts) + one_side(b, ta, opts);
}

double chamfer_pp_brute_force(const PointCloud& a, const PointCloud& b, ChamferOptions opts) {
  require_clouds(a, b, "chamfer_pp_brute_force");
  return one_side_brute(a, b, opts) + one_side_brute(b, a, opts);
}

double mean_point_to_mesh(const PointCloud& cloud, const TriangleMesh& mesh, ChamferOptions opts) {
  require(!cloud.empty(), ErrorCode::InvalidArgument, "point-to-mesh: empty point cloud");
  const TriangleBvh bvh(mesh);
  double sum = 0.0;
  for (const auto& p : cloud.points) sum += term(bvh.squared_distance(p), opts);
  return sum / static_cast<double>(cloud.size());
}

double chamfer_pm(const ShapeRecord& a, const ShapeRecord& b, ChamferOptions opts) {
  require(!a.cloud_eval.empty(), ErrorCode::InvalidArgument, "chamfer_pm: shape '" + a.id + "' has no eval cloud");
  require(!b.cloud_eval.empty(), ErrorCode::InvalidArgument, "chamfer_pm: shape '" + b.id + "' has no eval cloud");
  return mean_point_to_mesh(a.cloud_eval, b.mesh, opts) + mean_point_to_mesh(b.cloud_eval, a.mesh, opts);
}

double one_way_pm(const PointCloud& partial, const TriangleMesh& model, ChamferOptions opts) {
  return mean_point_to_mesh(partial, model, opts);
}

}  // namespace defret
