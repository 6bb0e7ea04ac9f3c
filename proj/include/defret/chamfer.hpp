#pragma once

#include "defret/geometry.hpp"

namespace defret {

// Per-point term of every Chamfer variant: squared nearest distance by
// default, plain distance when `squared` is false.
struct ChamferOptions {
  bool squared = true;
};

// Two-way point-to-point Chamfer distance (KD-tree nearest neighbors).
double chamfer_pp(const PointCloud& a, const PointCloud& b, ChamferOptions opts = {});

// O(|a||b|) reference; tests and tiny inputs only.
double chamfer_pp_brute_force(const PointCloud& a, const PointCloud& b, ChamferOptions opts = {});

// Mean over `cloud` of the per-point distance term to the mesh surface.
double mean_point_to_mesh(const PointCloud& cloud, const TriangleMesh& mesh, ChamferOptions opts = {});

// Two-way point-to-mesh Chamfer distance on the dense evaluation clouds.
double chamfer_pm(const ShapeRecord& a, const ShapeRecord& b, ChamferOptions opts = {});

// One-way scan-to-model distance: every observed scan point must be
// explained by the model surface.
double one_way_pm(const PointCloud& partial, const TriangleMesh& model, ChamferOptions opts = {});

}  // namespace defret
