#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defret/geometry.hpp"

namespace defret {

// ---- procedural building blocks -------------------------------------------------

// Closed box surface [lo, hi] with every face split into a lattice of
// squares no wider than `edge` (two triangles each).
TriangleMesh box_mesh(const Vec3& lo, const Vec3& hi, double edge);

// Disjoint union; indices of later meshes are shifted.
TriangleMesh merge_meshes(const std::vector<TriangleMesh>& parts);

// Flat square [0, size]^2 in the z = 0 plane, n x n quads.
TriangleMesh sheet_mesh(double size, int n);

// Straight bar of the given length along x with a square cross-section.
TriangleMesh bar_mesh(double length, double thickness, double edge);

struct CombParams {
  int teeth = 4;
  double width = 1.0;          // spine length along x
  double spine = 0.08;         // spine height along z
  double tooth_length = 0.5;   // along -z
  double tooth_width = 0.06;   // along x
  double thickness = 0.06;     // along y
  double edge = 0.03;
};

// Spine with evenly spaced teeth hanging below it; all parts are separate
// boxes.
TriangleMesh comb_mesh(const CombParams& p);

struct TableParams {
  int legs = 4;               // 1 = central pedestal on a foot plate
  double width = 1.2;         // x
  double depth = 0.8;         // y
  double height = 0.75;       // z, including the top
  double top_thickness = 0.05;
  double leg_thickness = 0.06;
  double edge = 0.04;
};

TriangleMesh table_mesh(const TableParams& p);

// ---- families -----------------------------------------------------------------------

// Structure (table leg count, comb tooth count) is assigned round-robin so
// every structure is equally represented; attributes (size, thickness,
// height) are drawn uniformly from their ranges. The default family is
// tables whose attribute spread dominates their Chamfer distances, so the
// Chamfer-nearest shape is often not the easiest to deform.
struct SyntheticParams {
  std::vector<std::string> kinds{"table"};
  std::vector<int> table_legs{1, 2, 4};
  std::vector<int> comb_teeth{2, 3, 4, 5};
  std::pair<double, double> height{0.3, 1.4};
  std::pair<double, double> width{0.5, 2.0};
  std::pair<double, double> depth{0.4, 1.4};
  std::pair<double, double> thickness{0.04, 0.09};
  double edge = 0.04;
  std::size_t train_points = kTrainCloudPoints;
  std::size_t eval_points = kEvalCloudPoints;

  void validate() const;
};

nlohmann::ordered_json to_json(const SyntheticParams& p);
// Missing keys keep their defaults; unknown keys are rejected.
SyntheticParams synthetic_params_from_json(const nlohmann::json& j, SyntheticParams base = {});

struct SyntheticShape {
  ShapeRecord record;
  std::string kind;
  int structure = 0;  // leg or tooth count
};

// Normalized shapes, regenerable from (params, count, seed).
std::vector<SyntheticShape> generate_synthetic(const SyntheticParams& params, std::size_t count, std::uint64_t seed);

}  // namespace defret
