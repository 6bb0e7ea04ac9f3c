#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "defret/geometry.hpp"

namespace defret {

inline constexpr int kDefaultUdfResolution = 100;

// Unsigned distance to a target surface sampled at the nodes of a cubic
// grid. Node (i, j, k) sits at origin + cell_size * (i, j, k); values are
// stored x-fastest.
class UnsignedDistanceGrid {
 public:
  UnsignedDistanceGrid() = default;
  UnsignedDistanceGrid(int resolution, Vec3 origin, double cell_size, std::vector<double> values);

  int resolution() const { return resolution_; }
  const Vec3& origin() const { return origin_; }
  double cell_size() const { return cell_size_; }
  const std::vector<double>& values() const { return values_; }
  double value(int i, int j, int k) const {
    return values_[(static_cast<std::size_t>(k) * resolution_ + j) * resolution_ + i];
  }
  Vec3 node(int i, int j, int k) const { return origin_ + cell_size_ * Vec3(i, j, k); }
  Aabb box() const;

  // Trilinear interpolation; outside points are clamped to the box and
  // charged the Euclidean distance to it.
  double query(const Vec3& p) const;

  // Central difference of query() with step cell_size/2 per axis; one-sided
  // within the one-cell boundary shell.
  Vec3 gradient(const Vec3& p) const;

 private:
  int resolution_ = 0;
  Vec3 origin_ = Vec3::Zero();
  double cell_size_ = 0.0;
  std::vector<double> values_;
};

struct UdfOptions {
  int resolution = kDefaultUdfResolution;
  double margin = 0.1;  // fraction of the bbox diagonal added on every side
  int workers = 1;
};

// Exact point-to-mesh distance at every node (BVH accelerated). The grid is
// a cube around the mesh bbox inflated by `margin`.
UnsignedDistanceGrid build_udf(const TriangleMesh& target, const UdfOptions& opts = {});

// Same, over an explicit region (the region is inflated by `margin` too).
UnsignedDistanceGrid build_udf(const TriangleMesh& target, const Aabb& region, const UdfOptions& opts);

// "DUDF" u32 resolution, 3 x f64 origin, f64 cell_size, resolution^3 f32.
// The cache stores f32, so a decoded grid matches the built one to float
// precision.
std::string encode_udf(const UnsignedDistanceGrid& grid);
UnsignedDistanceGrid decode_udf(const std::string& bytes);

}  // namespace defret
