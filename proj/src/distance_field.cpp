#include "defret/distance_field.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "defret/common.hpp"
#include "defret/spatial.hpp"

namespace defret {

UnsignedDistanceGrid::UnsignedDistanceGrid(int resolution, Vec3 origin, double cell_size, std::vector<double> values)
    : resolution_(resolution), origin_(std::move(origin)), cell_size_(cell_size), values_(std::move(values)) {
  require(resolution_ >= 2, ErrorCode::InvalidArgument, "UDF resolution must be >= 2");
  require(cell_size_ > 0.0, ErrorCode::InvalidArgument, "UDF cell size must be positive");
  require(values_.size() == static_cast<std::size_t>(resolution_) * resolution_ * resolution_, ErrorCode::InvalidArgument,
          "UDF value count does not match resolution");
}

Aabb UnsignedDistanceGrid::box() const {
  Aabb b;
  b.lo = origin_;
  b.hi = origin_ + Vec3::Constant(cell_size_ * (resolution_ - 1));
  return b;
}

double UnsignedDistanceGrid::query(const Vec3& p) const {
  const Aabb b = box();
  const Vec3 c = p.cwiseMax(b.lo).cwiseMin(b.hi);
  const double outside = (p - c).norm();

  const Vec3 f = (c - origin_) / cell_size_;
  int idx[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const int i0 = std::clamp(static_cast<int>(std::floor(f[a])), 0, resolution_ - 2);
    idx[a] = i0;
    t[a] = std::clamp(f[a] - i0, 0.0, 1.0);
  }
  const int i = idx[0], j = idx[1], k = idx[2];
  const double c00 = value(i, j, k) * (1 - t[0]) + value(i + 1, j, k) * t[0];
  const double c10 = value(i, j + 1, k) * (1 - t[0]) + value(i + 1, j + 1, k) * t[0];
  const double c01 = value(i, j, k + 1) * (1 - t[0]) + value(i + 1, j, k + 1) * t[0];
  const double c11 = value(i, j + 1, k + 1) * (1 - t[0]) + value(i + 1, j + 1, k + 1) * t[0];
  const double c0 = c00 * (1 - t[1]) + c10 * t[1];
  const double c1 = c01 * (1 - t[1]) + c11 * t[1];
  return c0 * (1 - t[2]) + c1 * t[2] + outside;
}

Vec3 UnsignedDistanceGrid::gradient(const Vec3& p) const {
  const double h = 0.5 * cell_size_;
  const Aabb b = box();
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    const bool low_shell = p[a] < b.lo[a] + cell_size_;
    const bool high_shell = p[a] > b.hi[a] - cell_size_;
    if (low_shell && !high_shell) {
      g[a] = (query(p + e) - query(p)) / h;
    } else if (high_shell && !low_shell) {
      g[a] = (query(p) - query(p - e)) / h;
    } else {
      g[a] = (query(p + e) - query(p - e)) / (2 * h);
    }
  }
  return g;
}

UnsignedDistanceGrid build_udf(const TriangleMesh& target, const UdfOptions& opts) {
  return build_udf(target, target.bounds(), opts);
}

UnsignedDistanceGrid build_udf(const TriangleMesh& target, const Aabb& region, const UdfOptions& opts) {
  require(opts.resolution >= 2, ErrorCode::InvalidArgument, "build_udf: resolution must be >= 2");
  require(!region.empty(), ErrorCode::InvalidArgument, "build_udf: empty region");
  const int res = opts.resolution;
  const double margin = opts.margin * std::max(region.extent().norm(), 1e-9);
  const double side = region.extent().maxCoeff() + 2.0 * margin;
  const Vec3 origin = region.center() - Vec3::Constant(0.5 * side);
  const double cell = side / (res - 1);

  const TriangleBvh bvh(target);
  std::vector<double> values(static_cast<std::size_t>(res) * res * res);
  // Slabs along z are independent; the result does not depend on how they
  // are split among workers.
  std::atomic<int> next{0};
  auto work = [&] {
    for (int k; (k = next.fetch_add(1)) < res;) {
      for (int j = 0; j < res; ++j) {
        for (int i = 0; i < res; ++i) {
          const Vec3 p = origin + cell * Vec3(i, j, k);
          values[(static_cast<std::size_t>(k) * res + j) * res + i] = bvh.distance(p);
        }
      }
    }
  };
  const int workers = std::max(1, opts.workers);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  return UnsignedDistanceGrid(res, origin, cell, std::move(values));
}

std::string encode_udf(const UnsignedDistanceGrid& grid) {
  std::string out = "DUDF";
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(grid.resolution()));
  for (int a = 0; a < 3; ++a) le::put<double>(out, grid.origin()[a]);
  le::put<double>(out, grid.cell_size());
  for (double v : grid.values()) le::put<float>(out, static_cast<float>(v));
  return out;
}

UnsignedDistanceGrid decode_udf(const std::string& bytes) {
  le::Reader r(bytes, "UDF cache");
  require(r.bytes(4) == "DUDF", ErrorCode::Format, "UDF cache: bad magic");
  const auto res = r.get<std::uint32_t>();
  require(res >= 2 && res <= 4096, ErrorCode::Format, "UDF cache: bad resolution");
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = r.get<double>();
  const double cell = r.get<double>();
  std::vector<double> values(static_cast<std::size_t>(res) * res * res);
  for (auto& v : values) v = r.get<float>();
  require(r.remaining() == 0, ErrorCode::Format, "UDF cache: trailing bytes");
  return UnsignedDistanceGrid(static_cast<int>(res), origin, cell, std::move(values));
}

}  // namespace defret
