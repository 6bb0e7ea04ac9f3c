#include "defret/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "defret/common.hpp"
#include "defret/fitgap.hpp"

namespace defret {

namespace {

constexpr double kMinPlateCells = 3.0;

}  // namespace

TriangleMesh box_mesh(const Vec3& lo, const Vec3& hi, double edge) {
  require(edge > 0.0 && (hi.array() > lo.array()).all(), ErrorCode::InvalidArgument, "box_mesh: invalid box");
  int n[3];
  for (int a = 0; a < 3; ++a) n[a] = std::max(1, static_cast<int>(std::ceil((hi[a] - lo[a]) / edge - 1e-9)));
  const auto lattice = [&](int i, int j, int k) {
    return (static_cast<std::size_t>(k) * (n[1] + 1) + j) * (n[0] + 1) + i;
  };
  std::vector<std::int64_t> index(static_cast<std::size_t>(n[0] + 1) * (n[1] + 1) * (n[2] + 1), -1);
  std::vector<Vec3> vertices;
  const auto vertex = [&](int i, int j, int k) -> std::uint32_t {
    auto& slot = index[lattice(i, j, k)];
    if (slot < 0) {
      slot = static_cast<std::int64_t>(vertices.size());
      vertices.emplace_back(lo[0] + (hi[0] - lo[0]) * i / n[0], lo[1] + (hi[1] - lo[1]) * j / n[1],
                            lo[2] + (hi[2] - lo[2]) * k / n[2]);
    }
    return static_cast<std::uint32_t>(slot);
  };

  std::vector<Triangle> triangles;
  // Face with fixed axis `a` at lattice coordinate `c`; (u, v) span the
  // other two axes.
  for (int a = 0; a < 3; ++a) {
    const int u = (a + 1) % 3, v = (a + 2) % 3;
    for (int c : {0, n[a]}) {
      for (int iu = 0; iu < n[u]; ++iu) {
        for (int iv = 0; iv < n[v]; ++iv) {
          std::uint32_t q[4];
          const int du[4] = {0, 1, 1, 0}, dv[4] = {0, 0, 1, 1};
          for (int m = 0; m < 4; ++m) {
            int ijk[3];
            ijk[a] = c;
            ijk[u] = iu + du[m];
            ijk[v] = iv + dv[m];
            q[m] = vertex(ijk[0], ijk[1], ijk[2]);
          }
          if (c == 0) {
            triangles.push_back({q[0], q[2], q[1]});
            triangles.push_back({q[0], q[3], q[2]});
          } else {
            triangles.push_back({q[0], q[1], q[2]});
            triangles.push_back({q[0], q[2], q[3]});
          }
        }
      }
    }
  }
  return TriangleMesh(std::move(vertices), std::move(triangles));
}

TriangleMesh merge_meshes(const std::vector<TriangleMesh>& parts) {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  for (const auto& m : parts) {
    const auto base = static_cast<std::uint32_t>(vertices.size());
    vertices.insert(vertices.end(), m.vertices().begin(), m.vertices().end());
    for (const auto& t : m.triangles()) triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
  }
  return TriangleMesh(std::move(vertices), std::move(triangles));
}

TriangleMesh sheet_mesh(double size, int n) {
  require(size > 0.0 && n >= 1, ErrorCode::InvalidArgument, "sheet_mesh: invalid size");
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  for (int j = 0; j <= n; ++j)
    for (int i = 0; i <= n; ++i) vertices.emplace_back(size * i / n, size * j / n, 0.0);
  const auto id = [n](int i, int j) { return static_cast<std::uint32_t>(j * (n + 1) + i); };
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  return TriangleMesh(std::move(vertices), std::move(triangles));
}

TriangleMesh bar_mesh(double length, double thickness, double edge) {
  const double h = 0.5 * thickness;
  return box_mesh(Vec3(0.0, -h, -h), Vec3(length, h, h), edge);
}

TriangleMesh comb_mesh(const CombParams& p) {
  require(p.teeth >= 1 && p.width > 0 && p.spine > 0 && p.tooth_length > 0 && p.tooth_width > 0 && p.thickness > 0,
          ErrorCode::InvalidArgument, "comb_mesh: invalid parameters");
  require(p.teeth * p.tooth_width <= p.width, ErrorCode::InvalidArgument, "comb_mesh: teeth do not fit the spine");
  const double hy = 0.5 * p.thickness;
  std::vector<TriangleMesh> parts;
  parts.push_back(box_mesh(Vec3(0.0, -hy, 0.0), Vec3(p.width, hy, p.spine), p.edge));
  // Teeth span the full spine: the outer ones are flush with its ends.
  for (int i = 0; i < p.teeth; ++i) {
    const double x0 = p.teeth == 1 ? 0.5 * (p.width - p.tooth_width)
                                   : (p.width - p.tooth_width) * i / (p.teeth - 1);
    parts.push_back(box_mesh(Vec3(x0, -hy, -p.tooth_length), Vec3(x0 + p.tooth_width, hy, 0.0), p.edge));
  }
  return merge_meshes(parts);
}

TriangleMesh table_mesh(const TableParams& p) {
  require(p.legs == 1 || p.legs == 2 || p.legs == 4, ErrorCode::InvalidArgument, "table_mesh: legs must be 1, 2 or 4");
  require(p.width > 0 && p.depth > 0 && p.height > p.top_thickness && p.top_thickness > 0 && p.leg_thickness > 0,
          ErrorCode::InvalidArgument, "table_mesh: invalid parameters");
  const double hx = 0.5 * p.width, hy = 0.5 * p.depth, leg_top = p.height - p.top_thickness;
  std::vector<TriangleMesh> parts;
  parts.push_back(box_mesh(Vec3(-hx, -hy, leg_top), Vec3(hx, hy, p.height), p.edge));
  const double t = p.leg_thickness;
  if (p.legs == 4) {
    for (double sx : {-1.0, 1.0}) {
      for (double sy : {-1.0, 1.0}) {
        const double cx = sx * (hx - t), cy = sy * (hy - t);
        parts.push_back(box_mesh(Vec3(cx - 0.5 * t, cy - 0.5 * t, 0.0), Vec3(cx + 0.5 * t, cy + 0.5 * t, leg_top), p.edge));
      }
    }
  } else if (p.legs == 2) {
    for (double sx : {-1.0, 1.0}) {
      const double cx = sx * (hx - t);
      parts.push_back(box_mesh(Vec3(cx - 0.5 * t, -hy + t, 0.0), Vec3(cx + 0.5 * t, hy - t, leg_top), p.edge));
    }
  } else {
    const double c = 1.5 * t;
    const double foot = p.top_thickness;
    parts.push_back(box_mesh(Vec3(-c, -c, foot), Vec3(c, c, leg_top), p.edge));
    parts.push_back(box_mesh(Vec3(-0.35 * p.width, -0.35 * p.depth, 0.0), Vec3(0.35 * p.width, 0.35 * p.depth, foot),
                             p.edge));
  }
  return merge_meshes(parts);
}

// ---- families -----------------------------------------------------------------------

void SyntheticParams::validate() const {
  require(!kinds.empty(), ErrorCode::Config, "synthetic: no kinds");
  for (const auto& k : kinds)
    require(k == "table" || k == "comb", ErrorCode::Config, "synthetic: unknown kind '" + k + "'");
  require(!table_legs.empty() && !comb_teeth.empty(), ErrorCode::Config, "synthetic: empty structure lists");
  for (int l : table_legs) require(l == 1 || l == 2 || l == 4, ErrorCode::Config, "synthetic: legs must be 1, 2 or 4");
  for (int t : comb_teeth) require(t >= 1 && t <= 8, ErrorCode::Config, "synthetic: teeth must be in [1, 8]");
  for (const auto* r : {&height, &width, &depth, &thickness})
    require(r->first > 0.0 && r->first <= r->second, ErrorCode::Config, "synthetic: invalid range");
  require(edge > 0.0, ErrorCode::Config, "synthetic: edge must be positive");
  require(train_points >= 1 && eval_points >= 1, ErrorCode::Config, "synthetic: cloud sizes must be >= 1");
}

nlohmann::ordered_json to_json(const SyntheticParams& p) {
  nlohmann::ordered_json j;
  j["kinds"] = p.kinds;
  j["table_legs"] = p.table_legs;
  j["comb_teeth"] = p.comb_teeth;
  j["height"] = {p.height.first, p.height.second};
  j["width"] = {p.width.first, p.width.second};
  j["depth"] = {p.depth.first, p.depth.second};
  j["thickness"] = {p.thickness.first, p.thickness.second};
  j["edge"] = p.edge;
  j["train_points"] = p.train_points;
  j["eval_points"] = p.eval_points;
  return j;
}

SyntheticParams synthetic_params_from_json(const nlohmann::json& j, SyntheticParams p) {
  require(j.is_object(), ErrorCode::Config, "synthetic params must be a JSON object");
  const auto range = [](const nlohmann::json& v) {
    const auto a = v.get<std::vector<double>>();
    require(a.size() == 2, ErrorCode::Config, "synthetic: ranges are [lo, hi]");
    return std::make_pair(a[0], a[1]);
  };
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "kinds") p.kinds = v.get<std::vector<std::string>>();
      else if (key == "table_legs") p.table_legs = v.get<std::vector<int>>();
      else if (key == "comb_teeth") p.comb_teeth = v.get<std::vector<int>>();
      else if (key == "height") p.height = range(v);
      else if (key == "width") p.width = range(v);
      else if (key == "depth") p.depth = range(v);
      else if (key == "thickness") p.thickness = range(v);
      else if (key == "edge") p.edge = v.get<double>();
      else if (key == "train_points") p.train_points = v.get<std::size_t>();
      else if (key == "eval_points") p.eval_points = v.get<std::size_t>();
      else fail(ErrorCode::Config, "synthetic: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("synthetic: ") + e.what());
  }
  return p;
}

std::vector<SyntheticShape> generate_synthetic(const SyntheticParams& params, std::size_t count, std::uint64_t seed) {
  params.validate();
  require(count >= 2, ErrorCode::InvalidArgument, "generate_synthetic: count must be >= 2");
  std::vector<SyntheticShape> out;
  out.reserve(count);
  std::vector<std::size_t> per_kind(params.kinds.size(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t kind_index = i % params.kinds.size();
    const std::string& kind = params.kinds[kind_index];
    const std::size_t n = per_kind[kind_index]++;
    Rng rng(derive_seed(seed, "synthetic/" + std::to_string(i)));
    const auto draw = [&](const std::pair<double, double>& r) { return uniform(rng, r.first, r.second); };

    SyntheticShape s;
    s.kind = kind;
    TriangleMesh mesh;
    if (kind == "table") {
      TableParams tp;
      tp.legs = params.table_legs[n % params.table_legs.size()];
      tp.height = draw(params.height);
      tp.width = draw(params.width);
      tp.depth = draw(params.depth);
      tp.leg_thickness = draw(params.thickness);
      tp.top_thickness = draw(params.thickness);
      tp.edge = params.edge;
      s.structure = tp.legs;
      mesh = table_mesh(tp);
    } else {
      CombParams cp;
      cp.teeth = params.comb_teeth[n % params.comb_teeth.size()];
      cp.width = draw(params.width);
      cp.tooth_length = 0.6 * draw(params.height);
      cp.thickness = draw(params.thickness);
      cp.spine = draw(params.thickness);
      cp.tooth_width = std::min(draw(params.thickness), cp.width / (2.0 * cp.teeth));
      // A comb is one plate: its two faces are `thickness` apart everywhere.
      // Thinner than three cells of the default fitting grid after
      // normalization, the field cannot separate them and deforming the comb
      // onto itself folds it flat, so the plate is thickened to that bound.
      const double in_plane = std::hypot(cp.width, cp.spine + cp.tooth_length);
      const double f = kMinPlateCells * std::sqrt(0.5 * identity_tolerance(UdfOptions{}));
      cp.thickness = std::max(cp.thickness, f * in_plane / std::sqrt(1.0 - f * f));
      cp.edge = params.edge;
      s.structure = cp.teeth;
      mesh = comb_mesh(cp);
    }
    char id[64];
    std::snprintf(id, sizeof id, "%s%d-%03zu", kind.c_str(), s.structure, i);
    s.record = make_shape_record(id, mesh, seed, params.train_points, params.eval_points);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace defret
