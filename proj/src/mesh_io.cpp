#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "defret/common.hpp"
#include "defret/geometry.hpp"

namespace defret {

namespace {

std::string lower_ext(const std::string& path) {
  auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

void fan_triangulate(const std::vector<std::uint32_t>& poly, std::vector<Triangle>& out) {
  require(poly.size() >= 3, ErrorCode::Format, "face with fewer than 3 vertices cannot be triangulated");
  for (std::size_t k = 1; k + 1 < poly.size(); ++k) out.push_back({poly[0], poly[k], poly[k + 1]});
}

TriangleMesh finish(std::vector<Vec3> v, std::vector<Triangle> t, const char* fmt) {
  require(!v.empty(), ErrorCode::Format, std::string(fmt) + ": mesh has zero vertices");
  return TriangleMesh(std::move(v), std::move(t));
}

// Strips '#' comments and blank lines.
std::vector<std::string> content_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(line);
  }
  return out;
}

}  // namespace

TriangleMesh parse_obj(const std::string& text) {
  std::vector<Vec3> v;
  std::vector<Triangle> tris;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) fail(ErrorCode::Format, "obj line " + std::to_string(lineno) + ": bad vertex");
      v.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::vector<std::uint32_t> poly;
      std::string tok;
      while (ls >> tok) {
        long idx = 0;
        auto slash = tok.find('/');
        auto head = tok.substr(0, slash);
        auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), idx);
        if (ec != std::errc() || idx == 0) fail(ErrorCode::Format, "obj line " + std::to_string(lineno) + ": bad face index");
        long resolved = idx > 0 ? idx - 1 : static_cast<long>(v.size()) + idx;
        if (resolved < 0) fail(ErrorCode::Format, "obj line " + std::to_string(lineno) + ": face index out of range");
        poly.push_back(static_cast<std::uint32_t>(resolved));
      }
      fan_triangulate(poly, tris);
    }
  }
  return finish(std::move(v), std::move(tris), "obj");
}

TriangleMesh parse_off(const std::string& text) {
  auto lines = content_lines(text);
  require(!lines.empty(), ErrorCode::Format, "off: empty file");
  std::istringstream hs(lines[0]);
  std::string magic;
  hs >> magic;
  require(magic.size() >= 3 && magic.substr(magic.size() - 3) == "OFF", ErrorCode::Format, "off: missing OFF header");
  std::size_t next = 1;
  std::size_t nv = 0, nf = 0;
  if (!(hs >> nv >> nf)) {
    require(lines.size() > 1, ErrorCode::Format, "off: missing counts");
    std::istringstream cs(lines[next++]);
    if (!(cs >> nv >> nf)) fail(ErrorCode::Format, "off: bad counts line");
  }
  require(lines.size() >= next + nv + nf, ErrorCode::Format, "off: truncated file");
  std::vector<Vec3> v;
  v.reserve(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    std::istringstream ls(lines[next++]);
    double x, y, z;
    if (!(ls >> x >> y >> z)) fail(ErrorCode::Format, "off: bad vertex " + std::to_string(i));
    v.emplace_back(x, y, z);
  }
  std::vector<Triangle> tris;
  for (std::size_t f = 0; f < nf; ++f) {
    std::istringstream ls(lines[next++]);
    std::size_t k;
    if (!(ls >> k)) fail(ErrorCode::Format, "off: bad face " + std::to_string(f));
    std::vector<std::uint32_t> poly(k);
    for (auto& idx : poly) {
      if (!(ls >> idx)) fail(ErrorCode::Format, "off: bad face " + std::to_string(f));
    }
    fan_triangulate(poly, tris);
  }
  return finish(std::move(v), std::move(tris), "off");
}

namespace {

struct PlyProperty {
  std::string name;
  std::string type;       // scalar type, or the item type for lists
  std::string count_type; // non-empty for list properties
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  fail(ErrorCode::Format, "ply: unknown property type '" + t + "'");
}

template <class T>
T load_swapped(const char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

double ply_read_binary(le::Reader& r, const std::string& t, bool swap) {
  auto bytes = r.bytes(ply_type_size(t));
  const char* p = bytes.data();
  if (t == "char" || t == "int8") return load_swapped<std::int8_t>(p, false);
  if (t == "uchar" || t == "uint8") return load_swapped<std::uint8_t>(p, false);
  if (t == "short" || t == "int16") return load_swapped<std::int16_t>(p, swap);
  if (t == "ushort" || t == "uint16") return load_swapped<std::uint16_t>(p, swap);
  if (t == "int" || t == "int32") return load_swapped<std::int32_t>(p, swap);
  if (t == "uint" || t == "uint32") return load_swapped<std::uint32_t>(p, swap);
  if (t == "float" || t == "float32") return load_swapped<float>(p, swap);
  return load_swapped<double>(p, swap);
}

}  // namespace

TriangleMesh parse_ply(const std::string& bytes) {
  std::size_t end = bytes.find("end_header");
  require(bytes.rfind("ply", 0) == 0 && end != std::string::npos, ErrorCode::Format, "ply: missing header");
  std::size_t body = bytes.find('\n', end);
  require(body != std::string::npos, ErrorCode::Format, "ply: truncated header");
  ++body;

  std::istringstream hs(bytes.substr(0, end));
  std::string line, format;
  std::vector<PlyElement> elements;
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      ls >> format;
    } else if (tag == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(std::move(e));
    } else if (tag == "property") {
      require(!elements.empty(), ErrorCode::Format, "ply: property before element");
      PlyProperty p;
      ls >> p.type;
      if (p.type == "list") {
        ls >> p.count_type >> p.type;
      }
      ls >> p.name;
      elements.back().props.push_back(std::move(p));
    }
  }
  require(format == "ascii" || format == "binary_little_endian" || format == "binary_big_endian", ErrorCode::Format,
          "ply: unsupported format '" + format + "'");

  std::vector<Vec3> v;
  std::vector<Triangle> tris;
  const bool ascii = format == "ascii";
  const bool swap = format == "binary_big_endian";

  std::istringstream as(ascii ? bytes.substr(body) : std::string());
  le::Reader br(std::string_view(bytes).substr(body), "ply");
  auto read_value = [&](const std::string& type) -> double {
    if (ascii) {
      double x;
      if (!(as >> x)) fail(ErrorCode::Format, "ply: truncated ascii body");
      return x;
    }
    return ply_read_binary(br, type, swap);
  };

  for (const auto& e : elements) {
    for (std::size_t i = 0; i < e.count; ++i) {
      Vec3 p = Vec3::Zero();
      std::vector<std::uint32_t> poly;
      for (const auto& prop : e.props) {
        if (!prop.count_type.empty()) {
          const auto n = static_cast<std::size_t>(read_value(prop.count_type));
          std::vector<std::uint32_t> items(n);
          for (auto& it : items) it = static_cast<std::uint32_t>(read_value(prop.type));
          if (prop.name == "vertex_indices" || prop.name == "vertex_index") poly = std::move(items);
        } else {
          const double x = read_value(prop.type);
          if (prop.name == "x") p.x() = x;
          else if (prop.name == "y") p.y() = x;
          else if (prop.name == "z") p.z() = x;
        }
      }
      if (e.name == "vertex") v.push_back(p);
      else if (e.name == "face") fan_triangulate(poly, tris);
    }
  }
  return finish(std::move(v), std::move(tris), "ply");
}

TriangleMesh load_mesh(const std::string& path) {
  const std::string ext = lower_ext(path);
  const std::string data = read_file(path);
  try {
    if (ext == "obj") return parse_obj(data);
    if (ext == "off") return parse_off(data);
    if (ext == "ply") return parse_ply(data);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
  fail(ErrorCode::Format, "unsupported mesh format '" + ext + "' (" + path + ")");
}

std::string to_obj(const TriangleMesh& mesh) {
  std::string out;
  char buf[128];
  for (const auto& p : mesh.vertices()) {
    std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", p.x(), p.y(), p.z());
    out += buf;
  }
  for (const auto& t : mesh.triangles()) {
    std::snprintf(buf, sizeof buf, "f %u %u %u\n", t[0] + 1, t[1] + 1, t[2] + 1);
    out += buf;
  }
  return out;
}

void save_obj(const TriangleMesh& mesh, const std::string& path) { write_file(path, to_obj(mesh)); }

std::string encode_cloud(const PointCloud& cloud) {
  std::string out = "DRPC";
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(cloud.size()));
  for (const auto& p : cloud.points) {
    for (int k = 0; k < 3; ++k) le::put<float>(out, static_cast<float>(p[k]));
  }
  return out;
}

PointCloud decode_cloud(const std::string& bytes) {
  le::Reader r(bytes, "point cloud");
  require(r.bytes(4) == "DRPC", ErrorCode::Format, "point cloud: bad magic");
  const auto n = r.get<std::uint32_t>();
  PointCloud cloud;
  cloud.points.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const double x = r.get<float>(), y = r.get<float>(), z = r.get<float>();
    cloud.points.emplace_back(x, y, z);
  }
  return cloud;
}

void save_cloud(const PointCloud& cloud, const std::string& path) { write_file(path, encode_cloud(cloud)); }

PointCloud load_cloud(const std::string& path) { return decode_cloud(read_file(path)); }

std::string to_xyz(const PointCloud& cloud) {
  std::string out;
  char buf[96];
  for (const auto& p : cloud.points) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", p.x(), p.y(), p.z());
    out += buf;
  }
  return out;
}

}  // namespace defret
