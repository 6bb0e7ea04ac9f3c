#include "defret/store.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <set>

#include <json.hpp>

#include "defret/common.hpp"

namespace fs = std::filesystem;

namespace defret {

namespace {

constexpr int kStoreVersion = 1;

std::string file_stem(const std::string& id) {
  std::string s;
  for (char c : id) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return s + "-" + hex64(fnv1a64(id)).substr(0, 8);
}

std::string mesh_rel(const std::string& id) { return "meshes/" + file_stem(id) + ".obj"; }
std::string train_rel(const std::string& id) { return "clouds/" + file_stem(id) + ".train.drpc"; }
std::string eval_rel(const std::string& id) { return "clouds/" + file_stem(id) + ".eval.drpc"; }

nlohmann::ordered_json entry_json(const StoreShape& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["split"] = s.split;
  j["source"] = s.source;
  j["source_hash"] = s.source_hash;
  j["train_seed"] = s.train_seed;
  j["eval_seed"] = s.eval_seed;
  j["mesh"] = mesh_rel(s.id);
  j["cloud_train"] = train_rel(s.id);
  j["cloud_eval"] = eval_rel(s.id);
  return j;
}

std::vector<StoreShape> read_entries(const std::string& dir) {
  const fs::path p = fs::path(dir) / "store.json";
  if (!fs::exists(p)) return {};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(p.string()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, p.string() + ": " + e.what());
  }
  require(j.value("version", 0) == kStoreVersion, ErrorCode::Format, p.string() + ": unsupported store version");
  std::vector<StoreShape> out;
  try {
    for (const auto& e : j.at("shapes")) {
      StoreShape s;
      s.id = e.at("id").get<std::string>();
      s.split = e.at("split").get<std::string>();
      s.source = e.at("source").get<std::string>();
      s.source_hash = e.at("source_hash").get<std::string>();
      s.train_seed = e.at("train_seed").get<std::uint64_t>();
      s.eval_seed = e.at("eval_seed").get<std::uint64_t>();
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, p.string() + ": " + e.what());
  }
  return out;
}

void write_entries(const std::string& dir, const std::vector<StoreShape>& entries) {
  nlohmann::ordered_json j;
  j["version"] = kStoreVersion;
  j["shapes"] = nlohmann::ordered_json::array();
  for (const auto& s : entries) j["shapes"].push_back(entry_json(s));
  const std::string text = j.dump(2) + "\n";
  const fs::path p = fs::path(dir) / "store.json";
  // Unchanged descriptions are left untouched.
  if (fs::exists(p) && read_file(p.string()) == text) return;
  write_file((p.string() + ".tmp"), text);
  fs::rename(p.string() + ".tmp", p);
}

void write_shape(const std::string& dir, const ShapeRecord& rec) {
  save_obj(rec.mesh, (fs::path(dir) / mesh_rel(rec.id)).string());
  save_cloud(rec.cloud_train, (fs::path(dir) / train_rel(rec.id)).string());
  save_cloud(rec.cloud_eval, (fs::path(dir) / eval_rel(rec.id)).string());
}

void make_layout(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "meshes", ec);
  fs::create_directories(fs::path(dir) / "clouds", ec);
  require(fs::is_directory(fs::path(dir) / "clouds"), ErrorCode::Io, "cannot create store directory '" + dir + "'");
}

}  // namespace

bool is_query_split(const std::string& split) { return split == "test" || split == "query"; }

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, path + ": " + e.what());
  }
  require(j.is_array(), ErrorCode::Config, path + ": manifest must be a JSON array of {id, path, split}");
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  try {
    for (const auto& e : j) {
      ManifestEntry m;
      m.id = e.at("id").get<std::string>();
      m.path = e.at("path").get<std::string>();
      m.split = e.value("split", std::string("train"));
      require(!m.id.empty(), ErrorCode::Config, path + ": empty shape id");
      require(seen.insert(m.id).second, ErrorCode::Config, path + ": duplicate shape id '" + m.id + "'");
      if (fs::path(m.path).is_relative()) m.path = (base / m.path).lexically_normal().string();
      out.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, path + ": " + e.what());
  }
  return out;
}

IngestReport ingest(std::span<const ManifestEntry> manifest, const std::string& store_dir, const IngestOptions& opts) {
  require(opts.train_points >= 1 && opts.eval_points >= 1, ErrorCode::Config, "ingest: cloud sizes must be >= 1");
  make_layout(store_dir);
  std::map<std::string, StoreShape> existing;
  for (auto& s : read_entries(store_dir)) existing[s.id] = s;

  IngestReport report;
  std::vector<StoreShape> entries;
  for (const auto& m : manifest) {
    std::string bytes;
    try {
      bytes = read_file(m.path);
    } catch (const Error& e) {
      report.errors.push_back({m.id, m.path, e.what()});
      continue;
    }
    const std::string settings = std::to_string(opts.seed) + "/" + std::to_string(opts.train_points) + "/" +
                                 std::to_string(opts.eval_points);
    const std::string hash = hex64(fnv1a64(settings, fnv1a64(bytes)));
    if (auto it = existing.find(m.id); it != existing.end() && it->second.source_hash == hash &&
                                       fs::exists(fs::path(store_dir) / eval_rel(m.id))) {
      StoreShape s = it->second;
      s.split = m.split;
      s.source = m.path;
      entries.push_back(std::move(s));
      ++report.unchanged;
      continue;
    }
    try {
      const auto ext = fs::path(m.path).extension().string();
      TriangleMesh mesh;
      if (ext == ".obj" || ext == ".OBJ") mesh = parse_obj(bytes);
      else if (ext == ".off" || ext == ".OFF") mesh = parse_off(bytes);
      else if (ext == ".ply" || ext == ".PLY") mesh = parse_ply(bytes);
      else fail(ErrorCode::Format, "unsupported mesh format '" + ext + "'");
      const ShapeRecord rec = make_shape_record(m.id, mesh, opts.seed, opts.train_points, opts.eval_points);
      write_shape(store_dir, rec);
      entries.push_back({m.id, m.split, m.path, hash, rec.cloud_train.seed, rec.cloud_eval.seed});
      ++report.written;
    } catch (const Error& e) {
      report.errors.push_back({m.id, m.path, e.what()});
    }
  }
  write_entries(store_dir, entries);

  nlohmann::ordered_json errors = nlohmann::ordered_json::array();
  for (const auto& e : report.errors) errors.push_back({{"id", e.id}, {"path", e.path}, {"error", e.message}});
  write_file((fs::path(store_dir) / "errors.json").string(), errors.dump(2) + "\n");
  return report;
}

void write_store(const std::string& store_dir, std::span<const ShapeRecord> shapes,
                 std::span<const std::string> splits) {
  require(shapes.size() == splits.size(), ErrorCode::InvalidArgument, "write_store: one split per shape");
  make_layout(store_dir);
  std::vector<StoreShape> entries;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& rec = shapes[i];
    write_shape(store_dir, rec);
    const std::string obj = to_obj(rec.mesh);
    entries.push_back({rec.id, splits[i], "generated", hex64(fnv1a64(obj)), rec.cloud_train.seed, rec.cloud_eval.seed});
  }
  write_entries(store_dir, entries);
}

ShapeStore ShapeStore::open(const std::string& dir) {
  require(fs::exists(fs::path(dir) / "store.json"), ErrorCode::NotFound, "no shape store at '" + dir + "'");
  ShapeStore store;
  store.dir_ = dir;
  store.entries_ = read_entries(dir);
  store.hash_ = hex64(fnv1a64(read_file((fs::path(dir) / "store.json").string())));
  for (const auto& e : store.entries_) {
    ShapeRecord rec;
    rec.id = e.id;
    try {
      rec.mesh = parse_obj(read_file((fs::path(dir) / mesh_rel(e.id)).string()));
      rec.cloud_train = load_cloud((fs::path(dir) / train_rel(e.id)).string());
      rec.cloud_eval = load_cloud((fs::path(dir) / eval_rel(e.id)).string());
    } catch (const Error& err) {
      throw Error(err.code(), "store '" + dir + "', shape '" + e.id + "': " + err.what());
    }
    rec.cloud_train.source_shape_id = rec.cloud_eval.source_shape_id = e.id;
    rec.cloud_train.seed = e.train_seed;
    rec.cloud_eval.seed = e.eval_seed;
    store.shapes_.push_back(std::move(rec));
  }
  return store;
}

std::vector<std::uint32_t> ShapeStore::database() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < entries_.size(); ++i) {
    if (!is_query_split(entries_[i].split)) out.push_back(i);
  }
  return out;
}

std::vector<std::uint32_t> ShapeStore::queries() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < entries_.size(); ++i) {
    if (is_query_split(entries_[i].split)) out.push_back(i);
  }
  return out;
}

std::optional<std::uint32_t> ShapeStore::find(const std::string& id) const {
  for (std::uint32_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].id == id) return i;
  }
  return std::nullopt;
}

}  // namespace defret
