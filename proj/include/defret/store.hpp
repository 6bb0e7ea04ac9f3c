#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "defret/geometry.hpp"

namespace defret {

// Manifest: JSON array of {id, path, split}. Relative paths are resolved
// against the manifest's directory; split defaults to "train".
struct ManifestEntry {
  std::string id;
  std::string path;
  std::string split = "train";
};

std::vector<ManifestEntry> read_manifest(const std::string& path);

// Splits "test" and "query" hold queries; every other split is database.
bool is_query_split(const std::string& split);

struct StoreShape {
  std::string id;
  std::string split;
  std::string source;       // original mesh path
  std::string source_hash;  // of the source bytes and sampling settings
  std::uint64_t train_seed = 0;
  std::uint64_t eval_seed = 0;
};

struct IngestOptions {
  std::uint64_t seed = 0;
  std::size_t train_points = kTrainCloudPoints;
  std::size_t eval_points = kEvalCloudPoints;
};

struct IngestError {
  std::string id;
  std::string path;
  std::string message;
};

struct IngestReport {
  std::size_t written = 0;
  std::size_t unchanged = 0;
  std::vector<IngestError> errors;  // also written to <store>/errors.json
};

// Normalizes every listed mesh and stores it with both point clouds under
// `store_dir`. Entries whose source and settings are unchanged are skipped,
// so a rerun is a no-op. Unloadable files are reported and skipped.
IngestReport ingest(std::span<const ManifestEntry> manifest, const std::string& store_dir, const IngestOptions& opts);

// Writes already-built records (used for generated families).
void write_store(const std::string& store_dir, std::span<const ShapeRecord> shapes,
                 std::span<const std::string> splits);

// Store layout: store.json, meshes/<n>.obj, clouds/<n>.train.drpc,
// clouds/<n>.eval.drpc.
class ShapeStore {
 public:
  static ShapeStore open(const std::string& dir);

  const std::string& dir() const { return dir_; }
  std::span<const ShapeRecord> shapes() const { return shapes_; }
  const std::vector<StoreShape>& entries() const { return entries_; }
  std::size_t size() const { return shapes_.size(); }

  std::vector<std::uint32_t> database() const;
  std::vector<std::uint32_t> queries() const;
  std::optional<std::uint32_t> find(const std::string& id) const;
  // Hash of the store description; changes whenever any shape does.
  const std::string& hash() const { return hash_; }

 private:
  std::string dir_;
  std::vector<ShapeRecord> shapes_;
  std::vector<StoreShape> entries_;
  std::string hash_;
};

}  // namespace defret
