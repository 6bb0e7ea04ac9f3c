#include "defret/defret.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <new>

#include "defret/config.hpp"

namespace fs = std::filesystem;
using namespace defret;

struct defret_store {
  ShapeStore store;
};
struct defret_table {
  FitGapTable table;
};
struct defret_model {
  EmbeddingModel model;
  CheckpointMeta meta;
  std::string checkpoint_hash;
};

namespace {

thread_local std::string g_last_error;

template <class F>
defret_status guard(F&& f) {
  g_last_error.clear();
  try {
    f();
    return DEFRET_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<defret_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return DEFRET_INTERNAL;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return DEFRET_IO;
  } catch (const std::exception& e) {
    g_last_error = std::string("internal error: ") + e.what();
    return DEFRET_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  require(p != nullptr, ErrorCode::InvalidArgument, std::string(what) + " must not be NULL");
}

RunConfig parse_config(const char* json) {
  if (json == nullptr || *json == '\0') return run_config_from_json(nlohmann::json::object());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("config: ") + e.what());
  }
  return run_config_from_json(j);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put_string(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

// Fitting-gap settings that change e^m values; keys the dense-gap cache.
std::string gap_settings_hash(const RunConfig& c) {
  const auto j = to_json(c);
  nlohmann::ordered_json g;
  g["lambda"] = j["lambda"];
  g["chamfer_squared"] = j["chamfer_squared"];
  g["udf"] = j["udf"];
  g["solver"] = j["solver"];
  return hex64(fnv1a64(g.dump()));
}

ShapeRecord load_query(const std::string& path, const RunConfig& cfg, bool with_eval) {
  require(fs::exists(path), ErrorCode::NotFound, "query file '" + path + "' does not exist");
  return make_shape_record("query", load_mesh(path), cfg.seed, cfg.ingest.train_points,
                           with_eval ? cfg.ingest.eval_points : 0);
}

std::string provenance_line(const RunConfig& cfg) {
  return "# config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed) + "\n";
}

void check_compatible(const defret_model* m, const defret_store* s) {
  require(m->meta.store_hash.empty() || m->meta.store_hash == s->store.hash(), ErrorCode::Incompatible,
          "checkpoint was trained on store " + m->meta.store_hash + " but the store is " + s->store.hash());
}

// Observer codes for the database, cached as an index file when a cache
// directory is given. Codes always pass through the f32 file encoding so
// cached and fresh runs agree.
RetrievalIndex database_index(const defret_model* m, const defret_store* s, const std::vector<std::uint32_t>& db,
                              const std::string& cache_dir) {
  std::string path;
  if (!cache_dir.empty()) {
    fs::create_directories(cache_dir);
    path = (fs::path(cache_dir) / ("index-" + m->checkpoint_hash + "-" + s->store.hash() + ".didx")).string();
    if (fs::exists(path)) {
      auto index = decode_index(read_file(path));
      if (index.codes.size() == db.size() && index.k == m->model.k()) return index;
    }
  }
  std::vector<ShapeRecord> shapes;
  for (auto i : db) shapes.push_back(s->store.shapes()[i]);
  const std::string bytes = encode_index(build_index(shapes, m->model));
  if (!path.empty()) write_file(path, bytes);
  return decode_index(bytes);
}

std::string cache_dir_for(const defret_store* s, const char* cache_dir) {
  if (cache_dir && *cache_dir) return cache_dir;
  if (const char* env = std::getenv("DEFRET_CACHE_DIR"); env && *env) return env;
  return (fs::path(s->store.dir()) / "cache").string();
}

}  // namespace

extern "C" {

const char* defret_last_error(void) { return g_last_error.c_str(); }

const char* defret_status_string(defret_status status) {
  switch (status) {
    case DEFRET_OK: return "ok";
    case DEFRET_INVALID_ARGUMENT: return "invalid argument";
    case DEFRET_NOT_FOUND: return "not found";
    case DEFRET_IO: return "i/o error";
    case DEFRET_FORMAT: return "format error";
    case DEFRET_CONFIG: return "configuration error";
    case DEFRET_NUMERIC: return "numerical failure";
    case DEFRET_INCOMPATIBLE: return "incompatible inputs";
    case DEFRET_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void defret_string_free(char* s) { std::free(s); }

defret_status defret_config_hash(const char* config_json, char** hash_out) {
  return guard([&] {
    need(hash_out, "hash_out");
    put_string(hash_out, config_hash(parse_config(config_json)));
  });
}

defret_status defret_ingest(const char* manifest_path, const char* store_dir, const char* config_json,
                            char** report_json) {
  return guard([&] {
    need(manifest_path, "manifest_path");
    need(store_dir, "store_dir");
    const auto cfg = parse_config(config_json);
    require(fs::exists(manifest_path), ErrorCode::NotFound, std::string("manifest '") + manifest_path + "' does not exist");
    const auto manifest = read_manifest(manifest_path);
    const auto r = ingest(manifest, store_dir, cfg.ingest);
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    j["written"] = r.written;
    j["unchanged"] = r.unchanged;
    j["errors"] = nlohmann::ordered_json::array();
    for (const auto& e : r.errors) j["errors"].push_back({{"id", e.id}, {"path", e.path}, {"error", e.message}});
    put_string(report_json, j.dump(2));
  });
}

defret_status defret_synth(const char* store_dir, const char* config_json, char** report_json) {
  return guard([&] {
    need(store_dir, "store_dir");
    auto cfg = parse_config(config_json);
    auto params = cfg.synthetic;
    params.train_points = cfg.ingest.train_points;
    params.eval_points = cfg.ingest.eval_points;
    const auto family = generate_synthetic(params, cfg.synthetic_count, cfg.seed);
    std::vector<ShapeRecord> records;
    std::vector<std::string> splits;
    // Every k-th shape is held out so structures stay balanced across splits.
    const std::size_t n = family.size(), q = cfg.synthetic_queries;
    for (std::size_t i = 0; i < n; ++i) {
      records.push_back(family[i].record);
      const bool query = q > 0 && (i * q) / n != ((i + 1) * q) / n;
      splits.push_back(query ? "test" : "train");
    }
    write_store(store_dir, records, splits);
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    j["shapes"] = n;
    j["queries"] = q;
    put_string(report_json, j.dump(2));
  });
}

defret_status defret_store_open(const char* store_dir, defret_store** out) {
  return guard([&] {
    need(store_dir, "store_dir");
    need(out, "out");
    *out = nullptr;
    auto s = std::make_unique<defret_store>(defret_store{ShapeStore::open(store_dir)});
    *out = s.release();
  });
}

void defret_store_free(defret_store* store) { delete store; }

size_t defret_store_size(const defret_store* store) { return store ? store->store.size() : 0; }

const char* defret_store_id(const defret_store* store, size_t index) {
  if (!store || index >= store->store.size()) return nullptr;
  return store->store.entries()[index].id.c_str();
}

const char* defret_store_split(const defret_store* store, size_t index) {
  if (!store || index >= store->store.size()) return nullptr;
  return store->store.entries()[index].split.c_str();
}

const char* defret_store_hash(const defret_store* store) { return store ? store->store.hash().c_str() : nullptr; }

defret_status defret_fitgap_run(const defret_store* store, const char* table_path, const char* config_json, int resume,
                                size_t max_new_pairs, char** report_json) {
  return guard([&] {
    need(store, "store");
    need(table_path, "table_path");
    const auto cfg = parse_config(config_json);
    const auto all = store->store.shapes();
    const auto db = store->store.database();
    require(db.size() >= 2, ErrorCode::InvalidArgument, "fitgap: the store needs at least 2 database shapes");

    std::vector<ShapeRecord> db_shapes;
    for (auto i : db) db_shapes.push_back(all[i]);
    const auto local = sample_pairs(db_shapes, cfg.seed, cfg.n_nearest, cfg.n_random);
    // Table keys are store indices.
    PairSampling sampling;
    sampling.seed = local.seed;
    sampling.sources.resize(all.size());
    for (std::size_t t = 0; t < db.size(); ++t) {
      for (auto s : local.sources[t]) sampling.sources[db[t]].push_back(db[s]);
    }

    PrecomputeOptions opts;
    opts.fitgap = cfg.fitgap;
    opts.workers = cfg.workers;
    opts.table_path = table_path;
    opts.resume = resume != 0;
    if (max_new_pairs > 0) opts.max_new_pairs = max_new_pairs;
    const auto r = precompute(all, sampling, opts);

    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    j["store_hash"] = store->store.hash();
    j["pairs"] = sampling.pair_count();
    j["entries"] = r.table.size();
    j["computed"] = r.computed;
    j["reused"] = r.reused;
    j["complete"] = r.complete;
    j["failures"] = nlohmann::ordered_json::array();
    for (const auto& f : r.failures)
      j["failures"].push_back({{"source", all[f.source].id}, {"target", all[f.target].id}, {"error", f.message}});
    put_string(report_json, j.dump(2));
  });
}

defret_status defret_table_load(const char* path, defret_table** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto t = std::make_unique<defret_table>(defret_table{load_table(path)});
    *out = t.release();
  });
}

defret_status defret_table_save(const defret_table* table, const char* path) {
  return guard([&] {
    need(table, "table");
    need(path, "path");
    save_table(table->table, path);
  });
}

void defret_table_free(defret_table* table) { delete table; }

size_t defret_table_size(const defret_table* table) { return table ? table->table.size() : 0; }

defret_status defret_table_get(const defret_table* table, uint32_t source, uint32_t target, double* e_train,
                               double* e_eval) {
  return guard([&] {
    need(table, "table");
    const auto* e = table->table.find(source, target);
    require(e != nullptr, ErrorCode::NotFound,
            "no fitting gap for pair (" + std::to_string(source) + ", " + std::to_string(target) + ")");
    if (e_train) *e_train = e->e_train;
    if (e_eval) *e_eval = e->e_eval;
  });
}

defret_status defret_train_run(const defret_store* store, const char* table_path, const char* config_json,
                               const char* checkpoint_path, const char* history_csv_path) {
  return guard([&] {
    need(store, "store");
    need(table_path, "table_path");
    need(checkpoint_path, "checkpoint_path");
    const auto cfg = parse_config(config_json);
    const auto table = load_table(table_path);
    TrainOptions opts;
    opts.subset = store->store.database();
    const auto r = train(store->store.shapes(), table, cfg.train, opts);
    CheckpointMeta meta;
    meta.seed = cfg.seed;
    meta.epoch = cfg.train.epochs;
    meta.config_hash = config_hash(cfg);
    meta.store_hash = store->store.hash();
    meta.strategy = to_string(cfg.train.strategy);
    meta.prob_mode = to_string(cfg.train.prob_mode);
    save_checkpoint(r.model, meta, checkpoint_path);
    if (history_csv_path) {
      // Wall time is the only non-reproducible column; it stays in the log
      // but not in the checkpoint.
      write_file(history_csv_path, provenance_line(cfg) + history_csv(r.history));
    }
  });
}

defret_status defret_model_load(const char* checkpoint_path, defret_model** out) {
  return guard([&] {
    need(checkpoint_path, "checkpoint_path");
    need(out, "out");
    *out = nullptr;
    auto m = std::make_unique<defret_model>();
    m->model = load_checkpoint(checkpoint_path, &m->meta);
    m->checkpoint_hash = hex64(fnv1a64(encode_checkpoint(m->model)));
    *out = m.release();
  });
}

void defret_model_free(defret_model* model) { delete model; }

int defret_model_dim(const defret_model* model) { return model ? model->model.k() : 0; }

const char* defret_model_store_hash(const defret_model* model) {
  return model ? model->meta.store_hash.c_str() : nullptr;
}

defret_status defret_retrieve(const defret_model* model, const defret_store* store, const char* query_path,
                              const char* exclude_id, size_t n, const char* config_json, defret_hit* hits,
                              size_t* count) {
  return guard([&] {
    need(model, "model");
    need(store, "store");
    need(query_path, "query_path");
    need(count, "count");
    require(n == 0 || hits != nullptr, ErrorCode::InvalidArgument, "hits must not be NULL");
    *count = 0;
    const auto cfg = parse_config(config_json);
    check_compatible(model, store);
    const auto query = load_query(query_path, cfg, false);
    const auto db = store->store.database();
    require(!db.empty(), ErrorCode::InvalidArgument, "retrieve: the store has no database shapes");
    const auto index = database_index(model, store, db, cache_dir_for(store, nullptr));
    std::optional<std::uint32_t> exclude;
    if (exclude_id) {
      const auto id = store->store.find(exclude_id);
      require(id.has_value(), ErrorCode::NotFound, std::string("no shape '") + exclude_id + "' in the store");
      for (std::uint32_t i = 0; i < db.size(); ++i) {
        if (db[i] == *id) exclude = i;
      }
    }
    const auto found = retrieve(query.cloud_train, index, model->model, n, exclude);
    for (std::size_t i = 0; i < found.size(); ++i) hits[i] = {db[found[i].index], found[i].distance};
    *count = found.size();
  });
}

namespace {

void deform_and_export(const ShapeRecord& source, const ShapeRecord& target, const RunConfig& cfg, const char* out_obj,
                       const char* out_json) {
  const auto udf = build_target_udf(target, cfg.fitgap.udf);
  DeformationProblem problem{source.mesh, udf, cfg.fitgap.lambda};
  const auto r = deform(problem, cfg.fitgap.solver);
  save_obj(source.mesh.with_vertices(r.vertices), out_obj);
  auto j = nlohmann::ordered_json::parse(deformation_json(r));
  j["source"] = source.id;
  j["target"] = target.id;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  write_file(out_json, j.dump(2) + "\n");
}

}  // namespace

defret_status defret_deform_to_query(const defret_store* store, size_t source_index, const char* query_path,
                                     const char* config_json, const char* out_obj, const char* out_json) {
  return guard([&] {
    need(store, "store");
    need(query_path, "query_path");
    need(out_obj, "out_obj");
    need(out_json, "out_json");
    require(source_index < store->store.size(), ErrorCode::InvalidArgument, "deform: source index out of range");
    const auto cfg = parse_config(config_json);
    const auto query = load_query(query_path, cfg, false);
    deform_and_export(store->store.shapes()[source_index], query, cfg, out_obj, out_json);
  });
}

defret_status defret_deform_files(const char* source_path, const char* target_path, const char* config_json,
                                  const char* out_obj, const char* out_json) {
  return guard([&] {
    need(source_path, "source_path");
    need(target_path, "target_path");
    need(out_obj, "out_obj");
    need(out_json, "out_json");
    const auto cfg = parse_config(config_json);
    require(fs::exists(source_path), ErrorCode::NotFound, std::string("'") + source_path + "' does not exist");
    require(fs::exists(target_path), ErrorCode::NotFound, std::string("'") + target_path + "' does not exist");
    ShapeRecord source, target;
    source.id = fs::path(source_path).stem().string();
    source.mesh = normalize(load_mesh(source_path));
    target.id = fs::path(target_path).stem().string();
    target.mesh = normalize(load_mesh(target_path));
    deform_and_export(source, target, cfg, out_obj, out_json);
  });
}

defret_status defret_evaluate_run(const defret_model* model, const defret_store* store, const char* table_path,
                                  const char* config_json, const char* cache_dir, const char* out_prefix) {
  return guard([&] {
    need(model, "model");
    need(store, "store");
    need(out_prefix, "out_prefix");
    const auto cfg = parse_config(config_json);
    check_compatible(model, store);
    const auto shapes = store->store.shapes();
    const auto db = store->store.database();
    auto queries = store->store.queries();
    // Without a query split every database shape is a query against the rest.
    if (queries.empty()) queries = db;
    require(db.size() >= 2, ErrorCode::InvalidArgument, "evaluate: the store needs at least 2 database shapes");

    const std::string dir = cache_dir_for(store, cache_dir);
    fs::create_directories(dir);
    const std::string em_path =
        (fs::path(dir) / ("em-" + store->store.hash() + "-" + gap_settings_hash(cfg) + ".dfgt")).string();
    FitGapTable cached;
    if (fs::exists(em_path)) cached = recover_table(em_path);
    if (table_path && *table_path) {
      const FitGapTable given = load_table(table_path);
      for (const auto& [key, e] : given.entries()) {
        if (e.has_eval() && !cached.contains(key.first, key.second)) cached.set_eval(key.first, key.second, e.e_eval);
      }
    }
    EvalGapCache cache(shapes, cfg.fitgap, cfg.workers, std::move(cached));

    auto ours = make_embedding_ranker(shapes, model->model, std::string("ours_") + model->meta.strategy);
    auto baseline = make_ranked_cd_ranker(shapes, cfg.fitgap.chamfer);
    std::vector<MetricsReport> reports;
    reports.push_back(evaluate(*ours, shapes, queries, db, cache, cfg.eval));
    reports.push_back(evaluate(*baseline, shapes, queries, db, cache, cfg.eval));
    if (cache.computed() > 0) save_table(cache.table(), em_path);

    const double scale = cfg.paper_scale ? 100.0 : 1.0;
    write_file(std::string(out_prefix) + ".csv", provenance_line(cfg) + metrics_csv(reports, shapes, scale));
    auto j = metrics_json(reports, scale);
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    j["store_hash"] = store->store.hash();
    j["checkpoint_config_hash"] = model->meta.config_hash;
    write_file(std::string(out_prefix) + ".json", j.dump(2) + "\n");
  });
}

}  // extern "C"
