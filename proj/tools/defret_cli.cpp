// Command-line front end. Talks to the engine only through the C API.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "defret/defret.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code(defret_status s) {
  switch (s) {
    case DEFRET_OK: return kExitOk;
    case DEFRET_IO:
    case DEFRET_NUMERIC:
    case DEFRET_INTERNAL: return kExitInternal;
    default: return kExitUsage;
  }
}

// Throws on failure so every subcommand reports through one path.
struct StatusError {
  defret_status status;
  std::string message;
};

void check(defret_status s) {
  if (s != DEFRET_OK) throw StatusError{s, defret_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  defret_string_free(s);
  return out;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool paper_scale = false;
  std::string strategy;
  std::string prob_mode;
};

// Config file merged with command-line overrides, as JSON text.
std::string config_json(const Common& c, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw UsageError("cannot open config '" + c.config_path + "'");
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config '" + c.config_path + "': " + e.what());
    }
    if (!j.is_object()) throw UsageError("config '" + c.config_path + "' must be a JSON object");
  }
  if (c.seed) j["seed"] = *c.seed;
  if (c.workers) j["workers"] = *c.workers;
  if (c.paper_scale) j["paper_scale"] = true;
  if (!c.strategy.empty()) j["train"]["strategy"] = c.strategy;
  if (!c.prob_mode.empty()) j["train"]["prob_mode"] = c.prob_mode;
  j.merge_patch(extra);
  return j.dump();
}

struct StoreHandle {
  defret_store* p = nullptr;
  explicit StoreHandle(const std::string& dir) { check(defret_store_open(dir.c_str(), &p)); }
  ~StoreHandle() { defret_store_free(p); }
};

struct ModelHandle {
  defret_model* p = nullptr;
  explicit ModelHandle(const std::string& path) { check(defret_model_load(path.c_str(), &p)); }
  ~ModelHandle() { defret_model_free(p); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformation-aware 3D shape retrieval"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  int workers_value = 1;
  app.add_option("--config", common.config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed_value, "Root seed for every random stream");
  auto* workers_opt = app.add_option("--workers", workers_value, "Worker threads (1 is bit-deterministic)")
                          ->check(CLI::PositiveNumber);
  app.add_flag("--paper-scale", common.paper_scale, "Report distances multiplied by 100");

  // ingest
  std::string manifest, store_dir;
  auto* ingest = app.add_subcommand("ingest", "Normalize and sample meshes listed in a manifest into a store");
  ingest->add_option("manifest", manifest, "JSON array of {id, path, split}")->required();
  ingest->add_option("store", store_dir, "Store directory")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the procedural benchmark family into a store");
  synth->add_option("store", store_dir, "Store directory")->required();

  // fitgap
  std::string table_path;
  bool resume = false;
  std::size_t max_new_pairs = 0;
  auto* fitgap = app.add_subcommand("fitgap", "Sample pairs and precompute fitting gaps");
  fitgap->add_option("store", store_dir, "Store directory")->required();
  fitgap->add_option("table", table_path, "Fit-gap table file")->required();
  fitgap->add_flag("--resume", resume, "Keep the valid records of an interrupted run");
  fitgap->add_option("--max-new-pairs", max_new_pairs, "Stop after this many new pairs (0 = all)");

  // train
  std::string checkpoint, history;
  auto* train = app.add_subcommand("train", "Train the embedding on a fit-gap table");
  train->add_option("store", store_dir, "Store directory")->required();
  train->add_option("table", table_path, "Fit-gap table file")->required();
  train->add_option("checkpoint", checkpoint, "Output checkpoint")->required();
  train->add_option("--history", history, "Per-epoch loss CSV (default: <checkpoint>.history.csv)");
  train->add_option("--strategy", common.strategy, "margin or regression")
      ->check(CLI::IsMember({"margin", "regression"}));
  train->add_option("--prob-mode", common.prob_mode, "literal or consistent")
      ->check(CLI::IsMember({"literal", "consistent"}));

  // retrieve
  std::string query, exclude, out_dir;
  std::size_t n = 5;
  bool with_deform = false;
  auto* retrieve = app.add_subcommand("retrieve", "Rank store shapes for a query mesh");
  retrieve->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  retrieve->add_option("store", store_dir, "Store directory")->required();
  retrieve->add_option("query", query, "Query mesh (OBJ, OFF or PLY)")->required();
  retrieve->add_option("-n,--top", n, "Number of results")->check(CLI::PositiveNumber);
  retrieve->add_option("--exclude", exclude, "Store id to leave out");
  retrieve->add_flag("--deform", with_deform, "Deform every result toward the query");
  retrieve->add_option("--out-dir", out_dir, "Directory for --deform outputs (default: .)");

  // evaluate
  std::string protocol = "all", out_prefix = "metrics", cache_dir;
  std::optional<std::size_t> n_rank;
  auto* evaluate = app.add_subcommand("evaluate", "Table / rank / recall protocols against Ranked-CD");
  evaluate->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  evaluate->add_option("store", store_dir, "Store directory")->required();
  evaluate->add_option("--table", table_path, "Fit-gap table with precomputed dense gaps");
  evaluate->add_option("--protocol", protocol, "table1, rank or all")->check(CLI::IsMember({"table1", "rank", "all"}));
  evaluate->add_option("--n", n_rank, "Candidate pool size for the rank protocol");
  evaluate->add_option("--out", out_prefix, "Output prefix for .csv and .json");
  evaluate->add_option("--cache-dir", cache_dir, "Dense-gap cache (default: $DEFRET_CACHE_DIR or <store>/cache)");

  // deform
  std::string source, target, out_obj, out_json;
  auto* deform = app.add_subcommand("deform", "Deform one mesh toward another");
  deform->add_option("source", source, "Source mesh")->required();
  deform->add_option("target", target, "Target mesh")->required();
  deform->add_option("out_obj", out_obj, "Deformed mesh output")->required();
  deform->add_option("--report", out_json, "Energy report (default: <out_obj>.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  if (*seed_opt) common.seed = seed_value;
  if (*workers_opt) common.workers = workers_value;

  try {
    if (ingest->parsed()) {
      std::cout << take([&] {
        char* r = nullptr;
        check(defret_ingest(manifest.c_str(), store_dir.c_str(), config_json(common).c_str(), &r));
        return r;
      }()) << "\n";
    } else if (synth->parsed()) {
      char* r = nullptr;
      check(defret_synth(store_dir.c_str(), config_json(common).c_str(), &r));
      std::cout << take(r) << "\n";
    } else if (fitgap->parsed()) {
      StoreHandle store(store_dir);
      char* r = nullptr;
      check(defret_fitgap_run(store.p, table_path.c_str(), config_json(common).c_str(), resume ? 1 : 0, max_new_pairs,
                              &r));
      std::cout << take(r) << "\n";
    } else if (train->parsed()) {
      if (!fs::exists(table_path)) throw UsageError("table '" + table_path + "' does not exist");
      StoreHandle store(store_dir);
      if (history.empty()) history = checkpoint + ".history.csv";
      check(defret_train_run(store.p, table_path.c_str(), config_json(common).c_str(), checkpoint.c_str(),
                             history.c_str()));
      std::cout << "wrote " << checkpoint << " and " << history << "\n";
    } else if (retrieve->parsed()) {
      if (!fs::exists(query)) throw UsageError("query file '" + query + "' does not exist");
      ModelHandle model(checkpoint);
      StoreHandle store(store_dir);
      const std::string cfg = config_json(common);
      std::vector<defret_hit> hits(n);
      std::size_t count = 0;
      check(defret_retrieve(model.p, store.p, query.c_str(), exclude.empty() ? nullptr : exclude.c_str(), n,
                            cfg.c_str(), hits.data(), &count));
      nlohmann::ordered_json out = nlohmann::ordered_json::array();
      if (with_deform && out_dir.empty()) out_dir = ".";
      if (with_deform) fs::create_directories(out_dir);
      for (std::size_t i = 0; i < count; ++i) {
        const std::string id = defret_store_id(store.p, hits[i].index);
        nlohmann::ordered_json h{{"rank", i + 1}, {"id", id}, {"distance", hits[i].distance}};
        if (with_deform) {
          const std::string stem = (fs::path(out_dir) / (std::to_string(i + 1) + "-" + id)).string();
          check(defret_deform_to_query(store.p, hits[i].index, query.c_str(), cfg.c_str(), (stem + ".obj").c_str(),
                                       (stem + ".json").c_str()));
          h["deformed"] = stem + ".obj";
          h["report"] = stem + ".json";
        }
        out.push_back(h);
      }
      std::cout << out.dump(2) << "\n";
    } else if (evaluate->parsed()) {
      if (!table_path.empty() && !fs::exists(table_path)) throw UsageError("table '" + table_path + "' does not exist");
      ModelHandle model(checkpoint);
      StoreHandle store(store_dir);
      nlohmann::json extra = nlohmann::json::object();
      if (protocol != "all") {
        extra["eval"]["table1"] = protocol == "table1";
        extra["eval"]["rank"] = protocol == "rank";
      }
      if (n_rank) extra["eval"]["n_rank"] = *n_rank;
      check(defret_evaluate_run(model.p, store.p, table_path.c_str(), config_json(common, extra).c_str(),
                                cache_dir.empty() ? nullptr : cache_dir.c_str(), out_prefix.c_str()));
      std::cout << "wrote " << out_prefix << ".csv and " << out_prefix << ".json\n";
    } else if (deform->parsed()) {
      if (out_json.empty()) out_json = out_obj + ".json";
      check(defret_deform_files(source.c_str(), target.c_str(), config_json(common).c_str(), out_obj.c_str(),
                                out_json.c_str()));
      std::cout << "wrote " << out_obj << " and " << out_json << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const StatusError& e) {
    std::cerr << "error (" << defret_status_string(e.status) << "): " << e.message << "\n";
    return exit_code(e.status);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitOk;
}
