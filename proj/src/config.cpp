#include "defret/config.hpp"

#include "defret/common.hpp"

namespace defret {

void RunConfig::validate() const {
  require(workers >= 1, ErrorCode::Config, "config: workers must be >= 1");
  require(ingest.train_points >= 1 && ingest.eval_points >= 1, ErrorCode::Config, "config: cloud sizes must be >= 1");
  require(fitgap.udf.resolution >= 2, ErrorCode::Config, "config: udf resolution must be >= 2");
  require(fitgap.udf.margin >= 0.1, ErrorCode::Config, "config: udf margin must be >= 0.1");
  require(fitgap.lambda >= 0.0, ErrorCode::Config, "config: lambda must be non-negative");
  fitgap.solver.validate();
  train.validate();
  require(eval.top_n >= 1 && eval.n_rank >= 1 && eval.recall_k >= 1, ErrorCode::Config,
          "config: eval counts must be >= 1");
  synthetic.validate();
  require(synthetic_count >= 2 && synthetic_queries < synthetic_count, ErrorCode::Config,
          "config: synthetic count must be >= 2 and exceed the query count");
}

namespace {

template <class F>
void each(const nlohmann::json& j, const std::string& section, F&& f) {
  require(j.is_object(), ErrorCode::Config, "config: '" + section + "' must be an object");
  for (const auto& [key, v] : j.items()) {
    if (!f(key, v)) fail(ErrorCode::Config, "config: unknown key '" + section + "." + key + "'");
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  nlohmann::json train_json = nlohmann::json::object();
  try {
    each(j, "config", [&](const std::string& key, const nlohmann::json& v) {
      if (key == "category") c.category = v.get<std::string>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "workers") c.workers = v.get<int>();
      else if (key == "paper_scale") c.paper_scale = v.get<bool>();
      else if (key == "lambda") c.fitgap.lambda = v.get<double>();
      else if (key == "chamfer_squared") c.fitgap.chamfer.squared = v.get<bool>();
      else if (key == "ingest") {
        each(v, key, [&](const std::string& k, const nlohmann::json& x) {
          if (k == "train_points") c.ingest.train_points = x.get<std::size_t>();
          else if (k == "eval_points") c.ingest.eval_points = x.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (key == "udf") {
        each(v, key, [&](const std::string& k, const nlohmann::json& x) {
          if (k == "resolution") c.fitgap.udf.resolution = x.get<int>();
          else if (k == "margin") c.fitgap.udf.margin = x.get<double>();
          else return false;
          return true;
        });
      } else if (key == "solver") {
        auto& s = c.fitgap.solver;
        each(v, key, [&](const std::string& k, const nlohmann::json& x) {
          if (k == "max_iterations") s.max_iterations = x.get<int>();
          else if (k == "gradient_tolerance") s.gradient_tolerance = x.get<double>();
          else if (k == "initial_step") s.initial_step = x.get<double>();
          else if (k == "max_step") s.max_step = x.get<double>();
          else if (k == "step_growth") s.step_growth = x.get<double>();
          else if (k == "backtrack") s.backtrack = x.get<double>();
          else if (k == "armijo_c") s.armijo_c = x.get<double>();
          else if (k == "min_step") s.min_step = x.get<double>();
          else if (k == "max_escape_iterations") s.max_escape_iterations = x.get<int>();
          else if (k == "squared_fit") s.squared_fit = x.get<bool>();
          else return false;
          return true;
        });
      } else if (key == "sampling") {
        each(v, key, [&](const std::string& k, const nlohmann::json& x) {
          if (k == "n_nearest") c.n_nearest = x.get<std::size_t>();
          else if (k == "n_random") c.n_random = x.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (key == "train") {
        train_json = v;
      } else if (key == "eval") {
        each(v, key, [&](const std::string& k, const nlohmann::json& x) {
          if (k == "table1") c.eval.table1 = x.get<bool>();
          else if (k == "rank") c.eval.rank = x.get<bool>();
          else if (k == "top_n") c.eval.top_n = x.get<std::size_t>();
          else if (k == "n_rank") c.eval.n_rank = x.get<std::size_t>();
          else if (k == "recall_k") c.eval.recall_k = x.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (key == "synthetic") {
        nlohmann::json rest = nlohmann::json::object();
        for (const auto& [k, x] : v.items()) {
          if (k == "count") c.synthetic_count = x.get<std::size_t>();
          else if (k == "queries") c.synthetic_queries = x.get<std::size_t>();
          else rest[k] = x;
        }
        c.synthetic = synthetic_params_from_json(rest);
      } else {
        return false;
      }
      return true;
    });
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("config: ") + e.what());
  }
  if (train_json.is_object() && train_json.contains("seed"))
    fail(ErrorCode::Config, "config: train.seed is derived from the root seed");
  c.train = train_config_from_json(train_json);
  c.train.seed = c.seed;
  c.ingest.seed = c.seed;
  c.eval.seed = c.seed;
  c.fitgap.solver.seed = c.seed;
  c.fitgap.udf.workers = 1;
  c.validate();
  return c;
}

RunConfig run_config_from_file(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, path + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["category"] = c.category;
  j["seed"] = c.seed;
  j["paper_scale"] = c.paper_scale;
  j["lambda"] = c.fitgap.lambda;
  j["chamfer_squared"] = c.fitgap.chamfer.squared;
  j["ingest"] = {{"train_points", c.ingest.train_points}, {"eval_points", c.ingest.eval_points}};
  j["udf"] = {{"resolution", c.fitgap.udf.resolution}, {"margin", c.fitgap.udf.margin}};
  const auto& s = c.fitgap.solver;
  j["solver"] = {{"max_iterations", s.max_iterations}, {"gradient_tolerance", s.gradient_tolerance},
                 {"initial_step", s.initial_step},     {"max_step", s.max_step},
                 {"step_growth", s.step_growth},       {"backtrack", s.backtrack},
                 {"armijo_c", s.armijo_c},             {"min_step", s.min_step},
                 {"max_escape_iterations", s.max_escape_iterations}, {"squared_fit", s.squared_fit}};
  j["sampling"] = {{"n_nearest", c.n_nearest}, {"n_random", c.n_random}};
  auto t = to_json(c.train);
  t.erase("seed");
  j["train"] = t;
  j["eval"] = {{"table1", c.eval.table1}, {"rank", c.eval.rank}, {"top_n", c.eval.top_n},
               {"n_rank", c.eval.n_rank}, {"recall_k", c.eval.recall_k}};
  auto syn = to_json(c.synthetic);
  syn["count"] = c.synthetic_count;
  syn["queries"] = c.synthetic_queries;
  j["synthetic"] = syn;
  // Worker count never changes results and is left out of the hash.
  return j;
}

std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

}  // namespace defret
