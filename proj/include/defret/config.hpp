#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "defret/fitgap.hpp"
#include "defret/reteval.hpp"
#include "defret/store.hpp"
#include "defret/synthetic.hpp"
#include "defret/train.hpp"

namespace defret {

// Everything that determines a run's outputs. Every random stream derives
// from `seed` by stage name.
struct RunConfig {
  std::string category;
  std::uint64_t seed = 0;
  int workers = 1;
  IngestOptions ingest;
  FitGapOptions fitgap;
  std::size_t n_nearest = 50;
  std::size_t n_random = 50;
  TrainConfig train;
  EvalOptions eval;
  bool paper_scale = false;
  SyntheticParams synthetic;
  std::size_t synthetic_count = 60;
  std::size_t synthetic_queries = 20;

  void validate() const;
};

// Nested JSON objects: ingest, udf, solver, sampling, train, eval,
// synthetic. Missing keys keep defaults; unknown keys are rejected. The
// root seed is propagated to every stage.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_file(const std::string& path);
nlohmann::ordered_json to_json(const RunConfig& c);

// FNV-1a-64 of the canonical JSON form, as 16 hex digits.
std::string config_hash(const RunConfig& c);

}  // namespace defret
