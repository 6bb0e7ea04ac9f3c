#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "defret/embed.hpp"
#include "defret/fitgap.hpp"

namespace defret {

// ---- retrieval ------------------------------------------------------------------

// Observer codes (z and g) for every database shape, from one checkpoint.
struct RetrievalIndex {
  int k = 0;
  std::vector<EgocentricCode> codes;
};

RetrievalIndex build_index(std::span<const ShapeRecord> db, const EmbeddingModel& model);

inline constexpr std::uint16_t kIndexVersion = 1;
inline constexpr std::size_t kIndexHeaderBytes = 14;  // "DIDX" u16 version, u32 count, u32 k

// Header, then per shape z and g as 2k little-endian f32.
std::string encode_index(const RetrievalIndex& index);
RetrievalIndex decode_index(const std::string& bytes);

struct Hit {
  std::uint32_t index = 0;  // position in the database / index
  double distance = 0.0;
};

// The n database entries with the smallest delta(query; s), with s as the
// observer, ascending with ties by lowest index. `exclude` is never
// returned; a non-empty `candidates` restricts the search to those entries.
std::vector<Hit> retrieve(const EgocentricCode& query, const RetrievalIndex& index, std::size_t n,
                          std::optional<std::uint32_t> exclude = std::nullopt,
                          std::span<const std::uint32_t> candidates = {});
std::vector<Hit> retrieve(const PointCloud& query, const RetrievalIndex& index, const EmbeddingModel& model,
                          std::size_t n, std::optional<std::uint32_t> exclude = std::nullopt,
                          std::span<const std::uint32_t> candidates = {});

// Ranked-CD: ascending chamfer_pp between training clouds.
std::vector<Hit> ranked_cd_baseline(const PointCloud& query, std::span<const ShapeRecord> db, std::size_t n,
                                    std::optional<std::uint32_t> exclude = std::nullopt,
                                    std::span<const std::uint32_t> candidates = {}, ChamferOptions opts = {});

// ---- evaluation -------------------------------------------------------------------

// Dense evaluation distances between shapes of one collection, keyed by
// collection index. e^m(s, q) = chamfer_pm(D(s; q), q) is computed on
// demand and kept in the e_eval slot of a FitGapTable; d^m(s, q) =
// chamfer_pm(s, q) is memoized in memory.
class EvalGapCache {
 public:
  EvalGapCache(std::span<const ShapeRecord> shapes, FitGapOptions opts, int workers = 1, FitGapTable table = {});

  double em(std::uint32_t source, std::uint32_t query);
  double dm(std::uint32_t a, std::uint32_t b);
  // Computes every missing e^m in one pass, building each target field once.
  void prefetch(const std::vector<PairKey>& pairs);

  const FitGapTable& table() const { return table_; }
  std::size_t computed() const { return computed_; }

 private:
  std::span<const ShapeRecord> shapes_;
  FitGapOptions opts_;
  int workers_;
  FitGapTable table_;
  std::map<PairKey, double> dm_;
  std::size_t computed_ = 0;
  std::mutex mu_;
};

// Orders candidates for a query; lower is better.
class Ranker {
 public:
  virtual ~Ranker() = default;
  virtual std::string name() const = 0;
  virtual std::vector<Hit> rank(std::uint32_t query, std::span<const std::uint32_t> candidates,
                                EvalGapCache& cache) = 0;
};

// Learned egocentric distance. Shapes are collection indices; `observers`
// lists the database shapes whose codes form the index.
std::unique_ptr<Ranker> make_embedding_ranker(std::span<const ShapeRecord> shapes, const EmbeddingModel& model,
                                              std::string name = "embedding");
std::unique_ptr<Ranker> make_ranked_cd_ranker(std::span<const ShapeRecord> shapes, ChamferOptions opts = {});
// Sorts by the true e^m; the upper bound of every protocol.
std::unique_ptr<Ranker> make_oracle_ranker();
std::unique_ptr<Ranker> make_random_ranker(std::uint64_t seed);

struct EvalOptions {
  bool table1 = true;        // top-1 / best-of-top-3 d^m and e^m over the database
  bool rank = true;          // rank of the top-1 within a random candidate pool
  std::size_t top_n = 3;
  std::size_t n_rank = 150;
  std::size_t recall_k = 5;
  std::uint64_t seed = 0;
};

struct QueryMetrics {
  std::uint32_t query = 0;
  std::vector<std::uint32_t> top;  // table1 retrieval, best first
  double top1_dm = 0.0, topn_dm = 0.0, top1_em = 0.0, topn_em = 0.0;
  int rank = 0;  // 1 + candidates with strictly smaller e^m than the top-1
  bool recall = false;
  std::size_t pool_size = 0;
};

struct MetricsReport {
  std::string method;
  EvalOptions options;
  std::vector<QueryMetrics> queries;
  double mean_top1_dm = 0.0, mean_topn_dm = 0.0, mean_top1_em = 0.0, mean_topn_em = 0.0;
  double mean_rank = 0.0, recall_at_1 = 0.0;
};

// The random pool for one query: up to n_rank database shapes other than
// the query, keyed by the query's id under the report seed.
std::vector<std::uint32_t> candidate_pool(std::span<const ShapeRecord> shapes, std::span<const std::uint32_t> db,
                                          std::uint32_t query, std::size_t n_rank, std::uint64_t seed);

// Queries and database are collection indices. The query itself is never a
// candidate. Rank-protocol retrieval runs inside the pool.
MetricsReport evaluate(Ranker& ranker, std::span<const ShapeRecord> shapes, std::span<const std::uint32_t> queries,
                       std::span<const std::uint32_t> db, EvalGapCache& cache, const EvalOptions& opts);

// One row per (method, query); `scale` multiplies every distance.
std::string metrics_csv(const std::vector<MetricsReport>& reports, std::span<const ShapeRecord> shapes,
                        double scale = 1.0);
nlohmann::ordered_json metrics_json(const std::vector<MetricsReport>& reports, double scale = 1.0);

}  // namespace defret
