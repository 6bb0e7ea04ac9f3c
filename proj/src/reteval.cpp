#include "defret/reteval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <numeric>
#include <thread>

#include "defret/common.hpp"
#include "defret/spatial.hpp"

namespace defret {

// ---- index ------------------------------------------------------------------------

RetrievalIndex build_index(std::span<const ShapeRecord> db, const EmbeddingModel& model) {
  RetrievalIndex index;
  index.k = model.k();
  index.codes.reserve(db.size());
  for (const auto& s : db) {
    require(!s.cloud_train.empty(), ErrorCode::InvalidArgument, "build_index: shape '" + s.id + "' has no training cloud");
    index.codes.push_back(model.code(s.cloud_train, true));
  }
  return index;
}

std::string encode_index(const RetrievalIndex& index) {
  std::string out = "DIDX";
  le::put<std::uint16_t>(out, kIndexVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(index.codes.size()));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(index.k));
  for (const auto& c : index.codes) {
    require(c.g.has_value() && c.z.size() == index.k, ErrorCode::InvalidArgument, "encode_index: malformed code");
    for (int i = 0; i < index.k; ++i) le::put<float>(out, static_cast<float>(c.z[i]));
    for (int i = 0; i < index.k; ++i) le::put<float>(out, static_cast<float>((*c.g)[i]));
  }
  return out;
}

RetrievalIndex decode_index(const std::string& bytes) {
  le::Reader r(bytes, "retrieval index");
  require(r.remaining() >= kIndexHeaderBytes && r.bytes(4) == "DIDX", ErrorCode::Format,
          "retrieval index: bad magic (expected DIDX)");
  const auto version = r.get<std::uint16_t>();
  require(version == kIndexVersion, ErrorCode::Format, "retrieval index: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  const auto k = r.get<std::uint32_t>();
  require(k >= 1 && r.remaining() == static_cast<std::size_t>(count) * 2 * k * sizeof(float), ErrorCode::Format,
          "retrieval index: size does not match header");
  RetrievalIndex index;
  index.k = static_cast<int>(k);
  index.codes.resize(count);
  for (auto& c : index.codes) {
    c.z.resize(k);
    Eigen::VectorXd g(k);
    for (std::uint32_t i = 0; i < k; ++i) c.z[i] = r.get<float>();
    for (std::uint32_t i = 0; i < k; ++i) g[i] = r.get<float>();
    c.g = std::move(g);
  }
  return index;
}

// ---- retrieval ------------------------------------------------------------------------

namespace {

std::vector<std::uint32_t> all_candidates(std::size_t n, std::span<const std::uint32_t> candidates) {
  if (!candidates.empty()) return {candidates.begin(), candidates.end()};
  std::vector<std::uint32_t> out(n);
  std::iota(out.begin(), out.end(), 0u);
  return out;
}

std::vector<Hit> top_n(std::vector<Hit> hits, std::size_t n) {
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
  });
  if (hits.size() > n) hits.resize(n);
  return hits;
}

}  // namespace

std::vector<Hit> retrieve(const EgocentricCode& query, const RetrievalIndex& index, std::size_t n,
                          std::optional<std::uint32_t> exclude, std::span<const std::uint32_t> candidates) {
  require(query.z.size() == index.k, ErrorCode::Incompatible,
          "retrieve: query code has dimension " + std::to_string(query.z.size()) + ", index has " +
              std::to_string(index.k));
  std::vector<Hit> hits;
  for (auto i : all_candidates(index.codes.size(), candidates)) {
    require(i < index.codes.size(), ErrorCode::InvalidArgument, "retrieve: candidate out of range");
    if (exclude && *exclude == i) continue;
    hits.push_back({i, ego_distance(query, index.codes[i])});
  }
  return top_n(std::move(hits), n);
}

std::vector<Hit> retrieve(const PointCloud& query, const RetrievalIndex& index, const EmbeddingModel& model,
                          std::size_t n, std::optional<std::uint32_t> exclude, std::span<const std::uint32_t> candidates) {
  require(!query.empty(), ErrorCode::InvalidArgument, "retrieve: empty query cloud");
  return retrieve(model.code(query, false), index, n, exclude, candidates);
}

std::vector<Hit> ranked_cd_baseline(const PointCloud& query, std::span<const ShapeRecord> db, std::size_t n,
                                    std::optional<std::uint32_t> exclude, std::span<const std::uint32_t> candidates,
                                    ChamferOptions opts) {
  require(!query.empty(), ErrorCode::InvalidArgument, "ranked_cd_baseline: empty query cloud");
  std::vector<Hit> hits;
  for (auto i : all_candidates(db.size(), candidates)) {
    require(i < db.size(), ErrorCode::InvalidArgument, "ranked_cd_baseline: candidate out of range");
    if (exclude && *exclude == i) continue;
    hits.push_back({i, chamfer_pp(query, db[i].cloud_train, opts)});
  }
  return top_n(std::move(hits), n);
}

// ---- evaluation cache ---------------------------------------------------------------------

EvalGapCache::EvalGapCache(std::span<const ShapeRecord> shapes, FitGapOptions opts, int workers, FitGapTable table)
    : shapes_(shapes), opts_(std::move(opts)), workers_(std::max(1, workers)), table_(std::move(table)) {}

double EvalGapCache::em(std::uint32_t source, std::uint32_t query) {
  {
    std::lock_guard lock(mu_);
    if (const auto* e = table_.find(source, query); e && e->has_eval()) return e->e_eval;
  }
  prefetch({{source, query}});
  std::lock_guard lock(mu_);
  return table_.find(source, query)->e_eval;
}

double EvalGapCache::dm(std::uint32_t a, std::uint32_t b) {
  require(a < shapes_.size() && b < shapes_.size(), ErrorCode::InvalidArgument, "d^m: shape index out of range");
  const PairKey key{std::min(a, b), std::max(a, b)};
  {
    std::lock_guard lock(mu_);
    if (auto it = dm_.find(key); it != dm_.end()) return it->second;
  }
  const double v = chamfer_pm(shapes_[key.first], shapes_[key.second], opts_.chamfer);
  std::lock_guard lock(mu_);
  dm_[key] = v;
  return v;
}

void EvalGapCache::prefetch(const std::vector<PairKey>& pairs) {
  // target -> sources still missing
  std::map<std::uint32_t, std::vector<std::uint32_t>> missing;
  {
    std::lock_guard lock(mu_);
    for (const auto& [s, q] : pairs) {
      require(s < shapes_.size() && q < shapes_.size(), ErrorCode::InvalidArgument, "e^m: shape index out of range");
      const auto* e = table_.find(s, q);
      if (!(e && e->has_eval())) missing[q].push_back(s);
    }
  }
  if (missing.empty()) return;
  std::vector<std::pair<std::uint32_t, std::vector<std::uint32_t>>> jobs(missing.begin(), missing.end());
  for (auto& [q, ss] : jobs) {
    std::sort(ss.begin(), ss.end());
    ss.erase(std::unique(ss.begin(), ss.end()), ss.end());
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(jobs.size());
  auto work = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      const auto& [q, sources] = jobs[j];
      try {
        const auto udf = build_target_udf(shapes_[q], opts_.udf);
        for (auto s : sources) {
          const double v = compute_eval_gap(shapes_[s], shapes_[q], udf, opts_);
          std::lock_guard lock(mu_);
          table_.set_eval(s, q, v);
          ++computed_;
        }
      } catch (const Error& e) {
        errors[j] = e.what();
      }
    }
  };
  const int workers = std::min<int>(workers_, static_cast<int>(jobs.size()));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (!e.empty()) fail(ErrorCode::Numeric, "e^m: " + e);
  }
}

// ---- rankers ---------------------------------------------------------------------------

namespace {

class EmbeddingRanker : public Ranker {
 public:
  EmbeddingRanker(std::span<const ShapeRecord> shapes, const EmbeddingModel& model, std::string name)
      : index_(build_index(shapes, model)), name_(std::move(name)) {
    queries_.reserve(shapes.size());
    // A query code is the observer code without its field.
    for (const auto& c : index_.codes) queries_.push_back({c.z, std::nullopt});
  }
  std::string name() const override { return name_; }
  std::vector<Hit> rank(std::uint32_t query, std::span<const std::uint32_t> candidates, EvalGapCache&) override {
    return retrieve(queries_.at(query), index_, candidates.size(), query, candidates);
  }

 private:
  RetrievalIndex index_;
  std::vector<EgocentricCode> queries_;
  std::string name_;
};

class RankedCdRanker : public Ranker {
 public:
  RankedCdRanker(std::span<const ShapeRecord> shapes, ChamferOptions opts) : shapes_(shapes), opts_(opts) {}
  std::string name() const override { return "ranked_cd"; }
  std::vector<Hit> rank(std::uint32_t query, std::span<const std::uint32_t> candidates, EvalGapCache&) override {
    return ranked_cd_baseline(shapes_[query].cloud_train, shapes_, candidates.size(), query, candidates, opts_);
  }

 private:
  std::span<const ShapeRecord> shapes_;
  ChamferOptions opts_;
};

class OracleRanker : public Ranker {
 public:
  std::string name() const override { return "oracle"; }
  std::vector<Hit> rank(std::uint32_t query, std::span<const std::uint32_t> candidates, EvalGapCache& cache) override {
    std::vector<PairKey> pairs;
    for (auto c : candidates) {
      if (c != query) pairs.emplace_back(c, query);
    }
    cache.prefetch(pairs);
    std::vector<Hit> hits;
    for (const auto& [c, q] : pairs) hits.push_back({c, cache.em(c, q)});
    return top_n(std::move(hits), hits.size());
  }
};

class RandomRanker : public Ranker {
 public:
  explicit RandomRanker(std::uint64_t seed) : seed_(seed) {}
  std::string name() const override { return "random"; }
  std::vector<Hit> rank(std::uint32_t query, std::span<const std::uint32_t> candidates, EvalGapCache&) override {
    std::vector<std::uint32_t> order;
    for (auto c : candidates) {
      if (c != query) order.push_back(c);
    }
    std::sort(order.begin(), order.end());
    Rng rng(derive_seed(seed_, "random_ranker/" + std::to_string(query) + "/" + std::to_string(calls_++)));
    shuffle(order, rng);
    std::vector<Hit> hits;
    for (std::size_t i = 0; i < order.size(); ++i) hits.push_back({order[i], static_cast<double>(i)});
    return hits;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t calls_ = 0;
};

}  // namespace

std::unique_ptr<Ranker> make_embedding_ranker(std::span<const ShapeRecord> shapes, const EmbeddingModel& model,
                                              std::string name) {
  return std::make_unique<EmbeddingRanker>(shapes, model, std::move(name));
}
std::unique_ptr<Ranker> make_ranked_cd_ranker(std::span<const ShapeRecord> shapes, ChamferOptions opts) {
  return std::make_unique<RankedCdRanker>(shapes, opts);
}
std::unique_ptr<Ranker> make_oracle_ranker() { return std::make_unique<OracleRanker>(); }
std::unique_ptr<Ranker> make_random_ranker(std::uint64_t seed) { return std::make_unique<RandomRanker>(seed); }

// ---- protocols ----------------------------------------------------------------------------

std::vector<std::uint32_t> candidate_pool(std::span<const ShapeRecord> shapes, std::span<const std::uint32_t> db,
                                          std::uint32_t query, std::size_t n_rank, std::uint64_t seed) {
  std::vector<std::uint32_t> others;
  for (auto s : db) {
    if (s != query) others.push_back(s);
  }
  std::sort(others.begin(), others.end());
  others.erase(std::unique(others.begin(), others.end()), others.end());
  if (others.size() > n_rank) {
    Rng rng(derive_seed(seed, "rank_pool/" + shapes[query].id));
    others = sample_without_replacement(std::move(others), n_rank, rng);
    std::sort(others.begin(), others.end());
  }
  return others;
}

MetricsReport evaluate(Ranker& ranker, std::span<const ShapeRecord> shapes, std::span<const std::uint32_t> queries,
                       std::span<const std::uint32_t> db, EvalGapCache& cache, const EvalOptions& opts) {
  require(!queries.empty(), ErrorCode::InvalidArgument, "evaluate: no queries");
  require(opts.top_n >= 1 && opts.n_rank >= 1 && opts.recall_k >= 1, ErrorCode::Config,
          "evaluate: top_n, n_rank and recall_k must be >= 1");
  MetricsReport report;
  report.method = ranker.name();
  report.options = opts;

  // Retrieval first, then every needed e^m in one batched pass.
  std::vector<std::vector<std::uint32_t>> pools(queries.size());
  std::vector<std::uint32_t> pool_top1(queries.size());
  std::vector<PairKey> needed;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto q = queries[qi];
    require(q < shapes.size(), ErrorCode::InvalidArgument, "evaluate: query index out of range");
    QueryMetrics m;
    m.query = q;
    if (opts.table1) {
      std::vector<std::uint32_t> cands;
      for (auto s : db) {
        if (s != q) cands.push_back(s);
      }
      require(!cands.empty(), ErrorCode::InvalidArgument, "evaluate: database has no candidates");
      const auto hits = ranker.rank(q, cands, cache);
      for (std::size_t i = 0; i < std::min(opts.top_n, hits.size()); ++i) {
        m.top.push_back(hits[i].index);
        needed.emplace_back(hits[i].index, q);
      }
    }
    if (opts.rank) {
      pools[qi] = candidate_pool(shapes, db, q, opts.n_rank, opts.seed);
      require(!pools[qi].empty(), ErrorCode::InvalidArgument, "evaluate: empty candidate pool");
      const auto hits = ranker.rank(q, pools[qi], cache);
      pool_top1[qi] = hits.front().index;
      m.pool_size = pools[qi].size();
      for (auto s : pools[qi]) needed.emplace_back(s, q);
    }
    report.queries.push_back(std::move(m));
  }
  cache.prefetch(needed);

  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    auto& m = report.queries[qi];
    const auto q = m.query;
    if (opts.table1) {
      m.top1_dm = cache.dm(m.top.front(), q);
      m.top1_em = cache.em(m.top.front(), q);
      m.topn_dm = m.top1_dm;
      m.topn_em = m.top1_em;
      for (std::size_t i = 1; i < m.top.size(); ++i) {
        m.topn_dm = std::min(m.topn_dm, cache.dm(m.top[i], q));
        m.topn_em = std::min(m.topn_em, cache.em(m.top[i], q));
      }
      report.mean_top1_dm += m.top1_dm;
      report.mean_topn_dm += m.topn_dm;
      report.mean_top1_em += m.top1_em;
      report.mean_topn_em += m.topn_em;
    }
    if (opts.rank) {
      const double best = cache.em(pool_top1[qi], q);
      m.rank = 1;
      for (auto s : pools[qi]) m.rank += cache.em(s, q) < best;
      m.recall = static_cast<std::size_t>(m.rank) <= opts.recall_k;
      report.mean_rank += m.rank;
      report.recall_at_1 += m.recall;
    }
  }
  const double n = static_cast<double>(queries.size());
  report.mean_top1_dm /= n;
  report.mean_topn_dm /= n;
  report.mean_top1_em /= n;
  report.mean_topn_em /= n;
  report.mean_rank /= n;
  report.recall_at_1 /= n;
  return report;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsReport>& reports, std::span<const ShapeRecord> shapes, double scale) {
  require(!reports.empty(), ErrorCode::InvalidArgument, "metrics_csv: no reports");
  const auto& o = reports.front().options;
  const std::string n = std::to_string(o.top_n);
  std::string out = "method,query";
  if (o.table1) out += ",top1_dm,top" + n + "_dm,top1_em,top" + n + "_em,top_ids";
  if (o.rank) out += ",rank,recall1,pool_size";
  out += '\n';
  for (const auto& r : reports) {
    for (const auto& m : r.queries) {
      out += r.method + ',' + shapes[m.query].id;
      if (o.table1) {
        out += ',' + num(m.top1_dm * scale) + ',' + num(m.topn_dm * scale) + ',' + num(m.top1_em * scale) + ',' +
               num(m.topn_em * scale) + ',';
        for (std::size_t i = 0; i < m.top.size(); ++i) out += (i ? ";" : "") + shapes[m.top[i]].id;
      }
      if (o.rank) out += ',' + std::to_string(m.rank) + ',' + (m.recall ? "1" : "0") + ',' + std::to_string(m.pool_size);
      out += '\n';
    }
  }
  return out;
}

nlohmann::ordered_json metrics_json(const std::vector<MetricsReport>& reports, double scale) {
  nlohmann::ordered_json j;
  if (!reports.empty()) {
    const auto& o = reports.front().options;
    j["options"] = {{"table1", o.table1}, {"rank", o.rank},         {"top_n", o.top_n},
                    {"n_rank", o.n_rank}, {"recall_k", o.recall_k}, {"seed", o.seed}};
    j["scale"] = scale;
  }
  auto& methods = j["methods"];
  methods = nlohmann::ordered_json::object();
  for (const auto& r : reports) {
    nlohmann::ordered_json m;
    m["queries"] = r.queries.size();
    const std::string n = std::to_string(r.options.top_n);
    if (r.options.table1) {
      m["mean_top1_dm"] = r.mean_top1_dm * scale;
      m["mean_top" + n + "_dm"] = r.mean_topn_dm * scale;
      m["mean_top1_em"] = r.mean_top1_em * scale;
      m["mean_top" + n + "_em"] = r.mean_topn_em * scale;
    }
    if (r.options.rank) {
      m["mean_rank"] = r.mean_rank;
      m["recall_at_1"] = r.recall_at_1;
    }
    methods[r.method] = std::move(m);
  }
  return j;
}

}  // namespace defret
