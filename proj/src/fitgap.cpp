#include "defret/fitgap.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "defret/common.hpp"
#include "defret/spatial.hpp"

namespace defret {

// ---- table ----------------------------------------------------------------

const FitGapEntry* FitGapTable::find(std::uint32_t source, std::uint32_t target) const {
  auto it = entries_.find({source, target});
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::uint32_t> FitGapTable::sources_for(std::uint32_t target) const {
  std::vector<std::uint32_t> out;
  for (const auto& [key, e] : entries_) {
    if (key.second == target && !std::isnan(e.e_train)) out.push_back(key.first);
  }
  return out;
}

bool FitGapTable::operator==(const FitGapTable& o) const {
  if (entries_.size() != o.entries_.size()) return false;
  for (auto a = entries_.begin(), b = o.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (std::memcmp(&a->second.e_train, &b->second.e_train, sizeof(double)) != 0) return false;
    if (std::memcmp(&a->second.e_eval, &b->second.e_eval, sizeof(double)) != 0) return false;
  }
  return true;
}

namespace {

std::string encode_record(std::uint32_t src, std::uint32_t tgt, const FitGapEntry& e) {
  std::string rec;
  le::put<std::uint32_t>(rec, src);
  le::put<std::uint32_t>(rec, tgt);
  le::put<double>(rec, e.e_train);
  le::put<double>(rec, e.e_eval);
  le::put<std::uint32_t>(rec, crc32(rec.data(), rec.size()));
  return rec;
}

std::string table_header() {
  std::string h = "DFGT";
  le::put<std::uint16_t>(h, kFitGapTableVersion);
  return h;
}

// Parses records until the end; `strict` turns any defect into an error,
// otherwise the valid prefix is kept.
FitGapTable decode_records(const std::string& bytes, bool strict) {
  le::Reader r(bytes, "fit-gap table");
  require(r.remaining() >= kFitGapHeaderBytes && r.bytes(4) == "DFGT", ErrorCode::Format,
          "fit-gap table: bad magic (expected DFGT)");
  const auto version = r.get<std::uint16_t>();
  require(version == kFitGapTableVersion, ErrorCode::Format,
          "fit-gap table: unsupported version " + std::to_string(version) + " (expected " +
              std::to_string(kFitGapTableVersion) + ")");
  FitGapTable table;
  while (r.remaining() > 0) {
    if (r.remaining() < kFitGapRecordBytes) {
      if (strict) fail(ErrorCode::Format, "fit-gap table: truncated record");
      break;
    }
    const auto raw = r.bytes(kFitGapRecordBytes);
    le::Reader rec(raw, "fit-gap record");
    const auto src = rec.get<std::uint32_t>();
    const auto tgt = rec.get<std::uint32_t>();
    FitGapEntry e;
    e.e_train = rec.get<double>();
    e.e_eval = rec.get<double>();
    const auto crc = rec.get<std::uint32_t>();
    if (crc != crc32(raw.data(), kFitGapRecordBytes - 4)) {
      if (strict) fail(ErrorCode::Format, "fit-gap table: checksum mismatch");
      break;
    }
    table.set(src, tgt, e);
  }
  return table;
}

}  // namespace

std::string encode_table(const FitGapTable& table) {
  std::string out = table_header();
  out.reserve(kFitGapHeaderBytes + kFitGapRecordBytes * table.size());
  for (const auto& [key, e] : table.entries()) out += encode_record(key.first, key.second, e);
  return out;
}

FitGapTable decode_table(const std::string& bytes) { return decode_records(bytes, true); }

void save_table(const FitGapTable& table, const std::string& path) {
  // Write-then-rename so an interrupted save never leaves a torn table.
  const std::string tmp = path + ".tmp";
  write_file(tmp, encode_table(table));
  std::filesystem::rename(tmp, path);
}

FitGapTable load_table(const std::string& path) {
  try {
    return decode_table(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

FitGapTable recover_table(const std::string& path) { return decode_records(read_file(path), false); }

// ---- pair sampling -----------------------------------------------------------

std::size_t PairSampling::pair_count() const {
  std::size_t n = 0;
  for (const auto& s : sources) n += s.size();
  return n;
}

namespace {

double one_side(const PointCloud& from, const KdTree& to) {
  double sum = 0.0;
  for (const auto& p : from.points) sum += to.nearest(p).squared_distance;
  return sum / static_cast<double>(from.size());
}

double one_side(const PointCloud& from, const KdTree& to, const ChamferOptions& opts) {
  if (opts.squared) return one_side(from, to);
  double sum = 0.0;
  for (const auto& p : from.points) sum += std::sqrt(to.nearest(p).squared_distance);
  return sum / static_cast<double>(from.size());
}

}  // namespace

std::vector<std::vector<double>> pairwise_chamfer(std::span<const ShapeRecord> db, ChamferOptions opts) {
  std::vector<KdTree> trees;
  trees.reserve(db.size());
  for (const auto& s : db) {
    require(!s.cloud_train.empty(), ErrorCode::InvalidArgument, "shape '" + s.id + "' has no training cloud");
    trees.emplace_back(s.cloud_train.points);
  }
  std::vector<std::vector<double>> d(db.size(), std::vector<double>(db.size(), 0.0));
  for (std::size_t i = 0; i < db.size(); ++i) {
    for (std::size_t j = i + 1; j < db.size(); ++j) {
      d[i][j] = d[j][i] =
          one_side(db[i].cloud_train, trees[j], opts) + one_side(db[j].cloud_train, trees[i], opts);
    }
  }
  return d;
}

PairSampling sample_pairs(std::span<const ShapeRecord> db, std::uint64_t seed, std::size_t n_nearest,
                          std::size_t n_random) {
  require(db.size() >= 2, ErrorCode::InvalidArgument, "sample_pairs: need at least 2 shapes");
  const auto n = static_cast<std::uint32_t>(db.size());
  PairSampling out;
  out.seed = seed;
  out.sources.resize(n);

  if (n - 1 <= n_nearest + n_random) {
    for (std::uint32_t t = 0; t < n; ++t) {
      for (std::uint32_t s = 0; s < n; ++s) {
        if (s != t) out.sources[t].push_back(s);
      }
    }
    return out;
  }

  const auto dist = pairwise_chamfer(db);
  Rng rng(derive_seed(seed, "pair_sampling"));
  for (std::uint32_t t = 0; t < n; ++t) {
    std::vector<std::uint32_t> others;
    for (std::uint32_t s = 0; s < n; ++s) {
      if (s != t) others.push_back(s);
    }
    std::stable_sort(others.begin(), others.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return dist[t][a] < dist[t][b]; });
    std::vector<std::uint32_t> chosen(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(n_nearest));
    std::vector<std::uint32_t> rest(others.begin() + static_cast<std::ptrdiff_t>(n_nearest), others.end());
    std::sort(rest.begin(), rest.end());
    auto random = sample_without_replacement(std::move(rest), n_random, rng);
    chosen.insert(chosen.end(), random.begin(), random.end());
    std::sort(chosen.begin(), chosen.end());
    out.sources[t] = std::move(chosen);
  }
  return out;
}

// ---- fitting gap ------------------------------------------------------------

UnsignedDistanceGrid build_target_udf(const ShapeRecord& target, const UdfOptions& opts) {
  Aabb region = target.mesh.bounds();
  Aabb canonical;
  canonical.lo = Vec3::Constant(-0.5);
  canonical.hi = Vec3::Constant(0.5);
  region.extend(canonical);
  return build_udf(target.mesh, region, opts);
}

double identity_tolerance(const UnsignedDistanceGrid& grid) { return 2.0 * grid.cell_size() * grid.cell_size(); }

double identity_tolerance(const UdfOptions& opts) {
  // Canonical region: unit cube inflated by the margin on every side.
  const double side = 1.0 + 2.0 * opts.margin * std::sqrt(3.0);
  const double cell = side / (opts.resolution - 1);
  return 2.0 * cell * cell;
}

FitGapResult compute_fitgap(const ShapeRecord& source, const ShapeRecord& target, const UnsignedDistanceGrid& target_udf,
                            const FitGapOptions& opts) {
  require(!source.cloud_train.empty() && !target.cloud_train.empty(), ErrorCode::InvalidArgument,
          "compute_fitgap: training clouds required");
  FitGapResult out;
  DeformationProblem problem{source.mesh, target_udf, opts.lambda};
  try {
    out.deformation = deform(problem, opts.solver);
  } catch (const Error& e) {
    throw Error(e.code(), "pair (" + source.id + " -> " + target.id + "): " + e.what());
  }
  const TriangleMesh deformed = source.mesh.with_vertices(out.deformation.vertices);
  const PointCloud resampled = sample_surface_at(source.mesh, deformed.vertices(), source.cloud_train.size(),
                                                 source.cloud_train.seed, source.id);
  out.e_train = chamfer_pp(resampled, target.cloud_train, opts.chamfer);
  if (opts.compute_eval) {
    ShapeRecord d;
    d.id = source.id;
    d.mesh = deformed;
    d.cloud_eval = sample_surface_at(source.mesh, deformed.vertices(), source.cloud_eval.size(),
                                     source.cloud_eval.seed, source.id);
    out.e_eval = chamfer_pm(d, target, opts.chamfer);
  }
  return out;
}

FitGapResult compute_fitgap(const ShapeRecord& source, const ShapeRecord& target, const FitGapOptions& opts) {
  return compute_fitgap(source, target, build_target_udf(target, opts.udf), opts);
}

double compute_eval_gap(const ShapeRecord& source, const ShapeRecord& target, const UnsignedDistanceGrid& target_udf,
                        const FitGapOptions& opts) {
  require(!source.cloud_eval.empty() && !target.cloud_eval.empty(), ErrorCode::InvalidArgument,
          "compute_eval_gap: evaluation clouds required");
  DeformationProblem problem{source.mesh, target_udf, opts.lambda};
  DeformationResult r;
  try {
    r = deform(problem, opts.solver);
  } catch (const Error& e) {
    throw Error(e.code(), "pair (" + source.id + " -> " + target.id + "): " + e.what());
  }
  ShapeRecord d;
  d.id = source.id;
  d.mesh = source.mesh.with_vertices(std::move(r.vertices));
  d.cloud_eval =
      sample_surface_at(source.mesh, d.mesh.vertices(), source.cloud_eval.size(), source.cloud_eval.seed, source.id);
  return chamfer_pm(d, target, opts.chamfer);
}

// ---- precompute ---------------------------------------------------------------

PrecomputeResult precompute(std::span<const ShapeRecord> db, const PairSampling& sampling,
                            const PrecomputeOptions& opts) {
  require(sampling.sources.size() == db.size(), ErrorCode::InvalidArgument,
          "precompute: sampling was built for a different database");
  PrecomputeResult res;

  std::ofstream log;
  if (!opts.table_path.empty()) {
    if (opts.resume && std::filesystem::exists(opts.table_path)) {
      res.table = recover_table(opts.table_path);
      res.reused = res.table.size();
    }
    // Rewrite the valid prefix so appends never follow a torn record.
    write_file(opts.table_path, encode_table(res.table));
    log.open(opts.table_path, std::ios::binary | std::ios::app);
    require(static_cast<bool>(log), ErrorCode::Io, "cannot append to '" + opts.table_path + "'");
  }

  struct Job {
    std::uint32_t target;
    std::vector<std::uint32_t> sources;
  };
  std::vector<Job> jobs;
  std::size_t total = 0;
  for (std::uint32_t t = 0; t < sampling.sources.size(); ++t) {
    Job job{t, {}};
    for (auto s : sampling.sources[t]) {
      require(s < db.size() && s != t, ErrorCode::InvalidArgument, "precompute: invalid pair in sampling");
      if (!res.table.contains(s, t)) job.sources.push_back(s);
    }
    total += job.sources.size();
    if (!job.sources.empty()) jobs.push_back(std::move(job));
  }

  std::mutex mu;
  std::atomic<std::size_t> next_job{0}, budget{0}, done{0};
  std::atomic<bool> stopped{false};
  auto work = [&] {
    for (std::size_t j; (j = next_job.fetch_add(1)) < jobs.size() && !stopped;) {
      const Job& job = jobs[j];
      const ShapeRecord& target = db[job.target];
      std::optional<UnsignedDistanceGrid> udf;
      std::string udf_error;
      try {
        udf = build_target_udf(target, opts.fitgap.udf);
      } catch (const Error& e) {
        udf_error = e.what();
      }
      for (auto s : job.sources) {
        if (budget.fetch_add(1) >= opts.max_new_pairs) {
          stopped = true;
          break;
        }
        FitGapEntry entry;
        std::string error = udf_error;
        if (udf) {
          try {
            auto r = compute_fitgap(db[s], target, *udf, opts.fitgap);
            entry.e_train = r.e_train;
            entry.e_eval = r.e_eval;
          } catch (const Error& e) {
            error = e.what();
          }
        }
        std::lock_guard lock(mu);
        if (!error.empty()) {
          res.failures.push_back({s, job.target, error});
        } else {
          res.table.set(s, job.target, entry);
          if (log.is_open()) {
            const std::string rec = encode_record(s, job.target, entry);
            log.write(rec.data(), static_cast<std::streamsize>(rec.size()));
            log.flush();
          }
          ++res.computed;
        }
        const auto d = ++done;
        if (opts.progress) opts.progress(d, total);
      }
    }
  };

  const int workers = std::max(1, opts.workers);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  log.close();

  std::sort(res.failures.begin(), res.failures.end(), [](const PairFailure& a, const PairFailure& b) {
    return std::tie(a.target, a.source) < std::tie(b.target, b.source);
  });
  res.complete = !stopped;
  if (res.complete && !opts.table_path.empty()) save_table(res.table, opts.table_path);
  return res;
}

}  // namespace defret
