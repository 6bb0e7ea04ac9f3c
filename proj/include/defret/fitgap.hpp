#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "defret/chamfer.hpp"
#include "defret/deform.hpp"
#include "defret/distance_field.hpp"
#include "defret/geometry.hpp"

namespace defret {

// Fitting gap of one ordered (source, target) pair. e_eval is NaN when the
// dense point-to-mesh value has not been computed.
struct FitGapEntry {
  double e_train = std::numeric_limits<double>::quiet_NaN();
  double e_eval = std::numeric_limits<double>::quiet_NaN();

  bool has_eval() const { return !std::isnan(e_eval); }
};

using PairKey = std::pair<std::uint32_t, std::uint32_t>;  // (source, target)

// Sparse, asymmetric map (source, target) -> fitting gap. Keys are shape
// indices into the database; (s, t) and (t, s) are independent entries.
class FitGapTable {
 public:
  void set(std::uint32_t source, std::uint32_t target, FitGapEntry e) { entries_[{source, target}] = e; }
  void set_eval(std::uint32_t source, std::uint32_t target, double e_eval) { entries_[{source, target}].e_eval = e_eval; }
  const FitGapEntry* find(std::uint32_t source, std::uint32_t target) const;
  bool contains(std::uint32_t source, std::uint32_t target) const { return find(source, target) != nullptr; }
  std::size_t size() const { return entries_.size(); }
  const std::map<PairKey, FitGapEntry>& entries() const { return entries_; }

  // Sources with a training gap toward `target`, ascending by index.
  std::vector<std::uint32_t> sources_for(std::uint32_t target) const;

  bool operator==(const FitGapTable& o) const;

 private:
  std::map<PairKey, FitGapEntry> entries_;
};

inline constexpr std::uint16_t kFitGapTableVersion = 1;
inline constexpr std::size_t kFitGapHeaderBytes = 6;   // "DFGT" + u16 version
inline constexpr std::size_t kFitGapRecordBytes = 28;  // u32 u32 f64 f64 u32

std::string encode_table(const FitGapTable& table);
// Strict: bad magic, version, checksum, or a partial record is an error.
FitGapTable decode_table(const std::string& bytes);
void save_table(const FitGapTable& table, const std::string& path);
FitGapTable load_table(const std::string& path);

// Lenient reader for an interrupted append log: returns the valid prefix.
FitGapTable recover_table(const std::string& path);

// Per target t: sources X_t drawn as the n_nearest shapes by chamfer_pp on
// the training clouds plus n_random other shapes. When the database has no
// more than n_nearest + n_random other shapes, X_t is all of them.
struct PairSampling {
  std::vector<std::vector<std::uint32_t>> sources;  // indexed by target, ascending
  std::uint64_t seed = 0;

  std::size_t pair_count() const;
};

PairSampling sample_pairs(std::span<const ShapeRecord> db, std::uint64_t seed, std::size_t n_nearest = 50,
                          std::size_t n_random = 50);

// Full pairwise chamfer_pp over training clouds (row = first argument).
std::vector<std::vector<double>> pairwise_chamfer(std::span<const ShapeRecord> db, ChamferOptions opts = {});

struct FitGapOptions {
  SolverOptions solver;
  double lambda = 1.0;
  UdfOptions udf;
  ChamferOptions chamfer;
  bool compute_eval = false;  // also fill e_eval via chamfer_pm
};

// Grid for deforming toward `target`: the target bbox joined with the
// canonical normalized cube, so any normalized source starts inside it.
UnsignedDistanceGrid build_target_udf(const ShapeRecord& target, const UdfOptions& opts);

struct FitGapResult {
  double e_train = 0.0;
  double e_eval = std::numeric_limits<double>::quiet_NaN();
  DeformationResult deformation;
};

// e_D(s, t): deform s toward t, resample the deformed mesh with the source's
// training-cloud seed and size, and compare with t's training cloud.
FitGapResult compute_fitgap(const ShapeRecord& source, const ShapeRecord& target, const UnsignedDistanceGrid& target_udf,
                            const FitGapOptions& opts);
FitGapResult compute_fitgap(const ShapeRecord& source, const ShapeRecord& target, const FitGapOptions& opts);

// Dense evaluation gap e^m_D(s, t) = chamfer_pm(D(s; t), t).
double compute_eval_gap(const ShapeRecord& source, const ShapeRecord& target, const UnsignedDistanceGrid& target_udf,
                        const FitGapOptions& opts);

// Discretization bound for e_D(t, t): 2 * cell_size^2.
double identity_tolerance(const UnsignedDistanceGrid& grid);
double identity_tolerance(const UdfOptions& opts);

struct PrecomputeOptions {
  FitGapOptions fitgap;
  int workers = 1;
  // Append-only log path; empty keeps everything in memory.
  std::string table_path;
  bool resume = false;
  // Stop after this many newly computed pairs without compacting the log,
  // as if the process had been killed.
  std::size_t max_new_pairs = std::numeric_limits<std::size_t>::max();
  std::function<void(std::size_t done, std::size_t total)> progress;
};

struct PairFailure {
  std::uint32_t source, target;
  std::string message;
};

struct PrecomputeResult {
  FitGapTable table;
  std::vector<PairFailure> failures;
  std::size_t computed = 0;  // pairs evaluated in this run
  std::size_t reused = 0;    // pairs taken from the resumed log
  bool complete = false;
};

// Evaluates every (s, t) with s in X_t. Pairs are independent; the table
// content does not depend on worker count or evaluation order. With a
// table path, records are appended as they finish and the file is rewritten
// in canonical order once the run completes.
PrecomputeResult precompute(std::span<const ShapeRecord> db, const PairSampling& sampling,
                            const PrecomputeOptions& opts);

}  // namespace defret
