// Acceptance suite: runs each numbered criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Arguments select criteria by
// number; no arguments runs all of them. The benchmark behind criteria 7, 8
// and 10 runs once and is archived as benchmark_report.json in the working
// directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "defret/chamfer.hpp"
#include "defret/defret.h"
#include "defret/deform.hpp"
#include "defret/fitgap.hpp"
#include "defret/reteval.hpp"
#include "defret/store.hpp"
#include "defret/synthetic.hpp"
#include "defret/train.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace defret;
using namespace defret::test;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
  bool enforced = true;  // a failing recorded-only criterion does not fail the run
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---- 1: fitting-gap properties --------------------------------------------------------

Outcome fitgap_properties() {
  const auto start = Clock::now();
  SyntheticParams p;
  p.kinds = {"table", "comb"};
  p.eval_points = 64;  // e_D reads only the training clouds
  const auto family = generate_synthetic(p, 200, 101);
  FitGapOptions opts;
  opts.udf.workers = workers();
  const double tolerance = identity_tolerance(opts.udf);

  Rng rng(7);
  double worst_identity = 0.0, lowest_gap = INFINITY;
  std::string worst_id;
  int identity_failures = 0, negative = 0, pairs = 0;
  for (std::size_t t = 0; t < family.size(); ++t) {
    const ShapeRecord& target = family[t].record;
    const UnsignedDistanceGrid udf = build_target_udf(target, opts.udf);
    const double self = compute_fitgap(target, target, udf, opts).e_train;
    if (self > worst_identity) {
      worst_identity = self;
      worst_id = target.id;
    }
    identity_failures += !(self <= tolerance);
    std::size_t s = uniform_index(rng, family.size() - 1);
    if (s >= t) ++s;
    const double e = compute_fitgap(family[s].record, target, udf, opts).e_train;
    lowest_gap = std::min({lowest_gap, e, self});
    negative += !(e >= 0.0) + !(self >= 0.0);
    pairs += 2;
  }
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = identity_failures == 0 && negative == 0 && secs < 600.0;
  o.detail = std::to_string(pairs) + " pairs, min e_D " + fmt(lowest_gap) + ", max e(t,t) " + fmt(worst_identity) +
             " (" + worst_id + ") vs tolerance " + fmt(tolerance) + ", " + std::to_string(identity_failures) +
             " identity failures";
  return o;
}

// ---- 2: asymmetry witness ----------------------------------------------------------------

Outcome asymmetry_witness() {
  const auto start = Clock::now();
  const auto comb = [](int teeth) {
    CombParams p;
    p.teeth = teeth;
    return make_shape_record("comb" + std::to_string(teeth), comb_mesh(p), 1);
  };
  const ShapeRecord four = comb(4), two = comb(2);
  FitGapOptions opts;
  opts.udf.workers = workers();
  const double e42 = compute_fitgap(four, two, opts).e_train;
  const double e24 = compute_fitgap(two, four, opts).e_train;
  const double asym = std::abs(e42 - e24) / std::max(e42, e24);
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = asym > 0.3 && secs < 60.0;
  o.detail = "e(4->2) " + fmt(e42) + ", e(2->4) " + fmt(e24) + ", relative asymmetry " + fmt(asym);
  return o;
}

// ---- 3: deformation solver ---------------------------------------------------------------

UnsignedDistanceGrid field_for(const TriangleMesh& target, const TriangleMesh& source, int resolution) {
  Aabb region = target.bounds();
  region.extend(source.bounds());
  return build_udf(target, region, UdfOptions{.resolution = resolution, .margin = 0.1, .workers = workers()});
}

TriangleMesh centered_sheet(double size, int n) {
  return translated(sheet_mesh(size, n), Vec3(-0.5 * size, -0.5 * size, 0));
}

Outcome deformation_solver() {
  Rng rng(31);
  int increases = 0, steps = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const TriangleMesh source = normalize(uv_sphere(uniform(rng, 0.2, 0.6), 5, 7));
    TableParams tp;
    tp.legs = std::array<int, 3>{1, 2, 4}[trial % 3];
    tp.height = uniform(rng, 0.3, 1.4);
    tp.width = uniform(rng, 0.5, 2.0);
    const TriangleMesh target = normalize(table_mesh(tp));
    const auto grid = field_for(target, source, 24);
    SolverOptions opts;
    opts.max_iterations = 60;
    const DeformationResult r = deform(DeformationProblem{source, grid, uniform(rng, 0.1, 10.0)}, opts);
    for (std::size_t i = 1; i < r.energy_history.size(); ++i) {
      ++steps;
      increases += !(r.energy_history[i] <= r.energy_history[i - 1]);
    }
  }

  const TriangleMesh source = centered_sheet(0.7, 10);
  const TriangleMesh target = translated(source, Vec3(0.1, 0, 0));
  const auto grid = field_for(target, source, kDefaultUdfResolution);
  SolverOptions long_run;
  long_run.max_iterations = 2000;
  const DeformationResult r = deform(DeformationProblem{source, grid, 1.0}, long_run);
  double worst_cells = 0.0;
  for (std::size_t i = 0; i < r.vertices.size(); ++i)
    worst_cells = std::max(worst_cells, (r.vertices[i] - target.vertices()[i]).norm() / grid.cell_size());

  double worst_rigidity = 0.0;
  const DeformationProblem still{source, grid, 1.0};
  for (int trial = 0; trial < 100; ++trial) {
    const Vec3 d(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    worst_rigidity = std::max(worst_rigidity, energy(still, translated(source, d).vertices()).rigidity);
  }

  Outcome o;
  o.pass = increases == 0 && worst_cells <= 2.0 && worst_rigidity <= 1e-12;
  o.detail = std::to_string(steps) + " accepted steps, " + std::to_string(increases) + " increases; sheet off by " +
             fmt(worst_cells) + " cells; rigidity under translation " + fmt(worst_rigidity);
  return o;
}

// ---- 4: numerical gradients --------------------------------------------------------------

struct GradTally {
  int checked = 0, skipped = 0, failed = 0;
  double worst = 0.0;
  std::string str(const std::string& name) const {
    return name + " " + std::to_string(checked) + " checked/" + std::to_string(skipped) + " skipped, worst " +
           fmt(worst);
  }
};

void tally_probe(GradTally& t, const FdProbe& p) {
  if (p.skipped) {
    ++t.skipped;
    return;
  }
  ++t.checked;
  const double err = relative_error(p.analytic, p.numeric);
  t.worst = std::max(t.worst, err);
  t.failed += !(err < 1e-4);
}

std::vector<EgocentricCode> all_codes(const EmbeddingModel& m, const BatchClouds& clouds) {
  std::vector<EgocentricCode> c(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i)
    if (!clouds[i].empty()) c[i] = m.code(clouds[i], true);
  return c;
}

constexpr int kProbesPerConfig = 5;

Outcome numerical_gradients() {
  Rng rng(41);
  GradTally delta, margin, reg;
  for (int config = 0; config < 100; ++config) {
    EmbeddingModel model(small_architecture(), 1000 + config);
    const auto t_pts = random_shape_points(rng, 24);
    const auto s_pts = random_shape_points(rng, 24);
    std::vector<double> grad;
    delta_with_grad(model, t_pts, s_pts, &grad);
    const auto loss = [&](const EmbeddingModel& m) { return delta_with_grad(m, t_pts, s_pts, nullptr); };
    const auto no_kink = [](const EmbeddingModel&) { return false; };
    for (int k = 0; k < kProbesPerConfig; ++k) {
      const std::size_t idx = uniform_index(rng, model.parameter_count());
      tally_probe(delta, probe_parameter(model, idx, grad[idx], loss, {t_pts, s_pts}, no_kink));
    }
  }

  for (int config = 0; config < 200; ++config) {
    const bool is_margin = config < 100;
    EmbeddingModel model(small_architecture(), 2000 + config);
    std::vector<std::vector<Vec3>> pts;
    for (int i = 0; i < 8; ++i) pts.push_back(random_shape_points(rng, 20));
    BatchClouds clouds(pts.begin(), pts.end());
    std::vector<std::span<const Vec3>> spans(pts.begin(), pts.end());

    std::function<LossGrad(const EmbeddingModel&)> run;
    std::function<bool(const EmbeddingModel&)> kink;
    if (is_margin) {
      std::vector<TripletBatch> b{{0, {1, 2}, {3, 4, 5}}, {6, {7, 3}, {0, 1, 2}}};
      const double m = uniform(rng, 0.0, 0.2);
      run = [=](const EmbeddingModel& e) { return margin_batch_loss(e, clouds, b, m); };
      // Kinks: the furthest positive changes, or a hinge switches.
      kink = [=](const EmbeddingModel& e) {
        const auto c = all_codes(e, clouds);
        for (const auto& tb : b) {
          std::vector<double> p;
          for (auto s : tb.positives) p.push_back(ego_distance(c[tb.query], c[s]));
          std::sort(p.rbegin(), p.rend());
          if (p[0] - p[1] < kKinkMargin * p[0]) return true;
          for (auto s : tb.negatives)
            if (std::abs(p[0] - ego_distance(c[tb.query], c[s]) + m) < kKinkMargin * p[0]) return true;
        }
        return false;
      };
    } else {
      const ProbMode mode = config % 2 ? ProbMode::Consistent : ProbMode::Literal;
      std::vector<RegBatch> b(2);
      b[0].query = 0;
      b[0].sources = {1, 2, 3, 4};
      b[1].query = 5;
      b[1].sources = {6, 7, 0};
      for (auto& rb : b) {
        std::vector<double> gaps(rb.sources.size());
        for (auto& g : gaps) g = uniform01(rng);
        rb.target_probs = target_probs(gaps, 0.3);
      }
      run = [=](const EmbeddingModel& e) { return reg_batch_loss(e, clouds, b, mode); };
      // Kink: the absolute value in the loss at a zero residual.
      kink = [=](const EmbeddingModel& e) {
        const auto c = all_codes(e, clouds);
        for (const auto& rb : b) {
          std::vector<double> d;
          for (auto s : rb.sources) d.push_back(ego_distance(c[rb.query], c[s]));
          const auto p = predicted_probs(d, mode);
          for (std::size_t i = 0; i < p.size(); ++i)
            if (std::abs(p[i] - rb.target_probs[i]) < kKinkMargin) return true;
        }
        return false;
      };
    }
    const LossGrad lg = run(model);
    const auto loss = [&](const EmbeddingModel& e) { return run(e).loss; };
    for (int k = 0; k < kProbesPerConfig; ++k) {
      const std::size_t idx = uniform_index(rng, model.parameter_count());
      tally_probe(is_margin ? margin : reg, probe_parameter(model, idx, lg.grad[idx], loss, spans, kink));
    }
  }

  // Kink exclusion must leave most probes checked.
  const auto enough = [](const GradTally& t) { return t.checked >= 100 * kProbesPerConfig / 2; };
  Outcome o;
  o.pass = delta.failed + margin.failed + reg.failed == 0 && enough(delta) && enough(margin) && enough(reg);
  o.detail = delta.str("delta") + "; " + margin.str("margin") + "; " + reg.str("regression");
  return o;
}

// ---- 5: perplexity calibration -----------------------------------------------------------

Outcome perplexity_calibration() {
  Rng rng(51);
  double worst = 0.0;
  int non_monotone = 0, flagged = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> gaps(11 + uniform_index(rng, 140));
    // Gaps spread over two decades, as fitting gaps are.
    for (auto& g : gaps) g = 1e-4 * std::pow(10.0, uniform(rng, 0.0, 2.0));
    double previous = 0.0;
    for (double tau : {2.0, 5.0, 10.0}) {
      const SigmaCalibration c = calibrate_sigma(gaps, tau);
      flagged += c.degenerate || c.unattainable;
      worst = std::max(worst, std::abs(entropy_bits(target_probs(gaps, c.sigma)) - std::log2(tau)));
      non_monotone += !(c.sigma > previous);
      previous = c.sigma;
    }
  }
  Outcome o;
  o.pass = worst < 1e-3 && non_monotone == 0 && flagged == 0;
  o.detail = "300 calibrations, worst |H - log2 tau| " + fmt(worst) + " bits, " + std::to_string(non_monotone) +
             " non-increasing sigma";
  return o;
}

// ---- 6: oracle equivalences --------------------------------------------------------------

EgocentricCode random_code(Rng& rng, int k) {
  EgocentricCode c;
  c.z = Eigen::VectorXd(k);
  c.g = Eigen::VectorXd(k);
  for (int d = 0; d < k; ++d) {
    c.z[d] = uniform(rng, -1, 1);
    (*c.g)[d] = uniform(rng, 1e-3, 2.0);
  }
  return c;
}

Outcome oracle_equivalences() {
  Rng rng(61);
  int chamfer_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const PointCloud a = cloud(random_points(1 + uniform_index(rng, 512), rng));
    const PointCloud b = cloud(random_points(1 + uniform_index(rng, 512), rng));
    chamfer_mismatch += chamfer_pp(a, b) != chamfer_pp_brute_force(a, b);
  }

  int retrieve_mismatch = 0, mining_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(uniform_index(rng, 16));
    const std::size_t n = 1 + uniform_index(rng, 64);
    RetrievalIndex index;
    index.k = k;
    for (std::size_t i = 0; i < n; ++i) index.codes.push_back(random_code(rng, k));
    // Duplicates force ties, which go to the lowest index.
    if (n > 2) index.codes[n - 1] = index.codes[0];
    const EgocentricCode q = random_code(rng, k);
    const std::optional<std::uint32_t> exclude =
        trial % 2 ? std::optional<std::uint32_t>(static_cast<std::uint32_t>(uniform_index(rng, n))) : std::nullopt;

    std::vector<std::pair<double, std::uint32_t>> brute;
    for (std::uint32_t i = 0; i < n; ++i)
      if (i != exclude) brute.emplace_back(ego_distance(q, index.codes[i]), i);
    std::sort(brute.begin(), brute.end());
    const std::size_t top = 1 + uniform_index(rng, n);
    const auto hits = retrieve(q, index, top, exclude);
    bool same = hits.size() == std::min(top, brute.size());
    for (std::size_t i = 0; same && i < hits.size(); ++i)
      same = hits[i].index == brute[i].second && hits[i].distance == brute[i].first;
    retrieve_mismatch += !same;

    // Hardest-8 over the cached codes, the query being one of them.
    std::vector<EgocentricCode> codes = index.codes;
    const auto query = static_cast<std::uint32_t>(uniform_index(rng, n));
    std::vector<std::uint32_t> negatives;
    for (std::uint32_t i = 0; i < n; ++i)
      if (i != query && uniform01(rng) < 0.8) negatives.push_back(i);
    std::vector<std::pair<double, std::uint32_t>> order;
    for (auto s : negatives) order.emplace_back(ego_distance(codes[query], codes[s]), s);
    std::sort(order.begin(), order.end());
    std::vector<std::uint32_t> expected;
    for (std::size_t i = 0; i < std::min<std::size_t>(8, order.size()); ++i) expected.push_back(order[i].second);
    HardNegativeMiner miner;
    miner.set_codes(std::move(codes), 0);
    mining_mismatch += miner.hardest(query, negatives, 8) != expected;
  }
  Outcome o;
  o.pass = chamfer_mismatch + retrieve_mismatch + mining_mismatch == 0;
  o.detail = "mismatches over 1000 trials each: Chamfer " + std::to_string(chamfer_mismatch) + ", retrieve " +
             std::to_string(retrieve_mismatch) + ", hardest-8 " + std::to_string(mining_mismatch);
  return o;
}

// ---- 7, 8, 10: synthetic benchmark through the C interface -------------------------------------

// 60 tables (40 database, 20 held-out queries), k = 64, 200 epochs,
// 40-candidate pools. Dense evaluation clouds and the network widths are
// reduced so the run fits on one laptop core.
std::string benchmark_config() {
  nlohmann::json j = nlohmann::json::parse(R"({
    "seed": 1,
    "ingest": {"eval_points": 2000},
    "train": {"epochs": 200, "encoder": [32, 64, 128], "head_hidden": [128], "k": 64, "input_points": 256,
              "sigma_p": 0.001, "sigma_n": 0.002},
    "eval": {"n_rank": 40},
    "synthetic": {"count": 60, "queries": 20}
  })");
  j["workers"] = workers();
  return j.dump();
}

struct MethodScores {
  double top1_em = NAN, top1_dm = NAN, rank = NAN, recall = NAN;
};

struct Benchmark {
  bool ok = false;
  std::string error;
  double reg_seconds = 0.0;  // synth, fitgap, regression training and its evaluation
  double total_seconds = 0.0;
  std::map<std::string, MethodScores> scores;  // "reg", "margin", "literal", "ranked_cd"
  std::map<std::string, std::pair<double, double>> loss;  // first and last epoch loss per model
};

bool api(defret_status s, Benchmark& b, const std::string& what) {
  if (s == DEFRET_OK) return true;
  b.error = what + ": " + defret_status_string(s) + ": " + defret_last_error();
  return false;
}

std::pair<double, double> first_last_loss(const std::string& csv_path) {
  std::istringstream in(slurp(csv_path));
  std::string line;
  std::vector<double> losses;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("epoch", 0) == 0) continue;
    const auto comma = line.find(',');
    losses.push_back(std::stod(line.substr(comma + 1)));
  }
  if (losses.empty()) return {NAN, NAN};
  return {losses.front(), losses.back()};
}

MethodScores scores_of(const nlohmann::json& m) {
  return {m.at("mean_top1_em").get<double>(), m.at("mean_top1_dm").get<double>(), m.at("mean_rank").get<double>(),
          m.at("recall_at_1").get<double>()};
}

Benchmark run_benchmark() {
  Benchmark b;
  const auto start = Clock::now();
  TempDir dir("bench");
  const std::string cfg = benchmark_config();
  const std::string store_dir = dir.str("store"), table = dir.str("table.dfgt"), cache = dir.str("cache");
  defret_store* store = nullptr;
  if (!api(defret_synth(store_dir.c_str(), cfg.c_str(), nullptr), b, "synth") ||
      !api(defret_store_open(store_dir.c_str(), &store), b, "open") ||
      !api(defret_fitgap_run(store, table.c_str(), cfg.c_str(), 0, 0, nullptr), b, "fitgap")) {
    defret_store_free(store);
    return b;
  }
  std::cerr << "benchmark: fitting gaps done after " << fmt(seconds_since(start)) << " s\n";

  const std::vector<std::pair<std::string, nlohmann::json>> variants{
      {"reg", nlohmann::json::object()},
      {"margin", {{"train", {{"strategy", "margin"}}}}},
      {"literal", {{"train", {{"prob_mode", "literal"}}}}}};
  for (const auto& [name, patch] : variants) {
    nlohmann::json j = nlohmann::json::parse(cfg);
    j.merge_patch(patch);
    const std::string c = j.dump();
    const std::string ckpt = dir.str(name + ".ckpt"), history = dir.str(name + ".history.csv");
    defret_model* model = nullptr;
    const bool ok = api(defret_train_run(store, table.c_str(), c.c_str(), ckpt.c_str(), history.c_str()), b,
                        "train " + name) &&
                    api(defret_model_load(ckpt.c_str(), &model), b, "load " + name) &&
                    api(defret_evaluate_run(model, store, table.c_str(), c.c_str(), cache.c_str(),
                                            dir.str(name).c_str()),
                        b, "evaluate " + name);
    defret_model_free(model);
    if (!ok) {
      defret_store_free(store);
      return b;
    }
    if (name == "reg") b.reg_seconds = seconds_since(start);
    b.loss[name] = first_last_loss(history);
    const auto report = nlohmann::json::parse(slurp(dir.str(name + ".json")));
    for (const auto& [method, m] : report.at("methods").items()) {
      if (method == "ranked_cd")
        b.scores["ranked_cd"] = scores_of(m);
      else
        b.scores[name] = scores_of(m);
    }
    std::cerr << "benchmark: " << name << " done after " << fmt(seconds_since(start)) << " s\n";
  }
  defret_store_free(store);
  b.total_seconds = seconds_since(start);
  b.ok = true;
  return b;
}

nlohmann::ordered_json benchmark_report(const Benchmark& b) {
  nlohmann::ordered_json j;
  j["config"] = nlohmann::json::parse(benchmark_config());
  j["regression_pipeline_seconds"] = b.reg_seconds;
  j["total_seconds"] = b.total_seconds;
  for (const auto& [name, s] : b.scores)
    j["methods"][name] = {{"mean_top1_em", s.top1_em}, {"mean_top1_dm", s.top1_dm}, {"mean_rank", s.rank},
                          {"recall_at_1", s.recall}};
  for (const auto& [name, l] : b.loss) j["training_loss"][name] = {{"first_epoch", l.first}, {"last_epoch", l.second}};
  return j;
}

Outcome synthetic_benchmark(const Benchmark& b) {
  Outcome o;
  if (!b.ok) {
    o.detail = b.error;
    return o;
  }
  const MethodScores& reg = b.scores.at("reg");
  const MethodScores& cd = b.scores.at("ranked_cd");
  o.pass = reg.top1_em <= cd.top1_em && reg.top1_dm >= cd.top1_dm && reg.rank < cd.rank && b.reg_seconds < 3600.0;
  o.detail = "top-1 e^m " + fmt(reg.top1_em) + " vs " + fmt(cd.top1_em) + ", top-1 d^m " + fmt(reg.top1_dm) + " vs " +
             fmt(cd.top1_dm) + ", mean rank " + fmt(reg.rank) + " vs " + fmt(cd.rank) + " (ours vs Ranked-CD), " +
             fmt(b.reg_seconds) + " s";
  return o;
}

Outcome strategy_ordering(const Benchmark& b) {
  Outcome o;
  o.enforced = false;
  if (!b.ok) {
    o.detail = b.error;
    return o;
  }
  const double reg = b.scores.at("reg").top1_em, margin = b.scores.at("margin").top1_em;
  o.pass = reg <= 1.05 * margin;
  o.detail = "top-1 e^m regression " + fmt(reg) + " vs margin " + fmt(margin) + " (recorded)";
  return o;
}

Outcome prob_mode_discrimination(const Benchmark& b) {
  Outcome o;
  if (!b.ok) {
    o.detail = b.error;
    return o;
  }
  const double consistent = b.scores.at("reg").rank, literal = b.scores.at("literal").rank;
  o.pass = consistent < literal;
  o.detail = "mean rank consistent " + fmt(consistent) + " vs literal " + fmt(literal);
  return o;
}

// ---- 9: determinism and formats ----------------------------------------------------------

constexpr const char* kTinyConfig = R"({
  "seed": 3,
  "ingest": {"train_points": 64, "eval_points": 64},
  "udf": {"resolution": 16},
  "solver": {"max_iterations": 20},
  "train": {"epochs": 3, "k": 4, "encoder": [8], "head_hidden": [8], "input_points": 0, "perplexity": 2, "n_reg": 3},
  "eval": {"n_rank": 3},
  "synthetic": {"count": 8, "queries": 2}
})";

std::string without_last_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line[0] == '#' ? line.size() : line.rfind(',')) + "\n";
  return out;
}

// Files written by one full pipeline run, by name.
std::map<std::string, std::string> pipeline_files(const TempDir& dir, const std::string& cfg, std::string& error) {
  const std::string store_dir = dir.str("store");
  defret_store* store = nullptr;
  defret_model* model = nullptr;
  Benchmark b;
  const bool ok = api(defret_synth(store_dir.c_str(), cfg.c_str(), nullptr), b, "synth") &&
                  api(defret_store_open(store_dir.c_str(), &store), b, "open") &&
                  api(defret_fitgap_run(store, dir.str("t.dfgt").c_str(), cfg.c_str(), 0, 0, nullptr), b, "fitgap") &&
                  api(defret_train_run(store, dir.str("t.dfgt").c_str(), cfg.c_str(), dir.str("m.ckpt").c_str(),
                                       dir.str("h.csv").c_str()),
                      b, "train") &&
                  api(defret_model_load(dir.str("m.ckpt").c_str(), &model), b, "load") &&
                  api(defret_evaluate_run(model, store, dir.str("t.dfgt").c_str(), cfg.c_str(), nullptr,
                                          dir.str("ev").c_str()),
                      b, "evaluate");
  defret_model_free(model);
  defret_store_free(store);
  error = b.error;
  std::map<std::string, std::string> out;
  if (!ok) return out;
  for (const char* name : {"t.dfgt", "m.ckpt", "m.ckpt.json", "h.csv", "ev.csv", "ev.json"})
    out[name] = slurp(dir.str(name));
  return out;
}

Outcome determinism_and_formats() {
  Outcome o;
  std::vector<std::string> problems;
  std::string error;
  TempDir a("det-a"), b("det-b"), c("det-c");
  const auto first = pipeline_files(a, kTinyConfig, error);
  const auto second = pipeline_files(b, kTinyConfig, error);
  if (first.empty() || second.empty()) {
    o.detail = error;
    return o;
  }
  for (const auto& [name, bytes] : first) {
    // The training log carries wall time in its last column; everything
    // before it must match.
    const auto strip = [&](const std::string& text) { return name == "h.csv" ? without_last_column(text) : text; };
    if (bytes.empty() || strip(second.at(name)) != strip(bytes)) problems.push_back(name + " differs between reruns");
  }

  // Worker count only changes scheduling.
  nlohmann::json parallel = nlohmann::json::parse(kTinyConfig);
  parallel["workers"] = 3;
  {
    defret_store* store = nullptr;
    Benchmark sink;
    const std::string store_dir = a.str("store"), path = c.str("t3.dfgt");
    if (api(defret_store_open(store_dir.c_str(), &store), sink, "open") &&
        api(defret_fitgap_run(store, path.c_str(), parallel.dump().c_str(), 0, 0, nullptr), sink, "fitgap")) {
      if (slurp(path) != first.at("t.dfgt")) problems.push_back("table differs with 3 workers");
    } else {
      problems.push_back(sink.error);
    }
    defret_store_free(store);
  }

  // Save/load round trips.
  const ShapeStore store = ShapeStore::open(a.str("store"));
  const FitGapTable table = load_table(a.str("t.dfgt"));
  if (!(decode_table(encode_table(table)) == table)) problems.push_back("table round trip");
  save_table(table, c.str("t.dfgt"));
  if (!(load_table(c.str("t.dfgt")) == table)) problems.push_back("table file round trip");

  const EmbeddingModel model = load_checkpoint(a.str("m.ckpt"));
  const EmbeddingModel back = decode_checkpoint(encode_checkpoint(model));
  if (back.parameters() != model.parameters() || !(back.architecture() == model.architecture()))
    problems.push_back("checkpoint round trip");

  const RetrievalIndex index = build_index(store.shapes(), model);
  const RetrievalIndex index_back = decode_index(encode_index(index));
  if (encode_index(index_back) != encode_index(index)) problems.push_back("index round trip");

  for (const ShapeRecord& s : store.shapes()) {
    // Stored clouds are already f32, so they come back unchanged.
    if (decode_cloud(encode_cloud(s.cloud_train)).points != s.cloud_train.points) problems.push_back("cloud " + s.id);
    save_cloud(s.cloud_eval, c.str("c.drpc"));
    if (load_cloud(c.str("c.drpc")).points != s.cloud_eval.points) problems.push_back("cloud file " + s.id);
  }
  const UnsignedDistanceGrid udf = build_target_udf(store.shapes()[0], UdfOptions{.resolution = 16});
  // Field values are cached as f32: one rounding, then stable.
  const std::string udf_bytes = encode_udf(udf);
  const UnsignedDistanceGrid udf_back = decode_udf(udf_bytes);
  bool udf_exact = encode_udf(udf_back) == udf_bytes && udf_back.origin() == udf.origin() &&
                   udf_back.cell_size() == udf.cell_size() && udf_back.resolution() == udf.resolution();
  for (std::size_t i = 0; udf_exact && i < udf.values().size(); ++i)
    udf_exact = udf_back.values()[i] == static_cast<double>(static_cast<float>(udf.values()[i]));
  if (!udf_exact) problems.push_back("UDF round trip");

  o.pass = problems.empty();
  o.detail = problems.empty() ? "table, checkpoint and metrics byte-identical across reruns (history up to wall "
                                "time), 3 workers same table, table/checkpoint/index/cloud/UDF round trips exact"
                              : problems.front() + (problems.size() > 1 ? "; " + problems[1] : "");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    try {
      selected.insert(std::stoi(argv[i]));
    } catch (const std::exception&) {
      std::cerr << "usage: acceptance [criterion number...]\n";
      return 2;
    }
  }
  const auto wanted = [&](int n) { return selected.empty() || selected.count(n) > 0; };

  std::optional<Benchmark> bench;
  const auto benchmark = [&]() -> const Benchmark& {
    if (!bench) {
      bench = run_benchmark();
      if (bench->ok) std::ofstream("benchmark_report.json") << benchmark_report(*bench).dump(2) << "\n";
    }
    return *bench;
  };

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, fitgap_properties},
      {2, asymmetry_witness},
      {3, deformation_solver},
      {4, numerical_gradients},
      {5, perplexity_calibration},
      {6, oracle_equivalences},
      {7, [&] { return synthetic_benchmark(benchmark()); }},
      {8, [&] { return strategy_ordering(benchmark()); }},
      {9, determinism_and_formats},
      {10, [&] { return prob_mode_discrimination(benchmark()); }},
  };

  int failures = 0;
  for (const auto& [n, run] : criteria) {
    if (!wanted(n)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("CRITERION %d %s %s (%.1f s)\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(start));
    std::fflush(stdout);
    failures += !o.pass && o.enforced;
  }
  return failures == 0 ? 0 : 1;
}
