#include "defret/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace defret {

const char* to_string(ProbMode m) { return m == ProbMode::Literal ? "literal" : "consistent"; }
const char* to_string(Strategy s) { return s == Strategy::Margin ? "margin" : "regression"; }

ProbMode parse_prob_mode(const std::string& s) {
  if (s == "literal") return ProbMode::Literal;
  if (s == "consistent") return ProbMode::Consistent;
  fail(ErrorCode::Config, "unknown prob_mode '" + s + "' (expected literal or consistent)");
}

Strategy parse_strategy(const std::string& s) {
  if (s == "margin") return Strategy::Margin;
  if (s == "regression") return Strategy::Regression;
  fail(ErrorCode::Config, "unknown strategy '" + s + "' (expected margin or regression)");
}

void TrainConfig::validate() const {
  require(sigma_p < sigma_n, ErrorCode::Config, "train config: sigma_p must be smaller than sigma_n");
  require(perplexity >= 2.0, ErrorCode::Config, "train config: perplexity must be >= 2");
  require(batch_queries >= 1 && n_pos >= 1 && n_neg >= 1 && n_reg >= 1, ErrorCode::Config,
          "train config: batch and subset counts must be >= 1");
  require(learning_rate > 0.0, ErrorCode::Config, "train config: learning_rate must be positive");
  require(epochs >= 0, ErrorCode::Config, "train config: epochs must be >= 0");
  require(margin >= 0.0, ErrorCode::Config, "train config: margin must be non-negative");
  require(mining_warmup_epochs >= 0 && mining_refresh_epochs >= 1 && n_hard >= 0, ErrorCode::Config,
          "train config: invalid hard-negative mining schedule");
  architecture.validate();
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["strategy"] = to_string(c.strategy);
  j["prob_mode"] = to_string(c.prob_mode);
  j["sigma_p"] = c.sigma_p;
  j["sigma_n"] = c.sigma_n;
  j["margin"] = c.margin;
  j["perplexity"] = c.perplexity;
  j["batch_queries"] = c.batch_queries;
  j["n_pos"] = c.n_pos;
  j["n_neg"] = c.n_neg;
  j["n_reg"] = c.n_reg;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["hard_negative_mining"] = c.hard_negative_mining;
  j["mining_warmup_epochs"] = c.mining_warmup_epochs;
  j["mining_refresh_epochs"] = c.mining_refresh_epochs;
  j["n_hard"] = c.n_hard;
  j["encoder"] = c.architecture.encoder;
  j["head_hidden"] = c.architecture.head_hidden;
  j["k"] = c.architecture.k;
  j["input_points"] = c.architecture.input_points;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  require(j.is_object(), ErrorCode::Config, "train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "strategy") c.strategy = parse_strategy(v.get<std::string>());
      else if (key == "prob_mode") c.prob_mode = parse_prob_mode(v.get<std::string>());
      else if (key == "sigma_p") c.sigma_p = v.get<double>();
      else if (key == "sigma_n") c.sigma_n = v.get<double>();
      else if (key == "margin") c.margin = v.get<double>();
      else if (key == "perplexity") c.perplexity = v.get<double>();
      else if (key == "batch_queries") c.batch_queries = v.get<int>();
      else if (key == "n_pos") c.n_pos = v.get<int>();
      else if (key == "n_neg") c.n_neg = v.get<int>();
      else if (key == "n_reg") c.n_reg = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "hard_negative_mining") c.hard_negative_mining = v.get<bool>();
      else if (key == "mining_warmup_epochs") c.mining_warmup_epochs = v.get<int>();
      else if (key == "mining_refresh_epochs") c.mining_refresh_epochs = v.get<int>();
      else if (key == "n_hard") c.n_hard = v.get<int>();
      else if (key == "encoder") c.architecture.encoder = v.get<std::vector<int>>();
      else if (key == "head_hidden") c.architecture.head_hidden = v.get<std::vector<int>>();
      else if (key == "k") c.architecture.k = v.get<int>();
      else if (key == "input_points") c.architecture.input_points = v.get<int>();
      else fail(ErrorCode::Config, "train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("train config: ") + e.what());
  }
  return c;
}

// ---- losses on distances -------------------------------------------------------

MarginLossValue margin_loss(std::span<const double> pos, std::span<const double> neg, double margin) {
  require(!pos.empty() && !neg.empty(), ErrorCode::InvalidArgument, "margin_loss: empty positive or negative subset");
  MarginLossValue out;
  out.d_pos.assign(pos.size(), 0.0);
  out.d_neg.assign(neg.size(), 0.0);
  // First maximum takes the gradient.
  const std::size_t worst = static_cast<std::size_t>(std::max_element(pos.begin(), pos.end()) - pos.begin());
  const double inv = 1.0 / static_cast<double>(neg.size());
  for (std::size_t n = 0; n < neg.size(); ++n) {
    const double h = pos[worst] - neg[n] + margin;
    if (h > 0.0) {
      out.loss += h * inv;
      out.d_pos[worst] += inv;
      out.d_neg[n] -= inv;
    }
  }
  return out;
}

double entropy_bits(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log2(x);
  }
  return h;
}

std::vector<double> target_probs(std::span<const double> gaps, double sigma) {
  require(sigma > 0.0, ErrorCode::InvalidArgument, "target_probs: sigma must be positive");
  require(!gaps.empty(), ErrorCode::InvalidArgument, "target_probs: no gaps");
  double min_sq = std::numeric_limits<double>::infinity();
  for (double e : gaps) min_sq = std::min(min_sq, e * e);
  std::vector<double> p(gaps.size());
  double sum = 0.0;
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    p[i] = std::exp(-(gaps[i] * gaps[i] - min_sq) / denom);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

SigmaCalibration calibrate_sigma(std::span<const double> gaps, double perplexity) {
  require(gaps.size() >= 2, ErrorCode::InvalidArgument, "calibrate_sigma: need at least 2 gaps");
  SigmaCalibration out;
  const auto [lo_it, hi_it] = std::minmax_element(gaps.begin(), gaps.end());
  const double min_sq = *lo_it * *lo_it;
  double max_sq = 0.0;
  for (double e : gaps) max_sq = std::max(max_sq, e * e);
  if (max_sq == min_sq) {
    out.sigma = 1.0;
    out.degenerate = true;
    out.entropy = std::log2(static_cast<double>(gaps.size()));
    return out;
  }
  require(perplexity > 1.0 && perplexity < static_cast<double>(gaps.size()), ErrorCode::InvalidArgument,
          "calibrate_sigma: perplexity must lie in (1, number of gaps)");
  const double target = std::log2(perplexity);
  auto entropy_at = [&](double sigma) {
    const auto p = target_probs(gaps, sigma);
    return entropy_bits(p);
  };

  // sigma -> 0 concentrates mass on the smallest gaps.
  std::size_t ties = 0;
  for (double e : gaps) ties += (e * e == min_sq);
  if (target <= std::log2(static_cast<double>(ties))) {
    out.unattainable = true;
    out.sigma = std::sqrt(max_sq - min_sq) * 1e-6;
    out.entropy = entropy_at(out.sigma);
    return out;
  }

  // Bracket in log(sigma), then bisect. Entropy increases with sigma.
  double log_lo = std::log(std::sqrt(max_sq - min_sq));
  double log_hi = log_lo;
  for (int i = 0; i < 200 && entropy_at(std::exp(log_lo)) > target; ++i) log_lo -= std::log(2.0);
  for (int i = 0; i < 200 && entropy_at(std::exp(log_hi)) < target; ++i) log_hi += std::log(2.0);
  double mid = 0.5 * (log_lo + log_hi);
  double h = entropy_at(std::exp(mid));
  for (int i = 0; i < 200 && std::abs(h - target) > 1e-9; ++i) {
    if (h < target) log_lo = mid;
    else log_hi = mid;
    mid = 0.5 * (log_lo + log_hi);
    h = entropy_at(std::exp(mid));
  }
  out.sigma = std::exp(mid);
  out.entropy = h;
  return out;
}

namespace {

std::vector<double> weights_from_squared(std::span<const double> sq, ProbMode mode) {
  std::vector<double> w(sq.size());
  for (std::size_t i = 0; i < sq.size(); ++i)
    w[i] = mode == ProbMode::Literal ? sq[i] : 1.0 / (sq[i] + kConsistentEta);
  return w;
}

}  // namespace

std::vector<double> predicted_probs_from_squared(std::span<const double> sq_deltas, ProbMode mode) {
  require(!sq_deltas.empty(), ErrorCode::InvalidArgument, "predicted_probs: no distances");
  auto w = weights_from_squared(sq_deltas, mode);
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(sum > 0.0)) return std::vector<double>(w.size(), 1.0 / static_cast<double>(w.size()));
  for (auto& x : w) x /= sum;
  return w;
}

std::vector<double> predicted_probs(std::span<const double> deltas, ProbMode mode) {
  std::vector<double> sq(deltas.size());
  for (std::size_t i = 0; i < deltas.size(); ++i) sq[i] = deltas[i] * deltas[i];
  return predicted_probs_from_squared(sq, mode);
}

RegLossValue reg_loss(std::span<const double> sq_deltas, std::span<const double> target, ProbMode mode) {
  require(sq_deltas.size() == target.size() && !target.empty(), ErrorCode::InvalidArgument,
          "reg_loss: size mismatch");
  const std::size_t n = target.size();
  RegLossValue out;
  out.d_sq.assign(n, 0.0);
  const auto w = weights_from_squared(sq_deltas, mode);
  const double W = std::accumulate(w.begin(), w.end(), 0.0);
  const auto p_hat = predicted_probs_from_squared(sq_deltas, mode);

  std::vector<double> c(n);  // d loss / d p_hat
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = p_hat[i] - target[i];
    out.loss += std::abs(diff);
    c[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    c[i] /= static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  if (!(W > 0.0)) return out;  // uniform fallback has no gradient

  // p_hat_i = w_i / W  =>  d loss / d w_j = (c_j - sum_i c_i p_hat_i) / W
  double cp = 0.0;
  for (std::size_t i = 0; i < n; ++i) cp += c[i] * p_hat[i];
  for (std::size_t j = 0; j < n; ++j) {
    const double dw = (c[j] - cp) / W;
    const double dw_dsq = mode == ProbMode::Literal ? 1.0 : -w[j] * w[j];
    out.d_sq[j] = dw * dw_dsq;
  }
  return out;
}

// ---- adam -----------------------------------------------------------------------

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st, const AdamParams& hp) {
  require(params.size() == grads.size(), ErrorCode::InvalidArgument, "adam_step: size mismatch");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  require(st.m.size() == params.size(), ErrorCode::InvalidArgument, "adam_step: state size mismatch");
  for (double g : grads) require(std::isfinite(g), ErrorCode::Numeric, "adam_step: non-finite gradient");
  ++st.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = hp.beta1 * st.m[i] + (1.0 - hp.beta1) * grads[i];
    st.v[i] = hp.beta2 * st.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
    const double m_hat = st.m[i] / bc1;
    const double v_hat = st.v[i] / bc2;
    params[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

// ---- batches through the network ---------------------------------------------------

namespace {

// Forward passes for every shape touched by a step, with gradient
// accumulation on codes before a single backward pass per shape.
class CodeGraph {
 public:
  CodeGraph(const EmbeddingModel& model, const BatchClouds& clouds) : model_(model), clouds_(clouds) {}

  void need(std::uint32_t id, bool with_field) {
    auto& n = nodes_[id];
    n.with_field = n.with_field || with_field;
  }

  void run() {
    for (auto& [id, n] : nodes_) {
      require(id < clouds_.size() && !clouds_[id].empty(), ErrorCode::InvalidArgument,
              "batch: missing input cloud for shape " + std::to_string(id));
      n.code = model_.forward(clouds_[id], n.with_field, n.tape);
      n.dz = Eigen::VectorXd::Zero(n.code.z.size());
      if (n.with_field) n.dg = Eigen::VectorXd::Zero(n.code.z.size());
    }
  }

  double sq_distance(std::uint32_t target, std::uint32_t observer) {
    return ego_distance_squared(nodes_.at(target).code, nodes_.at(observer).code);
  }

  // Adds scale * d(delta^2)/d(codes).
  void add_sq_grad(std::uint32_t target, std::uint32_t observer, double scale) {
    if (scale == 0.0) return;
    auto& t = nodes_.at(target);
    auto& s = nodes_.at(observer);
    const Eigen::VectorXd diff = t.code.z - s.code.z;
    const Eigen::VectorXd gz = 2.0 * s.code.g->cwiseProduct(diff);
    t.dz += scale * gz;
    s.dz -= scale * gz;
    s.dg += scale * diff.cwiseProduct(diff);
  }

  std::vector<double> backward(double scale) {
    std::vector<double> grad(model_.parameter_count(), 0.0);
    for (auto& [id, n] : nodes_) {
      const Eigen::VectorXd dz = scale * n.dz;
      if (n.with_field) {
        const Eigen::VectorXd dg = scale * n.dg;
        model_.backward(n.tape, dz, &dg, grad);
      } else {
        model_.backward(n.tape, dz, nullptr, grad);
      }
    }
    return grad;
  }

 private:
  struct Node {
    bool with_field = false;
    EmbeddingModel::Tape tape;
    EgocentricCode code;
    Eigen::VectorXd dz, dg;
  };
  const EmbeddingModel& model_;
  const BatchClouds& clouds_;
  std::map<std::uint32_t, Node> nodes_;
};

}  // namespace

LossGrad margin_batch_loss(const EmbeddingModel& model, const BatchClouds& clouds,
                           std::span<const TripletBatch> batches, double margin) {
  require(!batches.empty(), ErrorCode::InvalidArgument, "margin loss: empty batch");
  CodeGraph graph(model, clouds);
  for (const auto& b : batches) {
    graph.need(b.query, false);
    for (auto s : b.positives) graph.need(s, true);
    for (auto s : b.negatives) graph.need(s, true);
  }
  graph.run();

  LossGrad out;
  for (const auto& b : batches) {
    std::vector<double> pos, neg;
    for (auto s : b.positives) pos.push_back(std::sqrt(graph.sq_distance(b.query, s)));
    for (auto s : b.negatives) neg.push_back(std::sqrt(graph.sq_distance(b.query, s)));
    const auto v = margin_loss(pos, neg, margin);
    out.loss += v.loss;
    // d delta = d delta^2 / (2 delta); zero distance takes subgradient 0.
    for (std::size_t i = 0; i < pos.size(); ++i)
      if (pos[i] > 0.0) graph.add_sq_grad(b.query, b.positives[i], v.d_pos[i] / (2.0 * pos[i]));
    for (std::size_t i = 0; i < neg.size(); ++i)
      if (neg[i] > 0.0) graph.add_sq_grad(b.query, b.negatives[i], v.d_neg[i] / (2.0 * neg[i]));
  }
  const double scale = 1.0 / static_cast<double>(batches.size());
  out.loss *= scale;
  out.grad = graph.backward(scale);
  return out;
}

LossGrad reg_batch_loss(const EmbeddingModel& model, const BatchClouds& clouds, std::span<const RegBatch> batches,
                        ProbMode mode) {
  require(!batches.empty(), ErrorCode::InvalidArgument, "regression loss: empty batch");
  CodeGraph graph(model, clouds);
  for (const auto& b : batches) {
    require(b.sources.size() == b.target_probs.size() && !b.sources.empty(), ErrorCode::InvalidArgument,
            "regression loss: sources and target probabilities differ in size");
    graph.need(b.query, false);
    for (auto s : b.sources) graph.need(s, true);
  }
  graph.run();

  LossGrad out;
  for (const auto& b : batches) {
    std::vector<double> sq;
    for (auto s : b.sources) sq.push_back(graph.sq_distance(b.query, s));
    const auto v = reg_loss(sq, b.target_probs, mode);
    out.loss += v.loss;
    for (std::size_t i = 0; i < sq.size(); ++i) graph.add_sq_grad(b.query, b.sources[i], v.d_sq[i]);
  }
  const double scale = 1.0 / static_cast<double>(batches.size());
  out.loss *= scale;
  out.grad = graph.backward(scale);
  return out;
}

// ---- hard negative mining --------------------------------------------------------

HardNegativeMiner::HardNegativeMiner(int warmup_epochs, int refresh_epochs, int n_hard, int n_random)
    : warmup_(warmup_epochs), refresh_(refresh_epochs), n_hard_(n_hard), n_random_(n_random) {}

bool HardNegativeMiner::refresh_due(int epoch) const {
  if (!active(epoch)) return false;
  return cache_epoch_ < warmup_ || ((epoch - warmup_) % refresh_ == 0 && cache_epoch_ != epoch);
}

void HardNegativeMiner::refresh(const EmbeddingModel& model, std::span<const ShapeRecord> db, int epoch) {
  std::vector<EgocentricCode> codes;
  codes.reserve(db.size());
  for (const auto& s : db) codes.push_back(model.code(s.cloud_train, true));
  set_codes(std::move(codes), epoch);
}

void HardNegativeMiner::set_codes(std::vector<EgocentricCode> codes, int epoch) {
  codes_ = std::move(codes);
  cache_epoch_ = epoch;
}

std::vector<std::uint32_t> HardNegativeMiner::hardest(std::uint32_t query, std::span<const std::uint32_t> negatives,
                                                      std::size_t count) const {
  require(query < codes_.size(), ErrorCode::InvalidArgument, "hard negative mining: cache not built");
  std::vector<std::pair<double, std::uint32_t>> scored;
  for (auto s : negatives) scored.emplace_back(ego_distance_squared(codes_[query], codes_.at(s)), s);
  std::sort(scored.begin(), scored.end());
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < std::min(count, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

std::vector<std::uint32_t> HardNegativeMiner::sample(std::uint32_t query, std::span<const std::uint32_t> negatives,
                                                     Rng& rng) const {
  const std::size_t want = static_cast<std::size_t>(n_hard_ + n_random_);
  if (negatives.size() <= want) return {negatives.begin(), negatives.end()};
  auto out = hardest(query, negatives, static_cast<std::size_t>(n_hard_));
  std::vector<std::uint32_t> rest;
  for (auto s : negatives) {
    if (std::find(out.begin(), out.end(), s) == out.end()) rest.push_back(s);
  }
  auto extra = sample_without_replacement(std::move(rest), static_cast<std::size_t>(n_random_), rng);
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

// ---- training loop ------------------------------------------------------------------

namespace {

struct QueryData {
  std::uint32_t target = 0;
  std::vector<std::uint32_t> sources;
  std::vector<double> gaps;
  // regression
  double sigma = 1.0;
  // margin
  std::vector<std::uint32_t> positives, negatives;
};

}  // namespace

TrainResult train(std::span<const ShapeRecord> db, const FitGapTable& table, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  std::vector<bool> allowed(db.size(), options.subset.empty());
  for (auto id : options.subset) {
    require(id < db.size(), ErrorCode::InvalidArgument, "train: subset index out of range");
    allowed[id] = true;
  }

  std::vector<QueryData> queries;
  int skipped_setup = 0;
  for (std::uint32_t t = 0; t < db.size(); ++t) {
    if (!allowed[t]) continue;
    QueryData q;
    q.target = t;
    for (auto s : table.sources_for(t)) {
      if (s < db.size() && allowed[s]) {
        q.sources.push_back(s);
        q.gaps.push_back(table.find(s, t)->e_train);
      }
    }
    if (q.sources.empty()) continue;
    if (config.strategy == Strategy::Regression) {
      if (static_cast<double>(q.sources.size()) <= config.perplexity) {
        ++skipped_setup;
        continue;
      }
      q.sigma = calibrate_sigma(q.gaps, config.perplexity).sigma;
    } else {
      for (std::size_t i = 0; i < q.sources.size(); ++i) {
        if (q.gaps[i] <= config.sigma_p) q.positives.push_back(q.sources[i]);
        if (q.gaps[i] > config.sigma_n) q.negatives.push_back(q.sources[i]);
      }
      if (q.positives.empty() || q.negatives.empty()) {
        ++skipped_setup;
        continue;
      }
    }
    queries.push_back(std::move(q));
  }
  require(!queries.empty(), ErrorCode::InvalidArgument,
          "train: no valid queries (check the fit-gap table coverage and thresholds)");

  TrainResult res;
  res.valid_queries = static_cast<int>(queries.size());
  res.model = EmbeddingModel(config.architecture, derive_seed(config.seed, "model"));
  AdamState adam;
  AdamParams hp;
  hp.lr = config.learning_rate;
  Rng rng(derive_seed(config.seed, "train"));
  HardNegativeMiner miner(config.mining_warmup_epochs, config.mining_refresh_epochs, config.n_hard,
                          std::max(0, config.n_neg - config.n_hard));
  const bool mining = config.strategy == Strategy::Margin && config.hard_negative_mining;

  const auto start = std::chrono::steady_clock::now();
  const std::size_t input_points = static_cast<std::size_t>(config.architecture.input_points);
  std::vector<std::vector<Vec3>> sampled(db.size());
  BatchClouds clouds(db.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (mining && miner.refresh_due(epoch)) miner.refresh(res.model, db, epoch);
    const bool mine_now = mining && miner.active(epoch);

    std::vector<std::size_t> order(queries.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, rng);

    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_queries)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_queries));
      std::vector<TripletBatch> triplets;
      std::vector<RegBatch> regs;
      std::vector<std::uint32_t> touched;
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const QueryData& q = queries[order[bi]];
        touched.push_back(q.target);
        if (config.strategy == Strategy::Regression) {
          std::vector<std::size_t> idx(q.sources.size());
          std::iota(idx.begin(), idx.end(), 0);
          idx = sample_without_replacement(std::move(idx), static_cast<std::size_t>(config.n_reg), rng);
          RegBatch rb;
          rb.query = q.target;
          rb.sigma = q.sigma;
          std::vector<double> gaps;
          for (auto i : idx) {
            rb.sources.push_back(q.sources[i]);
            gaps.push_back(q.gaps[i]);
          }
          rb.target_probs = target_probs(gaps, q.sigma);
          touched.insert(touched.end(), rb.sources.begin(), rb.sources.end());
          regs.push_back(std::move(rb));
        } else {
          TripletBatch tb;
          tb.query = q.target;
          tb.positives = sample_without_replacement(q.positives, static_cast<std::size_t>(config.n_pos), rng);
          tb.negatives = mine_now ? miner.sample(q.target, q.negatives, rng)
                                  : sample_without_replacement(q.negatives, static_cast<std::size_t>(config.n_neg), rng);
          touched.insert(touched.end(), tb.positives.begin(), tb.positives.end());
          touched.insert(touched.end(), tb.negatives.begin(), tb.negatives.end());
          triplets.push_back(std::move(tb));
        }
      }

      // Random downsampling of each touched shape's training cloud.
      std::sort(touched.begin(), touched.end());
      touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
      for (auto id : touched) {
        const auto& pts = db[id].cloud_train.points;
        require(!pts.empty(), ErrorCode::InvalidArgument, "train: shape '" + db[id].id + "' has no training cloud");
        if (input_points == 0 || input_points >= pts.size()) {
          clouds[id] = pts;
          continue;
        }
        std::vector<std::uint32_t> all(pts.size());
        std::iota(all.begin(), all.end(), 0u);
        auto pick = sample_without_replacement(std::move(all), input_points, rng);
        sampled[id].clear();
        for (auto i : pick) sampled[id].push_back(pts[i]);
        clouds[id] = sampled[id];
      }

      LossGrad lg = config.strategy == Strategy::Regression
                        ? reg_batch_loss(res.model, clouds, regs, config.prob_mode)
                        : margin_batch_loss(res.model, clouds, triplets, config.margin);
      require(std::isfinite(lg.loss), ErrorCode::Numeric,
              "train: non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps));
      adam_step(res.model.parameters(), lg.grad, adam, hp);
      res.model.quantize();
      loss_sum += lg.loss;
      ++steps;
      for (auto id : touched) clouds[id] = {};
    }

    EpochStats st;
    st.epoch = epoch;
    st.loss = steps > 0 ? loss_sum / steps : 0.0;
    st.skipped_queries = skipped_setup;
    st.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.history.push_back(st);
    if (options.on_epoch) options.on_epoch(st);
  }
  return res;
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream out;
  out << "epoch,loss,skipped_queries,wall_time\n";
  out.precision(17);
  for (const auto& h : history) out << h.epoch << ',' << h.loss << ',' << h.skipped_queries << ',' << h.wall_time << '\n';
  return out.str();
}

}  // namespace defret
