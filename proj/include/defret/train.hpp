#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "defret/common.hpp"
#include "defret/embed.hpp"
#include "defret/fitgap.hpp"

namespace defret {

// How learned distances become probabilities for the regression loss.
// Literal: p_hat ~ delta^2. Consistent: p_hat ~ 1 / (delta^2 + eta), so a
// small distance means a likely good fit, matching the target
// probabilities and argmin retrieval.
enum class ProbMode { Literal, Consistent };
enum class Strategy { Margin, Regression };

inline constexpr double kConsistentEta = 1e-8;

const char* to_string(ProbMode m);
const char* to_string(Strategy s);
ProbMode parse_prob_mode(const std::string& s);
Strategy parse_strategy(const std::string& s);

struct TrainConfig {
  Strategy strategy = Strategy::Regression;
  ProbMode prob_mode = ProbMode::Consistent;
  double sigma_p = 3e-4;
  double sigma_n = 6e-4;
  double margin = 10.0;
  double perplexity = 5.0;
  int batch_queries = 8;
  int n_pos = 2;
  int n_neg = 13;
  int n_reg = 15;
  double learning_rate = 1e-3;
  int epochs = 350;
  std::uint64_t seed = 0;
  // Margin strategy only.
  bool hard_negative_mining = false;
  int mining_warmup_epochs = 30;
  int mining_refresh_epochs = 10;
  int n_hard = 8;
  Architecture architecture;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// ---- losses on distances ---------------------------------------------------

struct MarginLossValue {
  double loss = 0.0;
  std::vector<double> d_pos;  // d loss / d delta(t; p)
  std::vector<double> d_neg;  // d loss / d delta(t; n)
};

// mean_n [ max_p delta(t;p) - delta(t;n) + margin ]_+ ; subgradient 0 at kinks.
MarginLossValue margin_loss(std::span<const double> pos, std::span<const double> neg, double margin);

double entropy_bits(std::span<const double> p);

// p(s;t) = exp(-e^2 / 2 sigma^2) / sum, evaluated with a max shift.
std::vector<double> target_probs(std::span<const double> gaps, double sigma);

struct SigmaCalibration {
  double sigma = 1.0;
  double entropy = 0.0;  // bits, at `sigma`
  // All gaps equal: every sigma gives log2(n) bits and sigma is set to 1.
  bool degenerate = false;
  // The requested perplexity is below the sigma -> 0 limit.
  bool unattainable = false;
};

// Bisection in log(sigma) until the entropy of target_probs equals
// log2(perplexity).
SigmaCalibration calibrate_sigma(std::span<const double> gaps, double perplexity);

std::vector<double> predicted_probs(std::span<const double> deltas, ProbMode mode);
std::vector<double> predicted_probs_from_squared(std::span<const double> sq_deltas, ProbMode mode);

struct RegLossValue {
  double loss = 0.0;
  std::vector<double> d_sq;  // d loss / d delta^2
};

// mean_s |p_hat(s) - p(s)| with p_hat from squared distances.
RegLossValue reg_loss(std::span<const double> sq_deltas, std::span<const double> target, ProbMode mode);

// ---- adam --------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamParams& hp);

// ---- batches through the network ---------------------------------------------

struct TripletBatch {
  std::uint32_t query = 0;
  std::vector<std::uint32_t> positives;
  std::vector<std::uint32_t> negatives;
};

struct RegBatch {
  std::uint32_t query = 0;
  std::vector<std::uint32_t> sources;
  std::vector<double> target_probs;
  double sigma = 1.0;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d parameters
};

// Encoder input per database index; only indices used by the batches need
// to be non-empty.
using BatchClouds = std::vector<std::span<const Vec3>>;

// Mean over queries of the margin loss, with parameter gradients.
LossGrad margin_batch_loss(const EmbeddingModel& model, const BatchClouds& clouds,
                           std::span<const TripletBatch> batches, double margin);

// Mean over queries of the regression loss, with parameter gradients.
LossGrad reg_batch_loss(const EmbeddingModel& model, const BatchClouds& clouds, std::span<const RegBatch> batches,
                        ProbMode mode);

// ---- hard negative mining ------------------------------------------------------

// Keeps codes for the whole database, refreshed on a fixed epoch schedule,
// and proposes the negatives closest to the query under the cached codes.
class HardNegativeMiner {
 public:
  HardNegativeMiner(int warmup_epochs = 30, int refresh_epochs = 10, int n_hard = 8, int n_random = 5);

  bool active(int epoch) const { return epoch >= warmup_; }
  bool refresh_due(int epoch) const;
  void refresh(const EmbeddingModel& model, std::span<const ShapeRecord> db, int epoch);
  void set_codes(std::vector<EgocentricCode> codes, int epoch);
  int cache_epoch() const { return cache_epoch_; }
  const std::vector<EgocentricCode>& codes() const { return codes_; }

  // The `count` negatives with the smallest cached delta(query; s), ties by index.
  std::vector<std::uint32_t> hardest(std::uint32_t query, std::span<const std::uint32_t> negatives,
                                     std::size_t count) const;
  // n_hard hardest plus n_random others; all negatives when there are fewer.
  std::vector<std::uint32_t> sample(std::uint32_t query, std::span<const std::uint32_t> negatives, Rng& rng) const;

 private:
  int warmup_, refresh_, n_hard_, n_random_;
  int cache_epoch_ = -1;
  std::vector<EgocentricCode> codes_;
};

// ---- training loop ---------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  int skipped_queries = 0;
  double wall_time = 0.0;  // seconds since training started
};

struct TrainResult {
  EmbeddingModel model;
  std::vector<EpochStats> history;
  int valid_queries = 0;
};

struct TrainOptions {
  // Shapes allowed as queries and sources; empty means the whole database.
  std::vector<std::uint32_t> subset;
  std::function<void(const EpochStats&)> on_epoch;
};

// Fully reproducible for a fixed seed (training is single-threaded).
TrainResult train(std::span<const ShapeRecord> db, const FitGapTable& table, const TrainConfig& config,
                  const TrainOptions& options = {});

// "epoch,loss,skipped_queries,wall_time" rows.
std::string history_csv(const std::vector<EpochStats>& history);

}  // namespace defret
