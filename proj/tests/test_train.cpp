#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "defret/train.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace defret;
using namespace defret::test;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

// Shapes with random clouds and a complete table whose gaps come from a
// fixed random matrix, so training can run without deformations.
struct ToyData {
  std::vector<ShapeRecord> db;
  FitGapTable table;
};

ToyData toy_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  ToyData d;
  for (std::size_t i = 0; i < n; ++i) {
    ShapeRecord r;
    r.id = "toy" + std::to_string(i);
    r.cloud_train.points = random_shape_points(rng, 48);
    d.db.push_back(std::move(r));
  }
  for (std::uint32_t t = 0; t < n; ++t)
    for (std::uint32_t s = 0; s < n; ++s)
      if (s != t) d.table.set(s, t, FitGapEntry{uniform(rng, 1e-4, 2e-3), std::numeric_limits<double>::quiet_NaN()});
  return d;
}

TrainConfig toy_config(Strategy strategy) {
  TrainConfig c;
  c.strategy = strategy;
  c.architecture = small_architecture();
  c.architecture.input_points = 32;
  c.sigma_p = 6e-4;
  c.sigma_n = 1.2e-3;
  c.n_reg = 8;
  c.n_pos = 2;
  c.n_neg = 5;
  c.batch_queries = 4;
  c.epochs = 6;
  c.seed = 3;
  return c;
}

// Codes of every shape that has an input cloud.
std::vector<EgocentricCode> all_codes(const EmbeddingModel& m, const BatchClouds& clouds) {
  std::vector<EgocentricCode> c(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i)
    if (!clouds[i].empty()) c[i] = m.code(clouds[i], true);
  return c;
}

}  // namespace

TEST_CASE("margin loss on distances") {
  const std::vector<double> pos{0.5, 1.0}, neg{1.5, 3.0, 0.2};
  const MarginLossValue v = margin_loss(pos, neg, 1.0);
  // Hinges: 1 - 1.5 + 1 = 0.5, 1 - 3 + 1 < 0, 1 - 0.2 + 1 = 1.8.
  CHECK(v.loss == doctest::Approx((0.5 + 1.8) / 3));
  CHECK(v.d_pos == std::vector<double>{0.0, 2.0 / 3});
  CHECK(v.d_neg[0] == doctest::Approx(-1.0 / 3));
  CHECK(v.d_neg[1] == 0.0);
  CHECK(v.d_neg[2] == doctest::Approx(-1.0 / 3));
  CHECK(margin_loss(pos, std::vector<double>{5.0}, 1.0).loss == 0.0);
  CHECK_THROWS_AS(margin_loss({}, neg, 1.0), Error);

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_values(rng, 3, 0, 2), n = random_values(rng, 6, 0, 2);
    const MarginLossValue a = margin_loss(p, n, 0.5);
    const double h = 1e-7;
    for (std::size_t i = 0; i < n.size(); ++i) {
      auto up = n, dn = n;
      up[i] += h;
      dn[i] -= h;
      const double fd = (margin_loss(p, up, 0.5).loss - margin_loss(p, dn, 0.5).loss) / (2 * h);
      if (std::abs(*std::max_element(p.begin(), p.end()) - n[i] + 0.5) > 1e-3) CHECK(a.d_neg[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("target probabilities") {
  const std::vector<double> gaps{0.1, 0.2, 0.3};
  const auto p = target_probs(gaps, 0.1);
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
  CHECK(p[0] > p[1]);
  CHECK(p[1] > p[2]);
  CHECK(p[1] / p[0] == doctest::Approx(std::exp(-(0.04 - 0.01) / 0.02)));
  // Far-apart gaps do not underflow the normalizer.
  const auto q = target_probs(std::vector<double>{10.0, 10.0 + 1e-9}, 1e-6);
  CHECK(std::isfinite(q[0]));
  CHECK(q[0] + q[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(target_probs(gaps, 0.0), Error);
}

TEST_CASE("sigma calibration hits the requested entropy") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gaps = random_values(rng, 30, 1e-4, 5e-3);
    const double perplexity = uniform(rng, 2.0, 20.0);
    const SigmaCalibration c = calibrate_sigma(gaps, perplexity);
    CHECK_FALSE(c.degenerate);
    CHECK_FALSE(c.unattainable);
    CHECK(entropy_bits(target_probs(gaps, c.sigma)) == doctest::Approx(std::log2(perplexity)).epsilon(1e-6));
    CHECK(c.entropy == doctest::Approx(std::log2(perplexity)).epsilon(1e-6));
  }
  SUBCASE("equal gaps are degenerate") {
    const SigmaCalibration c = calibrate_sigma(std::vector<double>(8, 0.3), 5.0);
    CHECK(c.degenerate);
    CHECK(c.sigma == 1.0);
    CHECK(c.entropy == doctest::Approx(3.0));
  }
  SUBCASE("ties at the minimum bound the lowest entropy") {
    const SigmaCalibration c = calibrate_sigma(std::vector<double>{0.1, 0.1, 0.1, 0.2, 0.3, 0.4}, 2.5);
    CHECK(c.unattainable);
  }
  SUBCASE("perplexity outside (1, n) is rejected") {
    CHECK_THROWS_AS(calibrate_sigma(std::vector<double>{0.1, 0.2, 0.3}, 3.0), Error);
  }
}

TEST_CASE("predicted probabilities") {
  const std::vector<double> d{0.5, 1.0, 2.0};
  const auto c = predicted_probs(d, ProbMode::Consistent);
  const auto l = predicted_probs(d, ProbMode::Literal);
  CHECK(std::accumulate(c.begin(), c.end(), 0.0) == doctest::Approx(1.0));
  CHECK(std::accumulate(l.begin(), l.end(), 0.0) == doctest::Approx(1.0));
  CHECK(c[0] > c[1]);
  CHECK(c[1] > c[2]);
  CHECK(l[0] < l[1]);
  CHECK(l[1] < l[2]);
  CHECK(l[2] == doctest::Approx(4.0 / 5.25));
  // All-zero distances under the literal weights fall back to uniform.
  const auto u = predicted_probs(std::vector<double>{0, 0, 0, 0}, ProbMode::Literal);
  for (double x : u) CHECK(x == 0.25);
}

TEST_CASE("regression loss gradient in squared distances") {
  Rng rng(3);
  for (ProbMode mode : {ProbMode::Literal, ProbMode::Consistent}) {
    for (int trial = 0; trial < 40; ++trial) {
      const auto sq = random_values(rng, 7, 0.2, 2.0);
      const auto target = target_probs(random_values(rng, 7, 0.0, 1.0), 0.4);
      const RegLossValue v = reg_loss(sq, target, mode);
      const auto p_hat = predicted_probs_from_squared(sq, mode);
      bool kink = false;
      for (std::size_t i = 0; i < sq.size(); ++i) kink = kink || std::abs(p_hat[i] - target[i]) < kKinkMargin;
      if (kink) continue;
      for (std::size_t j = 0; j < sq.size(); ++j) {
        const double h = 1e-7;
        auto up = sq, dn = sq;
        up[j] += h;
        dn[j] -= h;
        const double fd = (reg_loss(up, target, mode).loss - reg_loss(dn, target, mode).loss) / (2 * h);
        CHECK(relative_error(v.d_sq[j], fd) < 1e-5);
      }
    }
  }
  CHECK_THROWS_AS(reg_loss(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}, ProbMode::Literal), Error);
}

TEST_CASE("adam step") {
  std::vector<double> w{1.0, -2.0, 0.5}, g{0.3, -0.1, 0.0};
  AdamState st;
  AdamParams hp;
  hp.lr = 0.01;
  adam_step(w, g, st, hp);
  // First bias-corrected step moves by lr * g / (|g| + eps).
  CHECK(w[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)));
  CHECK(w[1] == doctest::Approx(-2.0 + 0.01 * 0.1 / (0.1 + 1e-8)));
  CHECK(w[2] == 0.5);

  // Two more steps against a direct evaluation of the recurrences.
  double m = 0.1 * 0.3, v = 0.001 * 0.09, x = w[0];
  for (int step = 2; step <= 3; ++step) {
    const double gs = 0.3 * step;
    std::vector<double> grads{gs, 0.0, 0.0};
    adam_step(w, grads, st, hp);
    m = 0.9 * m + 0.1 * gs;
    v = 0.999 * v + 0.001 * gs * gs;
    x -= 0.01 * (m / (1 - std::pow(0.9, step))) / (std::sqrt(v / (1 - std::pow(0.999, step))) + 1e-8);
    CHECK(w[0] == doctest::Approx(x).epsilon(1e-14));
  }
  CHECK(st.step == 3);
  std::vector<double> bad{std::nan(""), 0, 0};
  CHECK_THROWS_AS(adam_step(w, bad, st, hp), Error);
}

TEST_CASE("batch losses: parameter gradients match finite differences") {
  Rng rng(4);
  int checked = 0, skipped = 0;
  for (int config = 0; config < 30; ++config) {
    EmbeddingModel model(small_architecture(), 500 + config);
    std::vector<std::vector<Vec3>> pts;
    for (int i = 0; i < 8; ++i) pts.push_back(random_shape_points(rng, 20));
    BatchClouds clouds(pts.begin(), pts.end());
    std::vector<std::span<const Vec3>> spans(pts.begin(), pts.end());

    std::function<LossGrad(const EmbeddingModel&)> run;
    std::function<bool(const EmbeddingModel&)> kink;
    if (config % 2 == 0) {
      std::vector<TripletBatch> b{{0, {1, 2}, {3, 4, 5}}, {6, {7, 3}, {0, 1, 2}}};
      // Typical delta here is about 0.1, so the margin sits near the hinges.
      const double margin = uniform(rng, 0.0, 0.2);
      run = [=](const EmbeddingModel& m) { return margin_batch_loss(m, clouds, b, margin); };
      kink = [=](const EmbeddingModel& m) {
        const auto c = all_codes(m, clouds);
        for (const auto& tb : b) {
          std::vector<double> p;
          for (auto s : tb.positives) p.push_back(ego_distance(c[tb.query], c[s]));
          std::sort(p.rbegin(), p.rend());
          if (p[0] - p[1] < kKinkMargin * p[0]) return true;
          for (auto s : tb.negatives)
            if (std::abs(p[0] - ego_distance(c[tb.query], c[s]) + margin) < kKinkMargin * p[0]) return true;
        }
        return false;
      };
    } else {
      const ProbMode mode = config % 4 == 1 ? ProbMode::Consistent : ProbMode::Literal;
      std::vector<RegBatch> b(2);
      b[0].query = 0;
      b[0].sources = {1, 2, 3, 4};
      b[1].query = 5;
      b[1].sources = {6, 7, 0};
      for (auto& rb : b) rb.target_probs = target_probs(random_values(rng, rb.sources.size(), 0, 1), 0.3);
      run = [=](const EmbeddingModel& m) { return reg_batch_loss(m, clouds, b, mode); };
      kink = [=](const EmbeddingModel& m) {
        const auto c = all_codes(m, clouds);
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
    const auto loss = [&](const EmbeddingModel& m) { return run(m).loss; };
    for (int k = 0; k < 6; ++k) {
      const std::size_t idx = uniform_index(rng, model.parameter_count());
      const FdProbe p = probe_parameter(model, idx, lg.grad[idx], loss, spans, kink);
      if (p.skipped) {
        ++skipped;
        continue;
      }
      ++checked;
      INFO("config " << config << " analytic " << p.analytic << " numeric " << p.numeric);
      CHECK(relative_error(p.analytic, p.numeric) < 1e-4);
    }
  }
  CHECK(checked > 100);
  MESSAGE("checked " << checked << ", skipped at kinks " << skipped);
}

TEST_CASE("hard negative mining") {
  HardNegativeMiner miner(3, 2, 2, 1);
  CHECK_FALSE(miner.active(2));
  CHECK_FALSE(miner.refresh_due(2));
  CHECK(miner.refresh_due(3));

  std::vector<EgocentricCode> codes;
  for (double x : {0.0, 3.0, 1.0, 2.0, 0.5}) {
    EgocentricCode c;
    c.z = Eigen::VectorXd::Constant(1, x);
    c.g = Eigen::VectorXd::Ones(1);
    codes.push_back(c);
  }
  miner.set_codes(codes, 3);
  CHECK_FALSE(miner.refresh_due(4));
  CHECK(miner.refresh_due(5));
  CHECK_FALSE(miner.refresh_due(6));
  const std::vector<std::uint32_t> neg{1, 2, 3, 4};
  CHECK(miner.hardest(0, neg, 2) == std::vector<std::uint32_t>{4, 2});
  Rng rng(1);
  const auto s = miner.sample(0, neg, rng);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == 4);
  CHECK(s[1] == 2);
  CHECK((s[2] == 1 || s[2] == 3));
  const std::vector<std::uint32_t> few{1, 3};
  CHECK(miner.sample(0, few, rng) == few);
}

TEST_CASE("training") {
  const ToyData d = toy_data(12, 7);

  SUBCASE("is reproducible for a fixed seed") {
    for (Strategy s : {Strategy::Regression, Strategy::Margin}) {
      const TrainResult a = train(d.db, d.table, toy_config(s));
      const TrainResult b = train(d.db, d.table, toy_config(s));
      CHECK(a.model.parameters() == b.model.parameters());
      REQUIRE(a.history.size() == 6);
      for (std::size_t e = 0; e < a.history.size(); ++e) CHECK(a.history[e].loss == b.history[e].loss);
      TrainConfig other = toy_config(s);
      other.seed = 4;
      CHECK(train(d.db, d.table, other).model.parameters() != a.model.parameters());
    }
  }
  SUBCASE("mining run is reproducible") {
    TrainConfig c = toy_config(Strategy::Margin);
    c.hard_negative_mining = true;
    c.mining_warmup_epochs = 2;
    c.mining_refresh_epochs = 2;
    c.n_hard = 3;
    CHECK(train(d.db, d.table, c).model.parameters() == train(d.db, d.table, c).model.parameters());
  }
  SUBCASE("subset restricts queries and sources") {
    TrainOptions o;
    o.subset = {0, 1, 2, 3, 4, 5, 6, 7};
    TrainConfig c = toy_config(Strategy::Regression);
    int epochs_seen = 0;
    o.on_epoch = [&](const EpochStats& st) { CHECK(st.epoch == epochs_seen++); };
    CHECK(train(d.db, d.table, c, o).valid_queries == 8);
    CHECK(epochs_seen == 6);
    o.subset = {0, 1, 2};
    CHECK_THROWS_AS(train(d.db, d.table, c, o), Error);  // 2 sources < perplexity
  }
  SUBCASE("regression loss decreases on a small problem") {
    TrainConfig c = toy_config(Strategy::Regression);
    c.epochs = 60;
    c.learning_rate = 3e-3;
    const TrainResult r = train(d.db, d.table, c);
    double first = 0, last = 0;
    for (int e = 0; e < 10; ++e) {
      first += r.history[e].loss;
      last += r.history[50 + e].loss;
    }
    CHECK(last < first);
  }
  SUBCASE("history export") {
    const TrainResult r = train(d.db, d.table, toy_config(Strategy::Regression));
    const std::string csv = history_csv(r.history);
    CHECK(csv.rfind("epoch,loss,skipped_queries,wall_time\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  }
}

TEST_CASE("training configuration") {
  TrainConfig c = toy_config(Strategy::Margin);
  c.prob_mode = ProbMode::Literal;
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epoch", 3}}), Error);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"strategy", "triplet"}}), Error);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", "many"}}), Error);
  CHECK(train_config_from_json(nlohmann::json{{"epochs", 9}}).epochs == 9);
  CHECK(train_config_from_json(nlohmann::json::object()).sigma_p == TrainConfig{}.sigma_p);

  TrainConfig bad;
  bad.sigma_p = bad.sigma_n;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.perplexity = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(parse_strategy("margin") == Strategy::Margin);
  CHECK(parse_prob_mode("literal") == ProbMode::Literal);
  CHECK_THROWS_AS(parse_prob_mode("squared"), Error);
}
