#include "defret/embed.hpp"

#include <cmath>

#include <json.hpp>

#include "defret/common.hpp"

namespace defret {

void Architecture::validate() const {
  require(!encoder.empty(), ErrorCode::Config, "architecture: encoder needs at least one layer");
  for (int w : encoder) require(w > 0, ErrorCode::Config, "architecture: encoder widths must be positive");
  for (int w : head_hidden) require(w > 0, ErrorCode::Config, "architecture: head widths must be positive");
  require(k > 0, ErrorCode::Config, "architecture: k must be positive");
  require(input_points >= 0, ErrorCode::Config, "architecture: input_points must be >= 0");
}

double ego_distance_squared(const EgocentricCode& target, const EgocentricCode& observer) {
  require(observer.g.has_value(), ErrorCode::InvalidArgument, "ego_distance: observer has no distance field");
  require(target.z.size() == observer.z.size() && observer.g->size() == observer.z.size(), ErrorCode::InvalidArgument,
          "ego_distance: dimension mismatch");
  return (observer.g->array() * (target.z - observer.z).array().square()).sum();
}

double ego_distance(const EgocentricCode& target, const EgocentricCode& observer) {
  return std::sqrt(ego_distance_squared(target, observer));
}

// ---- model ----------------------------------------------------------------

void EmbeddingModel::layout() {
  arch_.validate();
  layers_.clear();
  std::size_t off = 0;
  auto add = [&](int in, int out) {
    Dense d{off, off + static_cast<std::size_t>(in) * out, in, out};
    off = d.bias_offset + out;
    layers_.push_back(d);
  };
  int in = 3;
  for (int w : arch_.encoder) {
    add(in, w);
    in = w;
  }
  n_enc_ = layers_.size();
  const int feature = in;
  for (int head = 0; head < 2; ++head) {
    in = feature;
    for (int w : arch_.head_hidden) {
      add(in, w);
      in = w;
    }
    add(in, arch_.k);
  }
  n_head_ = arch_.head_hidden.size() + 1;
  params_.resize(off);
}

EmbeddingModel::EmbeddingModel(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  layout();
  Rng rng(derive_seed(seed, "init"));
  for (const auto& d : layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d.in));
    for (std::size_t i = d.weight_offset; i < d.bias_offset + d.out; ++i) params_[i] = uniform(rng, -bound, bound);
  }
  quantize();
}

EmbeddingModel::EmbeddingModel(Architecture arch, std::vector<double> parameters) : arch_(std::move(arch)) {
  layout();
  require(parameters.size() == params_.size(), ErrorCode::Format, "embedding model: parameter count mismatch");
  params_ = std::move(parameters);
}

void EmbeddingModel::quantize() {
  for (auto& p : params_) p = static_cast<double>(static_cast<float>(p));
}

std::span<const Vec3> EmbeddingModel::input_view(const PointCloud& cloud) const {
  std::span<const Vec3> all(cloud.points);
  if (arch_.input_points > 0 && static_cast<std::size_t>(arch_.input_points) < all.size())
    return all.first(static_cast<std::size_t>(arch_.input_points));
  return all;
}

Eigen::VectorXd EmbeddingModel::dense(const Dense& d, const Eigen::VectorXd& x) const {
  Eigen::Map<const RowMatrix> W(params_.data() + d.weight_offset, d.out, d.in);
  Eigen::Map<const Eigen::VectorXd> b(params_.data() + d.bias_offset, d.out);
  return W * x + b;
}

EgocentricCode EmbeddingModel::forward(std::span<const Vec3> points, bool with_field, Tape& tape) const {
  require(!points.empty(), ErrorCode::InvalidArgument, "encode: empty point cloud");
  const auto n = static_cast<Eigen::Index>(points.size());
  tape.with_field = with_field;
  tape.enc.resize(n_enc_ + 1);
  RowMatrix& x0 = tape.enc[0];
  x0.resize(3, n);
  for (Eigen::Index p = 0; p < n; ++p) x0.col(p) = points[static_cast<std::size_t>(p)];

  // Each output is accumulated in a fixed input-channel order independent
  // of the point's position, so features are bitwise permutation-invariant.
  for (std::size_t l = 0; l < n_enc_; ++l) {
    const Dense& d = layers_[l];
    const RowMatrix& x = tape.enc[l];
    RowMatrix& h = tape.enc[l + 1];
    h.resize(d.out, n);
    const double* W = params_.data() + d.weight_offset;
    const double* b = params_.data() + d.bias_offset;
    for (int o = 0; o < d.out; ++o) {
      auto row = h.row(o);
      row.setConstant(b[o]);
      for (int i = 0; i < d.in; ++i) row.noalias() += W[o * d.in + i] * x.row(i);
      row = row.cwiseMax(0.0);
    }
  }

  const RowMatrix& last = tape.enc[n_enc_];
  tape.feature.resize(last.rows());
  tape.argmax.assign(static_cast<std::size_t>(last.rows()), 0);
  for (Eigen::Index c = 0; c < last.rows(); ++c) {
    int best = 0;
    double v = last(c, 0);
    for (Eigen::Index p = 1; p < n; ++p) {
      if (last(c, p) > v) {
        v = last(c, p);
        best = static_cast<int>(p);
      }
    }
    tape.feature[c] = v;
    tape.argmax[static_cast<std::size_t>(c)] = best;
  }

  auto run_head = [&](std::size_t first, std::vector<Eigen::VectorXd>& act) {
    act.clear();
    act.push_back(tape.feature);
    for (std::size_t l = 0; l < n_head_; ++l) {
      Eigen::VectorXd y = dense(layers_[first + l], act.back());
      if (l + 1 < n_head_) y = y.cwiseMax(0.0);
      act.push_back(std::move(y));
    }
  };

  EgocentricCode code;
  run_head(n_enc_, tape.f_act);
  code.z = tape.f_act.back();
  if (with_field) {
    run_head(n_enc_ + n_head_, tape.g_act);
    const Eigen::VectorXd& pre = tape.g_act.back();
    tape.g_sigmoid = pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    code.g = tape.g_sigmoid.array() + kFieldEpsilon;
  }
  return code;
}

void EmbeddingModel::backward(const Tape& tape, const Eigen::VectorXd& dz, const Eigen::VectorXd* dg,
                              std::span<double> grad) const {
  require(grad.size() == params_.size(), ErrorCode::InvalidArgument, "backward: gradient size mismatch");
  Eigen::VectorXd dfeature = Eigen::VectorXd::Zero(tape.feature.size());

  auto head_back = [&](std::size_t first, const std::vector<Eigen::VectorXd>& act, Eigen::VectorXd dy) {
    for (std::size_t l = n_head_; l-- > 0;) {
      const Dense& d = layers_[first + l];
      Eigen::Map<const RowMatrix> W(params_.data() + d.weight_offset, d.out, d.in);
      Eigen::Map<RowMatrix> dW(grad.data() + d.weight_offset, d.out, d.in);
      Eigen::Map<Eigen::VectorXd> db(grad.data() + d.bias_offset, d.out);
      const Eigen::VectorXd& x = act[l];
      dW.noalias() += dy * x.transpose();
      db += dy;
      Eigen::VectorXd dx = W.transpose() * dy;
      if (l > 0) dx = (x.array() > 0.0).select(dx.array(), 0.0).matrix();  // x is a post-ReLU activation
      dy = std::move(dx);
    }
    dfeature += dy;
  };

  head_back(n_enc_, tape.f_act, dz);
  if (tape.with_field && dg != nullptr) {
    const Eigen::VectorXd& s = tape.g_sigmoid;
    head_back(n_enc_ + n_head_, tape.g_act, dg->cwiseProduct((s.array() * (1.0 - s.array())).matrix()));
  }

  // Last encoder layer: only the pooled column of each channel receives
  // gradient.
  const std::size_t L = n_enc_ - 1;
  const Dense& dl = layers_[L];
  const RowMatrix& x_prev = tape.enc[L];
  const RowMatrix& h_last = tape.enc[L + 1];
  RowMatrix dx(dl.in, x_prev.cols());
  dx.setZero();
  {
    Eigen::Map<const RowMatrix> W(params_.data() + dl.weight_offset, dl.out, dl.in);
    Eigen::Map<RowMatrix> dW(grad.data() + dl.weight_offset, dl.out, dl.in);
    Eigen::Map<Eigen::VectorXd> db(grad.data() + dl.bias_offset, dl.out);
    for (int o = 0; o < dl.out; ++o) {
      const int p = tape.argmax[static_cast<std::size_t>(o)];
      if (h_last(o, p) <= 0.0 || dfeature[o] == 0.0) continue;
      const double g = dfeature[o];
      dW.row(o) += g * x_prev.col(p).transpose();
      db[o] += g;
      if (L > 0) dx.col(p) += g * W.row(o).transpose();
    }
  }
  for (std::size_t l = L; l-- > 0;) {
    const Dense& d = layers_[l];
    const RowMatrix& h = tape.enc[l + 1];
    const RowMatrix dpre = (h.array() > 0.0).select(dx.array(), 0.0).matrix();
    Eigen::Map<const RowMatrix> W(params_.data() + d.weight_offset, d.out, d.in);
    Eigen::Map<RowMatrix> dW(grad.data() + d.weight_offset, d.out, d.in);
    Eigen::Map<Eigen::VectorXd> db(grad.data() + d.bias_offset, d.out);
    dW.noalias() += dpre * tape.enc[l].transpose();
    db += dpre.rowwise().sum();
    if (l > 0) dx.noalias() = W.transpose() * dpre;
  }
}

Eigen::VectorXd EmbeddingModel::encode(std::span<const Vec3> points) const {
  Tape tape;
  forward(points, false, tape);
  return tape.feature;
}

EgocentricCode EmbeddingModel::code(std::span<const Vec3> points, bool with_field) const {
  Tape tape;
  return forward(points, with_field, tape);
}

// ---- checkpoint -------------------------------------------------------------

std::string encode_checkpoint(const EmbeddingModel& model) {
  const Architecture& a = model.architecture();
  std::string out = "DEMB";
  le::put<std::uint16_t>(out, kCheckpointVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(a.k));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(a.encoder.size()));
  for (int w : a.encoder) le::put<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(a.head_hidden.size()));
  for (int w : a.head_hidden) le::put<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(a.input_points));
  for (double p : model.parameters()) le::put<float>(out, static_cast<float>(p));
  return out;
}

EmbeddingModel decode_checkpoint(const std::string& bytes) {
  le::Reader r(bytes, "checkpoint");
  require(r.remaining() >= 4 && r.bytes(4) == "DEMB", ErrorCode::Format, "checkpoint: bad magic (expected DEMB)");
  const auto version = r.get<std::uint16_t>();
  require(version == kCheckpointVersion, ErrorCode::Format,
          "checkpoint: unsupported version " + std::to_string(version));
  Architecture a;
  a.k = static_cast<int>(r.get<std::uint32_t>());
  auto widths = [&] {
    const auto n = r.get<std::uint32_t>();
    require(n <= 64, ErrorCode::Format, "checkpoint: implausible layer count");
    std::vector<int> w(n);
    for (auto& x : w) x = static_cast<int>(r.get<std::uint32_t>());
    return w;
  };
  a.encoder = widths();
  a.head_hidden = widths();
  a.input_points = static_cast<int>(r.get<std::uint32_t>());
  a.validate();
  EmbeddingModel shape(a, std::uint64_t{0});
  std::vector<double> params(shape.parameter_count());
  require(r.remaining() == params.size() * sizeof(float), ErrorCode::Format,
          "checkpoint: weight block size does not match the architecture");
  for (auto& p : params) p = r.get<float>();
  return EmbeddingModel(a, std::move(params));
}

std::string checkpoint_meta_json(const CheckpointMeta& meta) {
  nlohmann::ordered_json j;
  j["seed"] = meta.seed;
  j["epoch"] = meta.epoch;
  j["config_hash"] = meta.config_hash;
  j["store_hash"] = meta.store_hash;
  j["strategy"] = meta.strategy;
  j["prob_mode"] = meta.prob_mode;
  return j.dump(2) + "\n";
}

void save_checkpoint(const EmbeddingModel& model, const CheckpointMeta& meta, const std::string& path) {
  write_file(path, encode_checkpoint(model));
  write_file(path + ".json", checkpoint_meta_json(meta));
}

EmbeddingModel load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  EmbeddingModel model;
  try {
    model = decode_checkpoint(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
  if (meta != nullptr) {
    *meta = {};
    const std::string side = path + ".json";
    std::string text;
    try {
      text = read_file(side);
    } catch (const Error&) {
      return model;  // sidecar is optional
    }
    const auto j = nlohmann::json::parse(text, nullptr, false);
    require(!j.is_discarded(), ErrorCode::Format, side + ": invalid JSON");
    meta->seed = j.value("seed", std::uint64_t{0});
    meta->epoch = j.value("epoch", 0);
    meta->config_hash = j.value("config_hash", std::string());
    meta->store_hash = j.value("store_hash", std::string());
    meta->strategy = j.value("strategy", std::string());
    meta->prob_mode = j.value("prob_mode", std::string());
  }
  return model;
}

}  // namespace defret
