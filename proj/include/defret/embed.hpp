#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "defret/geometry.hpp"

namespace defret {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kFieldEpsilon = 1e-6;

// Layer widths of the embedding network: a shared per-point encoder with
// channel-wise max pooling, then two dense heads (embedding F, field G).
struct Architecture {
  std::vector<int> encoder{64, 128, 256};
  std::vector<int> head_hidden{256};
  int k = 256;
  // Points fed to the encoder: a prefix of the (randomly sampled) cloud.
  // 0 uses every point.
  int input_points = 1024;

  void validate() const;
  bool operator==(const Architecture&) const = default;
};

// Latent position z = F(s) and, for observers, the positive diagonal g = G(s).
struct EgocentricCode {
  Eigen::VectorXd z;
  std::optional<Eigen::VectorXd> g;
};

// Squared egocentric distance sum_i g_i (z_t,i - z_s,i)^2 with the observer's field.
double ego_distance_squared(const EgocentricCode& target, const EgocentricCode& observer);
double ego_distance(const EgocentricCode& target, const EgocentricCode& observer);

class EmbeddingModel {
 public:
  struct Dense {
    std::size_t weight_offset;  // out x in, row-major
    std::size_t bias_offset;
    int in, out;
  };

  // Activations kept for backpropagation through one shape.
  struct Tape {
    std::vector<RowMatrix> enc;             // enc[0] = input (3 x n); enc[l] = post-ReLU
    std::vector<int> argmax;                // per feature channel
    Eigen::VectorXd feature;
    std::vector<Eigen::VectorXd> f_act;     // head F post-ReLU activations (input first)
    std::vector<Eigen::VectorXd> g_act;
    Eigen::VectorXd g_sigmoid;
    bool with_field = false;
  };

  EmbeddingModel() = default;
  // Uniform fan-in initialization; weights are held at f32 precision so a
  // checkpoint round trip is exact.
  EmbeddingModel(Architecture arch, std::uint64_t seed);
  EmbeddingModel(Architecture arch, std::vector<double> parameters);

  const Architecture& architecture() const { return arch_; }
  int k() const { return arch_.k; }
  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }
  const std::vector<Dense>& layers() const { return layers_; }

  // Rounds every parameter to the nearest float.
  void quantize();

  // Points the encoder sees for a stored cloud (input_points prefix).
  std::span<const Vec3> input_view(const PointCloud& cloud) const;

  // Max-pooled per-point features.
  Eigen::VectorXd encode(std::span<const Vec3> points) const;
  Eigen::VectorXd encode(const PointCloud& cloud) const { return encode(input_view(cloud)); }

  EgocentricCode code(std::span<const Vec3> points, bool with_field) const;
  EgocentricCode code(const PointCloud& cloud, bool with_field) const { return code(input_view(cloud), with_field); }

  EgocentricCode forward(std::span<const Vec3> points, bool with_field, Tape& tape) const;
  // Accumulates d(loss)/d(parameters) into `grad` given d(loss)/dz and,
  // when the tape has a field, d(loss)/dg.
  void backward(const Tape& tape, const Eigen::VectorXd& dz, const Eigen::VectorXd* dg, std::span<double> grad) const;

 private:
  void layout();
  Eigen::VectorXd dense(const Dense& d, const Eigen::VectorXd& x) const;

  Architecture arch_;
  std::vector<double> params_;
  std::vector<Dense> layers_;  // encoder, head F, head G
  std::size_t n_enc_ = 0, n_head_ = 0;
};

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string config_hash;
  std::string store_hash;
  std::string strategy;
  std::string prob_mode;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

// "DEMB", u16 version, u32 k, architecture descriptor, f32 weights in
// declaration order (per layer: weights row-major, then bias).
std::string encode_checkpoint(const EmbeddingModel& model);
EmbeddingModel decode_checkpoint(const std::string& bytes);
void save_checkpoint(const EmbeddingModel& model, const CheckpointMeta& meta, const std::string& path);
EmbeddingModel load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);
std::string checkpoint_meta_json(const CheckpointMeta& meta);

}  // namespace defret
