#pragma once

// Central finite-difference checks of network gradients. A probe is
// skipped when the +h and -h evaluations sit on different sides of a kink:
// a ReLU changes sign, the max-pool winner moves, or a loss argument lies
// within `kink_margin` of its hinge / absolute-value break point.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "defret/embed.hpp"
#include "defret/train.hpp"
#include "helpers.hpp"

namespace defret::test {

// Near the optimal central-difference step cbrt(eps) = 6e-6: smaller steps
// let rounding dominate where a parameter's true gradient is exactly zero
// (the code-head bias cancels in z_t - z_s).
inline constexpr double kFdStep = 1e-5;
inline constexpr double kKinkMargin = 1e-3;
// Gradients below this magnitude are compared absolutely, since the central
// difference carries about 1e-10 of rounding noise.
inline constexpr double kRelativeFloor = 1e-6;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kRelativeFloor});
}

// ReLU sign patterns and max-pool winners of one forward pass.
inline std::vector<char> activation_pattern(const EmbeddingModel& model, std::span<const Vec3> pts) {
  EmbeddingModel::Tape tape;
  model.forward(pts, true, tape);
  std::vector<char> out;
  for (std::size_t l = 1; l < tape.enc.size(); ++l)
    for (Eigen::Index i = 0; i < tape.enc[l].size(); ++i) out.push_back(tape.enc[l].data()[i] > 0.0);
  for (int a : tape.argmax) {
    out.push_back(static_cast<char>(a & 0xff));
    out.push_back(static_cast<char>((a >> 8) & 0xff));
  }
  for (std::size_t l = 1; l < tape.f_act.size(); ++l)
    for (Eigen::Index i = 0; i < tape.f_act[l].size(); ++i) out.push_back(tape.f_act[l][i] > 0.0);
  for (std::size_t l = 1; l < tape.g_act.size(); ++l)
    for (Eigen::Index i = 0; i < tape.g_act[l].size(); ++i) out.push_back(tape.g_act[l][i] > 0.0);
  return out;
}

struct FdProbe {
  double analytic = 0.0;
  double numeric = 0.0;
  bool skipped = false;
};

// Compares grad[index] with the central difference of `loss` in parameter
// `index`. `clouds` are the inputs whose activations must not cross a kink;
// `loss_kink` reports loss-level kinks at the current parameters.
inline FdProbe probe_parameter(EmbeddingModel& model, std::size_t index, double analytic,
                               const std::function<double(const EmbeddingModel&)>& loss,
                               const std::vector<std::span<const Vec3>>& clouds,
                               const std::function<bool(const EmbeddingModel&)>& loss_kink) {
  FdProbe p;
  p.analytic = analytic;
  double& w = model.parameters()[index];
  const double w0 = w;
  w = w0 + kFdStep;
  std::vector<std::vector<char>> plus;
  for (const auto& c : clouds) plus.push_back(activation_pattern(model, c));
  const double lp = loss(model);
  const bool kink_p = loss_kink(model);
  w = w0 - kFdStep;
  bool crossed = kink_p || loss_kink(model);
  for (std::size_t i = 0; i < clouds.size() && !crossed; ++i) crossed = activation_pattern(model, clouds[i]) != plus[i];
  const double lm = loss(model);
  w = w0;
  p.numeric = (lp - lm) / (2.0 * kFdStep);
  p.skipped = crossed || loss_kink(model);
  return p;
}

inline Architecture small_architecture() {
  Architecture a;
  a.encoder = {8, 16};
  a.head_hidden = {12};
  a.k = 5;
  a.input_points = 0;
  return a;
}

// Points of a few random clusters, so max pooling has clear winners.
inline std::vector<Vec3> random_shape_points(Rng& rng, std::size_t n) {
  std::vector<Vec3> pts;
  const Vec3 c(uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2));
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back(c + Vec3(uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3)));
  return pts;
}

// delta(t; s) through the network and its parameter gradient.
inline double delta_with_grad(const EmbeddingModel& model, std::span<const Vec3> t_pts, std::span<const Vec3> s_pts,
                              std::vector<double>* grad) {
  EmbeddingModel::Tape tt, ts;
  const EgocentricCode t = model.forward(t_pts, false, tt);
  const EgocentricCode s = model.forward(s_pts, true, ts);
  const double d = ego_distance(t, s);
  if (grad != nullptr) {
    grad->assign(model.parameter_count(), 0.0);
    const Eigen::VectorXd diff = t.z - s.z;
    const Eigen::VectorXd dz_t = s.g->cwiseProduct(diff) / d;
    const Eigen::VectorXd dz_s = -dz_t;
    const Eigen::VectorXd dg = diff.cwiseProduct(diff) / (2.0 * d);
    model.backward(tt, dz_t, nullptr, *grad);
    model.backward(ts, dz_s, &dg, *grad);
  }
  return d;
}

}  // namespace defret::test
