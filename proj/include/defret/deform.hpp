#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "defret/distance_field.hpp"
#include "defret/geometry.hpp"

namespace defret {

// Fit-to-target-UDF plus edge-rigidity energy over vertex positions:
//   E(V') = sum_i f_t(v'_i) + lambda * sum_(i,j) |(v'_i - v'_j) - (v_i - v_j)|^2
struct DeformationProblem {
  const TriangleMesh& source;
  const UnsignedDistanceGrid& target_udf;
  double lambda = 1.0;
};

struct SolverOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;  // on the max-norm of the energy gradient
  // Backtracking (Armijo) line search.
  double initial_step = 1e-2;
  double max_step = 1.0;
  double step_growth = 2.0;
  double backtrack = 0.5;
  double armijo_c = 1e-4;
  double min_step = 1e-12;
  // Abort once vertices have sat outside the UDF grid for this many
  // consecutive accepted steps.
  int max_escape_iterations = 50;
  // Use f_t^2 instead of f_t in the fit term.
  bool squared_fit = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EnergyTerms {
  double fit = 0.0;
  double rigidity = 0.0;
  double total() const { return fit + rigidity; }
};

enum class Termination { GradientTolerance, MaxIterations, LineSearchStalled };

struct DeformationResult {
  std::vector<Vec3> vertices;
  double fit_term = 0.0;
  double rigidity_term = 0.0;
  int iterations = 0;
  bool converged = false;
  Termination termination = Termination::MaxIterations;
  // Total energy at initialization followed by every accepted step.
  std::vector<double> energy_history;
};

EnergyTerms energy(const DeformationProblem& problem, std::span<const Vec3> vertices, bool squared_fit = false);

// Energy and its gradient (fit term through UDF finite differences,
// rigidity term analytic).
EnergyTerms energy_gradient(const DeformationProblem& problem, std::span<const Vec3> vertices, bool squared_fit,
                            std::vector<Vec3>& gradient);

// Gradient descent with Armijo backtracking from the source positions.
DeformationResult deform(const DeformationProblem& problem, const SolverOptions& opts = {});

// Deformed mesh as OBJ and {fit_term, rigidity_term, iterations, converged}
// as a JSON sidecar.
void export_deformation(const TriangleMesh& source, const DeformationResult& result, const std::string& obj_path,
                        const std::string& json_path);
std::string deformation_json(const DeformationResult& result);

const char* to_string(Termination t);

}  // namespace defret
