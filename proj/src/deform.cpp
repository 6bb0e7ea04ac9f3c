#include "defret/deform.hpp"

#include <cmath>

#include <json.hpp>

#include "defret/common.hpp"

namespace defret {

void SolverOptions::validate() const {
  require(max_iterations >= 0, ErrorCode::Config, "solver: max_iterations must be >= 0");
  require(gradient_tolerance > 0 && initial_step > 0 && max_step > 0 && min_step > 0 && armijo_c > 0,
          ErrorCode::Config, "solver: tolerances and step parameters must be positive");
  require(backtrack > 0 && backtrack < 1, ErrorCode::Config, "solver: backtrack factor must lie in (0, 1)");
  require(step_growth >= 1, ErrorCode::Config, "solver: step_growth must be >= 1");
}

namespace {

void check_size(const DeformationProblem& problem, std::span<const Vec3> vertices) {
  require(vertices.size() == problem.source.vertices().size(), ErrorCode::InvalidArgument,
          "deform: vertex count does not match the source mesh");
}

double rigidity(const DeformationProblem& problem, std::span<const Vec3> v) {
  const auto& v0 = problem.source.vertices();
  double sum = 0.0;
  for (const auto& [i, j] : problem.source.edges()) sum += ((v[i] - v[j]) - (v0[i] - v0[j])).squaredNorm();
  return problem.lambda * sum;
}

void rigidity_gradient(const DeformationProblem& problem, std::span<const Vec3> v, std::vector<Vec3>& grad) {
  const auto& v0 = problem.source.vertices();
  grad.assign(v.size(), Vec3::Zero());
  for (const auto& [i, j] : problem.source.edges()) {
    const Vec3 r = (v[i] - v[j]) - (v0[i] - v0[j]);
    grad[i] += 2.0 * problem.lambda * r;
    grad[j] -= 2.0 * problem.lambda * r;
  }
}

bool outside_grid(const Aabb& box, std::span<const Vec3> v) {
  for (const auto& p : v) {
    if ((p.array() < box.lo.array()).any() || (p.array() > box.hi.array()).any()) return true;
  }
  return false;
}

// Descent direction for when the central-difference gradient fails the
// line search, which happens where the field has a kink (on the target
// surface, at its boundary). Per coordinate, one-sided differences of the
// fit term are combined with the exact rigidity gradient and the component
// is kept only when moving that way actually descends.
void one_sided_direction(const DeformationProblem& problem, std::span<const Vec3> v, bool squared_fit,
                         std::span<const Vec3> rigidity_grad, std::vector<Vec3>& dir) {
  const auto& udf = problem.target_udf;
  const double h = 0.5 * udf.cell_size();
  const auto fit = [&](const Vec3& p) {
    const double f = udf.query(p);
    return squared_fit ? f * f : f;
  };
  dir.assign(v.size(), Vec3::Zero());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f0 = fit(v[i]);
    for (int a = 0; a < 3; ++a) {
      const Vec3 e = Vec3::Unit(a) * h;
      const double up = rigidity_grad[i][a] + (fit(v[i] + e) - f0) / h;
      const double down = rigidity_grad[i][a] + (f0 - fit(v[i] - e)) / h;
      if (up < 0.0) dir[i][a] = up;
      else if (down > 0.0) dir[i][a] = down;
    }
  }
}

}  // namespace

EnergyTerms energy(const DeformationProblem& problem, std::span<const Vec3> vertices, bool squared_fit) {
  check_size(problem, vertices);
  EnergyTerms e;
  for (const auto& p : vertices) {
    const double f = problem.target_udf.query(p);
    e.fit += squared_fit ? f * f : f;
  }
  e.rigidity = rigidity(problem, vertices);
  return e;
}

EnergyTerms energy_gradient(const DeformationProblem& problem, std::span<const Vec3> vertices, bool squared_fit,
                            std::vector<Vec3>& gradient) {
  check_size(problem, vertices);
  gradient.assign(vertices.size(), Vec3::Zero());
  EnergyTerms e;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const double f = problem.target_udf.query(vertices[i]);
    const Vec3 df = problem.target_udf.gradient(vertices[i]);
    e.fit += squared_fit ? f * f : f;
    gradient[i] = squared_fit ? Vec3(2.0 * f * df) : df;
  }
  const auto& v0 = problem.source.vertices();
  double sum = 0.0;
  for (const auto& [i, j] : problem.source.edges()) {
    const Vec3 r = (vertices[i] - vertices[j]) - (v0[i] - v0[j]);
    sum += r.squaredNorm();
    gradient[i] += 2.0 * problem.lambda * r;
    gradient[j] -= 2.0 * problem.lambda * r;
  }
  e.rigidity = problem.lambda * sum;
  return e;
}

DeformationResult deform(const DeformationProblem& problem, const SolverOptions& opts) {
  opts.validate();
  require(problem.lambda >= 0.0, ErrorCode::InvalidArgument, "deform: lambda must be non-negative");
  const Aabb grid_box = problem.target_udf.box();

  DeformationResult res;
  res.vertices = problem.source.vertices();
  std::vector<Vec3> grad, trial(res.vertices.size()), rig, fallback;
  EnergyTerms cur = energy_gradient(problem, res.vertices, opts.squared_fit, grad);
  require(std::isfinite(cur.total()), ErrorCode::Numeric, "deform: non-finite energy at initialization");
  res.energy_history.push_back(cur.total());

  double step = opts.initial_step;
  int escape_streak = 0;
  res.termination = Termination::MaxIterations;
  while (true) {
    double gmax = 0.0, gsq = 0.0;
    for (const auto& g : grad) {
      gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
      gsq += g.squaredNorm();
    }
    if (gmax < opts.gradient_tolerance) {
      res.termination = Termination::GradientTolerance;
      break;
    }
    if (res.iterations >= opts.max_iterations) break;

    // Armijo backtracking along -dir; dsq is the predicted decrease rate.
    const auto line_search = [&](const std::vector<Vec3>& dir, double dsq, EnergyTerms& next, double& alpha) {
      alpha = step;
      while (alpha >= opts.min_step) {
        for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = res.vertices[i] - alpha * dir[i];
        next = energy(problem, trial, opts.squared_fit);
        require(!std::isnan(next.total()), ErrorCode::Numeric, "deform: NaN energy during line search");
        if (next.total() <= cur.total() - opts.armijo_c * alpha * dsq) return true;
        alpha *= opts.backtrack;
      }
      return false;
    };
    EnergyTerms next;
    double alpha = 0.0;
    bool accepted = line_search(grad, gsq, next, alpha);
    if (!accepted) {
      rigidity_gradient(problem, res.vertices, rig);
      one_sided_direction(problem, res.vertices, opts.squared_fit, rig, fallback);
      double fsq = 0.0;
      for (const auto& d : fallback) fsq += d.squaredNorm();
      accepted = fsq > 0.0 && line_search(fallback, fsq, next, alpha);
    }
    if (!accepted) {
      res.termination = Termination::LineSearchStalled;
      break;
    }
    res.vertices.swap(trial);
    cur = energy_gradient(problem, res.vertices, opts.squared_fit, grad);
    res.energy_history.push_back(cur.total());
    ++res.iterations;
    step = std::min(alpha * opts.step_growth, opts.max_step);

    escape_streak = outside_grid(grid_box, res.vertices) ? escape_streak + 1 : 0;
    require(escape_streak <= opts.max_escape_iterations, ErrorCode::Numeric,
            "deform: vertices stayed outside the distance grid for " + std::to_string(escape_streak) +
                " consecutive steps");
  }
  res.fit_term = cur.fit;
  res.rigidity_term = cur.rigidity;
  res.converged = res.termination == Termination::GradientTolerance;
  return res;
}

const char* to_string(Termination t) {
  switch (t) {
    case Termination::GradientTolerance: return "gradient_tolerance";
    case Termination::MaxIterations: return "max_iterations";
    case Termination::LineSearchStalled: return "line_search_stalled";
  }
  return "unknown";
}

std::string deformation_json(const DeformationResult& result) {
  nlohmann::ordered_json j;
  j["fit_term"] = result.fit_term;
  j["rigidity_term"] = result.rigidity_term;
  j["iterations"] = result.iterations;
  j["converged"] = result.converged;
  j["termination"] = to_string(result.termination);
  return j.dump(2) + "\n";
}

void export_deformation(const TriangleMesh& source, const DeformationResult& result, const std::string& obj_path,
                        const std::string& json_path) {
  save_obj(source.with_vertices(result.vertices), obj_path);
  write_file(json_path, deformation_json(result));
}

}  // namespace defret
