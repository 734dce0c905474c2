#pragma once

#include <string>
#include <vector>

#include "groupreg/core.hpp"
#include "groupreg/keypoints.hpp"
#include "groupreg/matching.hpp"
#include "groupreg/robust.hpp"
#include "groupreg/transforms.hpp"

namespace groupreg {

struct OptimizerConfig {
  std::vector<double> level_spacings{200.0, 100.0, 50.0};  // mm, coarse first
  int iterations_per_level = 200;
  double alpha = 0.02;  // fixed step, as a fraction of the stable step size
  int init_iterations = 50;     // linear initialization rounds
  double gamma = 0.5;           // damping of the linear updates
  int theta_refresh_period = 10;
  double diffeo_bound_factor = 0.4;  // of the grid spacing, per component
  bool record_theta_history = false;
};

struct TraceRow {
  int iteration = 0;  // global counter: init rounds first, then each level
  int level = 0;      // 0 during initialization, then 1-based level index
  double energy = 0.0;
  double sqrt_energy = 0.0;
  double mean_weighted_distance = 0.0;
};

struct ThetaRow {
  int iteration = 0;
  int image = 0;
  double s1 = 0.0, s2 = 0.0, r = 0.0;
};

// Shared state of a group registration. Kept open so the initialization and
// per-level descent can be driven and inspected independently.
struct BundleState {
  MatchGraph graph;
  std::vector<Vec3> raw_points;   // keypoint positions, flattened per image
  std::vector<int> point_image;   // image id of each global point

  std::vector<HalfTransform> transforms;
  std::vector<MixtureParams> mixtures;

  // Common-space positions before the active grids (linear + frozen grids),
  // the cached current positions, and the basis rows of the active grids.
  std::vector<Vec3> base_positions;
  std::vector<Vec3> positions;
  std::vector<SplineBasis> basis;
  std::vector<double> s_squared;  // per match: weight * (1/|N(a)| + 1/|N(b)|)

  std::vector<TraceRow> trace;
  std::vector<ThetaRow> theta_history;
  int global_iteration = 0;
  double max_constraint_residual = 0.0;  // max |sum_i x^i| seen, any component
  std::vector<int> grids_per_level;      // composition count at each level

  int image_count() const { return graph.image_count(); }
};

// Builds the state from per-image keypoint lists and their match graph.
// Transforms start as identity; weights start at 1.
BundleState make_bundle(const std::vector<std::vector<Keypoint>>& sets,
                        MatchGraph graph);

// Recomputes positions from the current transforms, then refits mixtures and
// match weights. For use between phases; refuses to run while a level is in
// progress (descend_level refreshes on its own schedule).
void refresh_weights(BundleState& state);

// Group-wise anisotropic scale+translation initialization: per round, each
// image is scaled about the weighted mean of its matched points toward the
// statistics of its partners (damped by gamma), with weights refreshed every
// theta_refresh_period rounds.
void init_linear(BundleState& state, const OptimizerConfig& cfg);

// Weighted registration energy sum_m s_m^2 ||q_a - q_b||^2 over matches, with
// s_m^2 = w_m (1/|N(a)| + 1/|N(b)|), evaluated at the cached positions.
double energy(const BundleState& state);

// Analytic gradient of the energy with respect to the active grid
// coefficients of every image; grads[i] has 3 * control_count entries laid
// out like SplineGrid::coeffs.
void compute_gradient(const BundleState& state,
                      std::vector<std::vector<double>>& grads);

// One multi-resolution level: pushes fresh zero grids at `spacing` covering
// the current common-space bounding box (padded two cells), then runs fixed
// step gradient descent with periodic weight refreshes, the zero-mean
// constraint projection after every step, and the freeze-and-compose
// diffeomorphism guard. The step applies alpha through a per-control scale
// (the largest Hessian row sum over images) so that any alpha < 2 descends
// monotonically while the weights are frozen.
void descend_level(BundleState& state, double spacing,
                   const OptimizerConfig& cfg, int level_index);

struct RegistrationResult {
  std::vector<HalfTransform> transforms;
  std::vector<TraceRow> trace;
  std::vector<ThetaRow> theta_history;
  std::vector<int> grids_per_level;
  double max_constraint_residual = 0.0;
  std::vector<MixtureParams> mixtures;
};

// Full pipeline: linear initialization followed by every configured level.
// A single image yields its identity transform; with two or more images an
// empty match graph is refused (std::invalid_argument).
RegistrationResult register_group(const std::vector<std::vector<Keypoint>>& sets,
                                  MatchGraph graph,
                                  const OptimizerConfig& cfg);

void save_trace(const std::string& path, const std::vector<TraceRow>& rows);
void save_theta_history(const std::string& path,
                        const std::vector<ThetaRow>& rows);

}  // namespace groupreg
