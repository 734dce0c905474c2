#pragma once

#include <span>
#include <vector>

#include "groupreg/core.hpp"
#include "groupreg/matching.hpp"

namespace groupreg {

// Two-component Maxwell mixture over match distances for one image:
// P(d) = r f(d, s1) + (1 - r) f(d, s2), with s1 <= s2 so the first component
// is the inlier mode. `degenerate` marks a single-mode collapse (r forced to
// 1); `absent` marks an image without matches.
struct MixtureParams {
  double s1 = 1.0;
  double s2 = 1.0;
  double r = 0.5;
  bool degenerate = false;
  bool absent = false;
};

// Maxwell density f(d, s) = sqrt(2/pi) d^2 / s^3 exp(-d^2 / (2 s^2)).
// s is clamped to >= 1e-6 mm.
double maxwell_pdf(double d, double s);

struct EmOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;  // relative log-likelihood change
};

// Expectation-maximization fit of the two-Maxwell mixture. The M-step uses
// the closed form s^2 = sum(g d^2) / (3 sum(g)) from E[d^2] = 3 s^2. Labels
// are kept identifiable by swapping so s1 <= s2 after every step. `warm`
// seeds the fit (percentile-based initialization otherwise). If the two
// components collapse onto a single mode the fit degenerates to r = 1 with
// s1 = s2. An optional trace receives the per-iteration log-likelihood.
MixtureParams em_fit(std::span<const double> distances,
                     const MixtureParams* warm = nullptr,
                     std::vector<double>* loglik_trace = nullptr,
                     const EmOptions& options = {});

// Posterior probability that a distance is an inlier under the mixture,
// r f(d,s1) / (r f(d,s1) + (1-r) f(d,s2)); continuous limit r/s1^3 over
// (r/s1^3 + (1-r)/s2^3) at d = 0.
double inlier_posterior(double d, const MixtureParams& theta);

// Weight of a match between images i and j: the smaller of the two inlier
// posteriors, so either side can veto.
double match_weight(double d, const MixtureParams& theta_i,
                    const MixtureParams& theta_j);

// Refits the per-image mixtures from the current common-space positions and
// rewrites every match weight. `warm` (when non-null) seeds the fits; the
// refreshed parameters are returned. Images without matches come back with
// `absent` set.
std::vector<MixtureParams> update_all_weights(
    MatchGraph& g, std::span<const Vec3> positions,
    const std::vector<MixtureParams>* warm = nullptr);

}  // namespace groupreg
