#include "groupreg/robust.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "groupreg/parallel.hpp"

namespace groupreg {

namespace {

constexpr double kMinScale = 1e-6;  // mm
constexpr double kMinDistance = 1e-9;
// Components closer than this ratio are indistinguishable: the fit collapsed
// onto a single mode and the mixture degenerates to r = 1.
constexpr double kCollapseRatio = 1.05;

double percentile(std::vector<double> sorted_copy, double q) {
  std::size_t n = sorted_copy.size();
  std::size_t idx = static_cast<std::size_t>(q * static_cast<double>(n - 1));
  idx = std::min(idx, n - 1);
  std::nth_element(sorted_copy.begin(), sorted_copy.begin() + idx,
                   sorted_copy.end());
  return sorted_copy[idx];
}

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double logistic(double x) {
  if (x > 40.0) return 0.0;  // 1 / (1 + exp(x)) for large x
  if (x < -40.0) return 1.0;
  return 1.0 / (1.0 + std::exp(x));
}

MixtureParams pooled_single_mode(double sum_d2, std::size_t n) {
  MixtureParams p;
  p.s1 = p.s2 = std::max(std::sqrt(sum_d2 / (3.0 * static_cast<double>(n))),
                         kMinScale);
  p.r = 1.0;
  p.degenerate = true;
  return p;
}

}  // namespace

double maxwell_pdf(double d, double s) {
  s = std::max(s, kMinScale);
  if (d < 0.0) return 0.0;
  static const double kSqrt2OverPi = std::sqrt(2.0 / M_PI);
  double z = d / s;
  return kSqrt2OverPi * z * z / s * std::exp(-0.5 * z * z);
}

MixtureParams em_fit(std::span<const double> distances,
                     const MixtureParams* warm,
                     std::vector<double>* loglik_trace,
                     const EmOptions& options) {
  if (distances.empty())
    throw std::invalid_argument("em_fit: no distances to fit");

  const std::size_t n = distances.size();
  std::vector<double> d2(n), ld2(n);
  double sum_d2 = 0.0;
  double dmin = distances[0], dmax = distances[0];
  for (std::size_t i = 0; i < n; ++i) {
    double d = std::max(distances[i], kMinDistance);
    dmin = std::min(dmin, distances[i]);
    dmax = std::max(dmax, distances[i]);
    d2[i] = d * d;
    ld2[i] = std::log(d2[i]);
    sum_d2 += d2[i];
  }
  // All-identical distances carry a single mode by construction:
  // E[d^2] = 3 s^2 gives s = d / sqrt(3).
  if (dmax - dmin <= 1e-12 * std::max(1.0, dmax))
    return pooled_single_mode(sum_d2, n);

  double s1, s2, r;
  if (warm && !warm->absent && !warm->degenerate && warm->s1 > 0.0 &&
      warm->s2 > warm->s1 && warm->r > 0.0 && warm->r < 1.0 &&
      std::isfinite(warm->s1) && std::isfinite(warm->s2)) {
    s1 = warm->s1;
    s2 = warm->s2;
    r = warm->r;
  } else {
    // Percentile-based start: the Maxwell mode sits at sqrt(2) s, so spread
    // quantiles of the data give usable scale guesses for both components.
    std::vector<double> copy(distances.begin(), distances.end());
    s1 = std::max(percentile(copy, 0.25) / std::sqrt(2.0), kMinScale);
    s2 = std::max(percentile(copy, 0.90) / std::sqrt(2.0), kMinScale);
    if (s2 <= s1 * 1.1) s2 = s1 * 4.0;
    r = 0.5;
  }

  static const double kLogSqrt2OverPi = 0.5 * std::log(2.0 / M_PI);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < options.max_iterations; ++it) {
    // E-step. delta = log((1-r) f2) - log(r f1); the d^2 and sqrt(2/pi)
    // factors cancel inside the ratio.
    double base = std::log1p(-r) - std::log(r) + 3.0 * std::log(s1 / s2);
    double slope = 0.5 * (1.0 / (s1 * s1) - 1.0 / (s2 * s2));
    double log_r_term = std::log(r) - 3.0 * std::log(s1);
    double inv_2s1sq = 0.5 / (s1 * s1);
    double n1 = 0.0, sum1 = 0.0, sum_all = sum_d2, ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double delta = base + slope * d2[i];
      double g = logistic(delta);
      n1 += g;
      sum1 += g * d2[i];
      ll += kLogSqrt2OverPi + ld2[i] + log_r_term - inv_2s1sq * d2[i] +
            softplus(delta);
    }
    if (loglik_trace) loglik_trace->push_back(ll);

    // M-step with the closed-form Maxwell scale update.
    double n2 = static_cast<double>(n) - n1;
    double sum2 = sum_all - sum1;
    if (n1 <= 1e-9 * n || n2 <= 1e-9 * n)
      return pooled_single_mode(sum_d2, n);
    r = n1 / static_cast<double>(n);
    s1 = std::max(std::sqrt(sum1 / (3.0 * n1)), kMinScale);
    s2 = std::max(std::sqrt(sum2 / (3.0 * n2)), kMinScale);
    if (s1 > s2) {
      std::swap(s1, s2);
      r = 1.0 - r;
    }

    if (std::abs(ll - prev_ll) <= options.tolerance * std::max(1.0, std::abs(ll)))
      break;
    prev_ll = ll;
  }

  if (s2 <= kCollapseRatio * s1 || r >= 1.0 - 1e-9 || r <= 1e-9)
    return pooled_single_mode(sum_d2, n);
  MixtureParams p;
  p.s1 = s1;
  p.s2 = s2;
  p.r = r;
  return p;
}

double inlier_posterior(double d, const MixtureParams& theta) {
  if (theta.absent) return 1.0;
  double s1 = std::max(theta.s1, kMinScale);
  double s2 = std::max(theta.s2, kMinScale);
  double r = std::clamp(theta.r, 0.0, 1.0);
  if (r <= 0.0) return 0.0;
  if (r >= 1.0) return 1.0;
  // log((1-r) f(d,s2)) - log(r f(d,s1)); shared factors cancel, so the d = 0
  // limit r/s1^3 / (r/s1^3 + (1-r)/s2^3) falls out of the same expression.
  double delta = std::log1p(-r) - std::log(r) + 3.0 * std::log(s1 / s2) +
                 0.5 * d * d * (1.0 / (s1 * s1) - 1.0 / (s2 * s2));
  return logistic(delta);
}

double match_weight(double d, const MixtureParams& theta_i,
                    const MixtureParams& theta_j) {
  return std::min(inlier_posterior(d, theta_i), inlier_posterior(d, theta_j));
}

std::vector<MixtureParams> update_all_weights(
    MatchGraph& g, std::span<const Vec3> positions,
    const std::vector<MixtureParams>* warm) {
  const int n_images = g.image_count();
  std::vector<MixtureParams> thetas(n_images);
  std::vector<double> distances(g.matches.size());
  parallel::for_each_index(g.matches.size(), [&](std::size_t m) {
    const Match& match = g.matches[m];
    std::size_t a = g.global_index(match.image_a, match.index_a);
    std::size_t b = g.global_index(match.image_b, match.index_b);
    distances[m] = (positions[a] - positions[b]).norm();
  });
  parallel::for_each_index(static_cast<std::size_t>(n_images),
                           [&](std::size_t i) {
    const auto& incident = g.image_matches[i];
    if (incident.empty()) {
      thetas[i].absent = true;
      return;
    }
    std::vector<double> d;
    d.reserve(incident.size());
    for (std::uint32_t m : incident) d.push_back(distances[m]);
    const MixtureParams* seed =
        (warm && i < warm->size()) ? &(*warm)[i] : nullptr;
    thetas[i] = em_fit(d, seed);
  });
  parallel::for_each_index(g.matches.size(), [&](std::size_t m) {
    Match& match = g.matches[m];
    match.weight = match_weight(distances[m], thetas[match.image_a],
                                thetas[match.image_b]);
  });
  return thetas;
}

}  // namespace groupreg
