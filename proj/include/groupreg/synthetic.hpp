#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "groupreg/core.hpp"
#include "groupreg/evaluation.hpp"
#include "groupreg/keypoints.hpp"
#include "groupreg/matching.hpp"
#include "groupreg/transforms.hpp"

namespace groupreg {

struct SyntheticSpec {
  std::uint64_t seed = 1;
  int n_images = 5;
  int n_points = 2000;
  double noise_sigma = 1.0;           // mm, keypoint position jitter
  double outlier_rate = 0.0;          // fraction of planted matches
  double warp_spacing = 100.0;        // mm, ground-truth warp grid
  double warp_max_displacement = 35.0;  // mm, must stay below 0.4 * spacing
  Vec3 domain_lo{0.0, 0.0, 0.0};
  Vec3 domain_hi{400.0, 400.0, 400.0};
  int n_landmarks = 20;
  double descriptor_noise = 0.05;     // per-component sigma before renorm
};

struct SyntheticDataset {
  std::vector<std::vector<Keypoint>> keypoints;
  MatchGraph graph;                    // planted matches, weights = 1
  std::vector<std::uint8_t> outlier_flags;  // 1 per planted-outlier match
  std::vector<HalfTransform> true_warps;    // template space -> image space
  LandmarkTable landmarks;             // noiseless warped template points
  std::vector<Vec3> template_points;
};

// Deterministic synthetic group: template points drawn in the domain box,
// per-image diffeomorphic B-spline warps, Gaussian position noise, planted
// inlier matches for every pair and template point, and uniformly random
// wrong pairs appended until the requested outlier rate. Descriptors are
// correlated for corresponding points (shared random unit vector plus noise)
// so the matching module reproduces the inlier graph.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// Writes keypoint files (kp_XXX.kp), matches.txt, outlier_flags.txt,
// landmarks.csv and true_warp_XXX.json into the directory.
void save_synthetic(const std::string& directory, const SyntheticDataset& data);

}  // namespace groupreg
