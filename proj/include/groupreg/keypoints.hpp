#pragma once

#include <string>
#include <vector>

#include "groupreg/core.hpp"
#include "groupreg/volume.hpp"

namespace groupreg {

struct Keypoint {
  Vec3 position;            // mm
  double scale = 1.0;       // mm
  double response = 0.0;    // scale-normalized |det Hessian|
  int laplacian_sign = 1;   // sign of the box-filter trace: -1 bright, +1 dark
  int image_id = -1;        // assigned when sets are loaded into a group
  std::vector<float> descriptor;
};

struct DetectorParams {
  int octaves = 3;
  int scales_per_octave = 4;
  double response_threshold = 0.0;  // keep candidates with response > threshold
  int max_keypoints = 20000;
  int descriptor_length = 48;
};

// Box-filter size for octave o (1-based) and scale s (0-based). Follows the
// classic progression 9,15,21,27 / 15,27,39,51 / 27,51,75,99 ...
int hessian_filter_size(int octave, int scale);

// Detects blob-like keypoints as 3x3x3x3 local maxima of the scale-normalized
// |det Hessian| computed with box filters over an integral volume, with
// quadratic sub-sample refinement clamped to +-0.5. Positions and scales are
// in mm. Descriptors are not filled; call describe() next.
std::vector<Keypoint> detect(const Volume& v, const DetectorParams& params);

// Fills in the upright 48-dimensional descriptor: a scale-proportional cube
// split into 2x2x2 subregions, each contributing (sum dx, sum dy, sum dz,
// sum |dx|, sum |dy|, sum |dz|) of Haar-like box responses; the final vector
// is normalized to unit length. Keypoints whose support leaves the volume are
// dropped; order is otherwise preserved.
std::vector<Keypoint> describe(const IntegralVolume& iv,
                               std::vector<Keypoint> kps);

// Binary keypoint file: magic "GREGKP01", u32 count, u32 descriptor length D,
// then per keypoint 3xf32 position, f32 scale, f32 response, i8 sign and
// D x f32 descriptor. Little-endian throughout.
void save_keypoints(const std::string& path, const std::vector<Keypoint>& kps);
std::vector<Keypoint> load_keypoints(const std::string& path);

}  // namespace groupreg
