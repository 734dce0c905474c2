#pragma once

#include <string>
#include <vector>

#include "groupreg/core.hpp"
#include "groupreg/transforms.hpp"
#include "groupreg/volume.hpp"

namespace groupreg {

struct LandmarkEntry {
  int image_id = 0;
  std::string category;
  Vec3 position;  // mm, in the image's physical space
};

using LandmarkTable = std::vector<LandmarkEntry>;

// CSV with header "image_id,category,x,y,z", coordinates in mm.
void save_landmarks(const std::string& path, const LandmarkTable& table);
LandmarkTable load_landmarks(const std::string& path);

struct CategoryStat {
  std::string category;
  int count = 0;
  double mean_mm = 0.0;  // mean distance to the category's mean position
  double max_mm = 0.0;
};

struct LandmarkReport {
  std::vector<CategoryStat> categories;
  std::vector<std::string> skipped;  // categories present in fewer than 2 images
  double global_mean_mm = 0.0;       // over all individual distances
  double global_max_mm = 0.0;
  int total_landmarks = 0;
};

// Projects every landmark through its image's half-transform and scores each
// category by the spread around its mean common-space position.
LandmarkReport evaluate_landmarks(const LandmarkTable& table,
                                  const std::vector<HalfTransform>& transforms);

void save_report_csv(const std::string& path, const LandmarkReport& report);
std::string format_report(const LandmarkReport& report);

struct OutputGrid {
  Vec3 origin;
  double spacing = 2.0;  // mm, isotropic
  Index3 dims{0, 0, 0};
};

// Bounding box of all volumes mapped into the common space, at `spacing`.
OutputGrid default_render_grid(const std::vector<Volume>& volumes,
                               const std::vector<HalfTransform>& transforms,
                               double spacing = 2.0);

struct RenderStats {
  std::size_t failed_inversions = 0;
  std::size_t total_voxels = 0;
};

// Mean image in the common space: each output voxel averages the trilinear
// samples of every input at the inverse-mapped position. Voxels where any
// inversion fails are masked to zero and counted.
Volume render_average(const std::vector<Volume>& volumes,
                      const std::vector<HalfTransform>& transforms,
                      const OutputGrid& grid, RenderStats* stats = nullptr);

}  // namespace groupreg
