#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "groupreg/core.hpp"
#include "groupreg/keypoints.hpp"

namespace groupreg {

struct MatchCriteria {
  double max_descriptor_distance = 1.0;
  double nn_ratio = 0.9;            // nearest/second-nearest acceptance bound
  double max_scale_log_ratio = 0.6931471805599453;  // log 2
  bool require_same_sign = true;
};

struct Match {
  std::int32_t image_a = 0;
  std::int32_t index_a = 0;
  std::int32_t image_b = 0;
  std::int32_t index_b = 0;
  double descriptor_distance = 0.0;
  double weight = 1.0;  // set by the robust reweighting, 1 until then
};

// Match set over a group of keypoint lists with per-keypoint adjacency.
// Keypoints are addressed globally: global index = point_offsets[image] + idx.
// Matches are canonical (image_a < image_b) and sorted by
// (image_a, index_a, image_b, index_b).
struct MatchGraph {
  std::vector<Match> matches;
  std::vector<std::uint32_t> image_point_counts;
  std::vector<std::size_t> point_offsets;  // size n_images + 1
  // CSR adjacency: match indices incident to each global keypoint.
  std::vector<std::uint32_t> adj_offsets;  // size total_points + 1
  std::vector<std::uint32_t> adj_matches;  // size 2 * matches
  // Match indices touching each image (either endpoint).
  std::vector<std::vector<std::uint32_t>> image_matches;

  int image_count() const { return static_cast<int>(image_point_counts.size()); }
  std::size_t total_points() const { return point_offsets.back(); }
  std::size_t global_index(int image, std::int32_t idx) const {
    return point_offsets[image] + static_cast<std::size_t>(idx);
  }
  // Number of matches containing the keypoint (its neighborhood size).
  std::uint32_t degree(std::size_t global) const {
    return adj_offsets[global + 1] - adj_offsets[global];
  }

  // Builds adjacency and canonical ordering from a raw match list.
  static MatchGraph build(std::vector<Match> matches,
                          std::vector<std::uint32_t> image_point_counts);
};

// Nearest-neighbor descriptor matching from a to b and b to a with the ratio
// test, candidate filtering by Laplacian sign and scale window, and
// deduplication to a canonical set. Exact results; an index is used above
// 2000 target points, brute force below.
std::vector<Match> match_pair(std::span<const Keypoint> a,
                              std::span<const Keypoint> b, int image_a,
                              int image_b, const MatchCriteria& criteria);

// All unordered image pairs, deterministically merged.
MatchGraph build_graph(const std::vector<std::vector<Keypoint>>& sets,
                       const MatchCriteria& criteria);

// rows[m] = points[a_m] - points[b_m]: one +1 and one -1 per incidence row.
void incidence_apply(const MatchGraph& g, std::span<const Vec3> points,
                     std::span<Vec3> rows);
// out[a_m] += rows[m]; out[b_m] -= rows[m]. `out` must be pre-sized/zeroed.
void incidence_transpose_apply(const MatchGraph& g, std::span<const Vec3> rows,
                               std::span<Vec3> out);

// Text format: "images <n>" line, "counts <c0> ... <cn-1>" line, then one
// match per line as "imgA idxA imgB idxB descriptorDistance".
void save_matches(const std::string& path, const MatchGraph& g);
MatchGraph load_matches(const std::string& path);

}  // namespace groupreg
