#include "groupreg/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace groupreg {

namespace {

double descriptor_distance(const std::vector<float>& a,
                           const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Ground-truth warp: identity linear part plus one random grid whose
// coefficients respect the diffeomorphism bound by construction.
HalfTransform random_warp(std::mt19937_64& rng, const SyntheticSpec& spec) {
  SplineGrid grid;
  grid.spacing = spec.warp_spacing;
  grid.origin = spec.domain_lo - Vec3{2.0 * spec.warp_spacing,
                                      2.0 * spec.warp_spacing,
                                      2.0 * spec.warp_spacing};
  for (int a = 0; a < 3; ++a) {
    double span = spec.domain_hi[a] - spec.domain_lo[a] + 4.0 * spec.warp_spacing;
    grid.dims[a] =
        std::max(4, static_cast<int>(std::ceil(span / spec.warp_spacing)) + 3);
  }
  grid.frozen = true;
  grid.coeffs.resize(3 * grid.control_count());
  std::uniform_real_distribution<double> amp(-spec.warp_max_displacement,
                                             spec.warp_max_displacement);
  for (double& c : grid.coeffs) c = amp(rng);

  HalfTransform t;
  t.grids.push_back(std::move(grid));
  return t;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_images < 1) throw std::invalid_argument("synthetic: n_images < 1");
  if (spec.n_points < 1) throw std::invalid_argument("synthetic: n_points < 1");
  if (spec.outlier_rate < 0.0 || spec.outlier_rate >= 1.0)
    throw std::invalid_argument("synthetic: outlier_rate must be in [0, 1)");
  if (spec.warp_max_displacement >= 0.4 * spec.warp_spacing)
    throw std::invalid_argument(
        "synthetic: warp_max_displacement must stay below 0.4 * warp_spacing "
        "to keep the ground-truth warps diffeomorphic");
  for (int a = 0; a < 3; ++a)
    if (!(spec.domain_hi[a] > spec.domain_lo[a]))
      throw std::invalid_argument("synthetic: empty domain box");
  constexpr int kDescriptor = 48;

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> ux(spec.domain_lo.x, spec.domain_hi.x);
  std::uniform_real_distribution<double> uy(spec.domain_lo.y, spec.domain_hi.y);
  std::uniform_real_distribution<double> uz(spec.domain_lo.z, spec.domain_hi.z);
  std::uniform_real_distribution<double> uscale(2.0, 8.0);
  std::uniform_real_distribution<double> uresp(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SyntheticDataset data;
  data.template_points.resize(spec.n_points);
  for (Vec3& p : data.template_points) p = {ux(rng), uy(rng), uz(rng)};

  std::vector<double> scales(spec.n_points);
  std::vector<int> signs(spec.n_points);
  std::vector<double> responses(spec.n_points);
  std::vector<std::vector<double>> base_desc(spec.n_points);
  for (int t = 0; t < spec.n_points; ++t) {
    scales[t] = uscale(rng);
    signs[t] = uresp(rng) < 0.5 ? -1 : 1;
    responses[t] = uresp(rng);
    base_desc[t].resize(kDescriptor);
    double norm = 0.0;
    for (double& c : base_desc[t]) {
      c = gauss(rng);
      norm += c * c;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      base_desc[t].assign(kDescriptor, 0.0);
      base_desc[t][0] = 1.0;
    } else {
      for (double& c : base_desc[t]) c /= norm;
    }
  }

  data.true_warps.reserve(spec.n_images);
  for (int i = 0; i < spec.n_images; ++i)
    data.true_warps.push_back(random_warp(rng, spec));

  data.keypoints.assign(spec.n_images, {});
  for (int i = 0; i < spec.n_images; ++i) {
    auto& list = data.keypoints[i];
    list.resize(spec.n_points);
    for (int t = 0; t < spec.n_points; ++t) {
      Keypoint& kp = list[t];
      kp.position = data.true_warps[i].apply(data.template_points[t]);
      if (spec.noise_sigma > 0.0) {
        kp.position += Vec3{gauss(rng) * spec.noise_sigma,
                            gauss(rng) * spec.noise_sigma,
                            gauss(rng) * spec.noise_sigma};
      }
      kp.scale = scales[t];
      kp.response = responses[t];
      kp.laplacian_sign = signs[t];
      kp.image_id = i;
      std::vector<double> d = base_desc[t];
      if (spec.descriptor_noise > 0.0)
        for (double& c : d) c += gauss(rng) * spec.descriptor_noise;
      double norm = 0.0;
      for (double c : d) norm += c * c;
      norm = std::sqrt(norm);
      kp.descriptor.resize(kDescriptor);
      for (int c = 0; c < kDescriptor; ++c)
        kp.descriptor[c] =
            static_cast<float>(norm < 1e-12 ? (c == 0) : d[c] / norm);
    }
  }

  // Planted matches: every template point in every image pair, then random
  // wrong pairs appended until they make up the requested rate.
  std::vector<Match> matches;
  std::vector<std::uint8_t> flags;
  auto pair_key = [&](int i, int ta, int j, int tb) {
    return ((static_cast<std::uint64_t>(i) * spec.n_images + j) *
                spec.n_points +
            ta) *
               spec.n_points +
           tb;
  };
  std::unordered_set<std::uint64_t> used;
  for (int i = 0; i < spec.n_images; ++i) {
    for (int j = i + 1; j < spec.n_images; ++j) {
      for (int t = 0; t < spec.n_points; ++t) {
        Match m;
        m.image_a = i;
        m.index_a = t;
        m.image_b = j;
        m.index_b = t;
        m.descriptor_distance = descriptor_distance(
            data.keypoints[i][t].descriptor, data.keypoints[j][t].descriptor);
        matches.push_back(m);
        flags.push_back(0);
        used.insert(pair_key(i, t, j, t));
      }
    }
  }

  if (spec.outlier_rate > 0.0 && spec.n_images >= 2 && spec.n_points >= 2) {
    std::size_t inliers = matches.size();
    auto wanted = static_cast<std::size_t>(
        std::llround(spec.outlier_rate / (1.0 - spec.outlier_rate) *
                     static_cast<double>(inliers)));
    int n_pairs = spec.n_images * (spec.n_images - 1) / 2;
    std::uniform_int_distribution<int> upair(0, n_pairs - 1);
    std::uniform_int_distribution<int> upoint(0, spec.n_points - 1);
    std::size_t added = 0;
    while (added < wanted) {
      int p = upair(rng);
      int i = 0;
      while (p >= spec.n_images - 1 - i) {
        p -= spec.n_images - 1 - i;
        ++i;
      }
      int j = i + 1 + p;
      int ta = upoint(rng);
      int tb = upoint(rng);
      if (ta == tb) continue;  // that would be a true correspondence
      if (!used.insert(pair_key(i, ta, j, tb)).second) continue;
      Match m;
      m.image_a = i;
      m.index_a = ta;
      m.image_b = j;
      m.index_b = tb;
      m.descriptor_distance = descriptor_distance(
          data.keypoints[i][ta].descriptor, data.keypoints[j][tb].descriptor);
      matches.push_back(m);
      flags.push_back(1);
      ++added;
    }
  }

  std::vector<std::uint32_t> counts(spec.n_images,
                                    static_cast<std::uint32_t>(spec.n_points));
  // build() sorts the matches; carry the outlier flags across by key.
  std::unordered_map<std::uint64_t, std::uint8_t> flag_of;
  flag_of.reserve(matches.size());
  for (std::size_t m = 0; m < matches.size(); ++m)
    flag_of[pair_key(matches[m].image_a, matches[m].index_a,
                     matches[m].image_b, matches[m].index_b)] = flags[m];
  data.graph = MatchGraph::build(std::move(matches), std::move(counts));
  data.outlier_flags.resize(data.graph.matches.size());
  for (std::size_t m = 0; m < data.graph.matches.size(); ++m) {
    const Match& mt = data.graph.matches[m];
    data.outlier_flags[m] =
        flag_of.at(pair_key(mt.image_a, mt.index_a, mt.image_b, mt.index_b));
  }

  char name[16];
  for (int l = 0; l < spec.n_landmarks; ++l) {
    Vec3 site{ux(rng), uy(rng), uz(rng)};
    std::snprintf(name, sizeof(name), "L%03d", l);
    for (int i = 0; i < spec.n_images; ++i) {
      LandmarkEntry entry;
      entry.image_id = i;
      entry.category = name;
      entry.position = data.true_warps[i].apply(site);
      data.landmarks.push_back(entry);
    }
  }
  return data;
}

void save_synthetic(const std::string& directory,
                    const SyntheticDataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  char name[32];
  for (std::size_t i = 0; i < data.keypoints.size(); ++i) {
    std::snprintf(name, sizeof(name), "kp_%03zu.kp", i);
    save_keypoints((fs::path(directory) / name).string(), data.keypoints[i]);
    std::snprintf(name, sizeof(name), "true_warp_%03zu.json", i);
    save_transform((fs::path(directory) / name).string(), data.true_warps[i],
                   static_cast<int>(i));
  }
  save_matches((fs::path(directory) / "matches.txt").string(), data.graph);
  save_landmarks((fs::path(directory) / "landmarks.csv").string(),
                 data.landmarks);

  std::FILE* f =
      std::fopen((fs::path(directory) / "outlier_flags.txt").string().c_str(),
                 "w");
  if (!f)
    throw std::runtime_error(directory + "/outlier_flags.txt: cannot open");
  for (std::uint8_t flag : data.outlier_flags)
    std::fprintf(f, "%d\n", static_cast<int>(flag));
  std::fclose(f);
}

}  // namespace groupreg
