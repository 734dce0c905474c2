#include "groupreg/keypoints.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "groupreg/parallel.hpp"

namespace groupreg {

int hessian_filter_size(int octave, int scale) {
  return 3 * ((1 << octave) * (scale + 1) + 1);
}

namespace {

// Calibration constants so the box responses estimate the true second
// derivatives: each filter response divided by its discrete moment yields
// H_ab for a locally quadratic image.
struct FilterGeometry {
  int size = 0;     // full width w = 3l
  int lobe = 0;     // l, always odd
  int cross = 0;    // half extent of the (2l-1)-wide cross-section
  int margin = 0;   // samples need this border inside the volume
  double moment_straight = 0.0;  // response / H_aa
  double moment_cross = 0.0;     // response / H_ab
};

FilterGeometry filter_geometry(int size) {
  FilterGeometry f;
  f.size = size;
  f.lobe = size / 3;
  f.cross = f.lobe - 1;  // cross-section spans 2l-1 voxels
  f.margin = (size - 1) / 2 + 1;
  const int l = f.lobe;
  // Discrete x^2 moment of the (+1,-2,+1) lobe profile, halved (Taylor),
  // times the (2l-1)^2 cross-section voxel count.
  double side = 0.0;
  for (int x = (l + 1) / 2; x <= (3 * l - 1) / 2; ++x)
    side += static_cast<double>(x) * x;
  double mid = 0.0;
  for (int x = -(l - 1) / 2; x <= (l - 1) / 2; ++x)
    mid += static_cast<double>(x) * x;
  double second_moment = 2.0 * side - 2.0 * mid;
  f.moment_straight =
      0.5 * second_moment * (2.0 * l - 1.0) * (2.0 * l - 1.0);
  // Quadrant boxes span x,y in [1..l]; their xy moment is (sum 1..l)^2 per
  // quadrant and slice, all four quadrants adding up, times 2l-1 slices.
  double half_sum = 0.5 * l * (l + 1);
  f.moment_cross = 4.0 * half_sum * half_sum * (2.0 * l - 1.0);
  return f;
}

struct HessianEntries {
  double xx, yy, zz, xy, xz, yz;
  double trace() const { return xx + yy + zz; }
  double det() const {
    return xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz) +
           xz * (xy * yz - yy * xz);
  }
};

// Box-filter Hessian estimate at voxel (x,y,z), calibrated to second
// derivatives in voxel units.
HessianEntries box_hessian(const IntegralVolume& iv, const FilterGeometry& f,
                           int x, int y, int z) {
  const int l = f.lobe;
  const int whole = (3 * l - 1) / 2;  // lobe-axis half extent
  const int midh = (l - 1) / 2;       // middle lobe half extent
  const int c = f.cross;              // cross-section half extent

  auto straight = [&](int axis, int cx, int cy, int cz) {
    Index3 lo{cx - c, cy - c, cz - c}, hi{cx + c, cy + c, cz + c};
    Index3 mlo = lo, mhi = hi;
    lo[axis] = (axis == 0 ? cx : axis == 1 ? cy : cz) - whole;
    hi[axis] = (axis == 0 ? cx : axis == 1 ? cy : cz) + whole;
    mlo[axis] = (axis == 0 ? cx : axis == 1 ? cy : cz) - midh;
    mhi[axis] = (axis == 0 ? cx : axis == 1 ? cy : cz) + midh;
    return (iv.box_sum(lo, hi) - 3.0 * iv.box_sum(mlo, mhi)) /
           f.moment_straight;
  };
  // Four quadrant boxes in the (a,b) plane, offset one voxel off-center,
  // spanning the cross extent along the remaining axis.
  auto cross = [&](int axis_a, int axis_b) {
    Index3 center{x, y, z};
    double acc = 0.0;
    for (int sa = -1; sa <= 1; sa += 2) {
      for (int sb = -1; sb <= 1; sb += 2) {
        Index3 lo = {center[0] - c, center[1] - c, center[2] - c};
        Index3 hi = {center[0] + c, center[1] + c, center[2] + c};
        lo[axis_a] = center[axis_a] + (sa > 0 ? 1 : -l);
        hi[axis_a] = center[axis_a] + (sa > 0 ? l : -1);
        lo[axis_b] = center[axis_b] + (sb > 0 ? 1 : -l);
        hi[axis_b] = center[axis_b] + (sb > 0 ? l : -1);
        acc += sa * sb * iv.box_sum(lo, hi);
      }
    }
    return acc / f.moment_cross;
  };

  HessianEntries h;
  h.xx = straight(0, x, y, z);
  h.yy = straight(1, x, y, z);
  h.zz = straight(2, x, y, z);
  h.xy = cross(0, 1);
  h.xz = cross(0, 2);
  h.yz = cross(1, 2);
  return h;
}

struct Candidate {
  double response;
  Vec3 position;  // mm, refined
  double scale;   // mm
  int sign;
  // Sort key for deterministic ordering.
  int iz, iy, ix;
};

// Central-difference quadratic refinement in (x, y, z, scale); offsets are in
// sample steps and clamped to +-0.5.
std::array<double, 4> refine_offset(
    const std::array<std::array<std::array<std::array<float, 3>, 3>, 3>, 3>&
        n) {
  // n[s][z][y][x] with indices 0..2 around the candidate.
  auto v = [&](int s, int z, int y, int x) {
    return static_cast<double>(n[s][z][y][x]);
  };
  double g[4] = {(v(1, 1, 1, 2) - v(1, 1, 1, 0)) / 2.0,
                 (v(1, 1, 2, 1) - v(1, 1, 0, 1)) / 2.0,
                 (v(1, 2, 1, 1) - v(1, 0, 1, 1)) / 2.0,
                 (v(2, 1, 1, 1) - v(0, 1, 1, 1)) / 2.0};
  double c = v(1, 1, 1, 1);
  double H[4][4];
  H[0][0] = v(1, 1, 1, 2) + v(1, 1, 1, 0) - 2 * c;
  H[1][1] = v(1, 1, 2, 1) + v(1, 1, 0, 1) - 2 * c;
  H[2][2] = v(1, 2, 1, 1) + v(1, 0, 1, 1) - 2 * c;
  H[3][3] = v(2, 1, 1, 1) + v(0, 1, 1, 1) - 2 * c;
  H[0][1] = H[1][0] =
      (v(1, 1, 2, 2) - v(1, 1, 2, 0) - v(1, 1, 0, 2) + v(1, 1, 0, 0)) / 4.0;
  H[0][2] = H[2][0] =
      (v(1, 2, 1, 2) - v(1, 2, 1, 0) - v(1, 0, 1, 2) + v(1, 0, 1, 0)) / 4.0;
  H[0][3] = H[3][0] =
      (v(2, 1, 1, 2) - v(2, 1, 1, 0) - v(0, 1, 1, 2) + v(0, 1, 1, 0)) / 4.0;
  H[1][2] = H[2][1] =
      (v(1, 2, 2, 1) - v(1, 2, 0, 1) - v(1, 0, 2, 1) + v(1, 0, 0, 1)) / 4.0;
  H[1][3] = H[3][1] =
      (v(2, 1, 2, 1) - v(2, 1, 0, 1) - v(0, 1, 2, 1) + v(0, 1, 0, 1)) / 4.0;
  H[2][3] = H[3][2] =
      (v(2, 2, 1, 1) - v(2, 0, 1, 1) - v(0, 2, 1, 1) + v(0, 0, 1, 1)) / 4.0;

  // Solve H * delta = -g by Gaussian elimination with partial pivoting.
  double A[4][5];
  for (int r = 0; r < 4; ++r) {
    for (int cidx = 0; cidx < 4; ++cidx) A[r][cidx] = H[r][cidx];
    A[r][4] = -g[r];
  }
  std::array<double, 4> delta{0, 0, 0, 0};
  for (int col = 0; col < 4; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(A[r][col]) > std::abs(A[pivot][col])) pivot = r;
    if (std::abs(A[pivot][col]) < 1e-30) return {0, 0, 0, 0};
    if (pivot != col)
      for (int k = col; k < 5; ++k) std::swap(A[pivot][k], A[col][k]);
    for (int r = col + 1; r < 4; ++r) {
      double factor = A[r][col] / A[col][col];
      for (int k = col; k < 5; ++k) A[r][k] -= factor * A[col][k];
    }
  }
  for (int r = 3; r >= 0; --r) {
    double acc = A[r][4];
    for (int k = r + 1; k < 4; ++k) acc -= A[r][k] * delta[k];
    delta[r] = acc / A[r][r];
  }
  for (double& d : delta) d = std::clamp(d, -0.5, 0.5);
  return delta;
}

}  // namespace

std::vector<Keypoint> detect(const Volume& v, const DetectorParams& params) {
  if (params.octaves < 1 || params.scales_per_octave < 3)
    throw std::invalid_argument(
        "detect: need at least one octave and three scales per octave");
  const int smallest = hessian_filter_size(1, 0);
  int min_dim = std::min({v.dims[0], v.dims[1], v.dims[2]});
  if (min_dim < smallest + 2)
    throw std::invalid_argument(
        "detect: volume smaller than the smallest filter (" +
        std::to_string(smallest) + " voxels)");

  IntegralVolume iv = build_integral(v);
  const double mm_per_voxel =
      std::cbrt(v.spacing.x * v.spacing.y * v.spacing.z);

  std::vector<Candidate> candidates;
  for (int octave = 1; octave <= params.octaves; ++octave) {
    const int step = 1 << (octave - 1);
    const int S = params.scales_per_octave;
    Index3 gdim{(v.dims[0] - 1) / step + 1, (v.dims[1] - 1) / step + 1,
                (v.dims[2] - 1) / step + 1};
    if (gdim[0] < 3 || gdim[1] < 3 || gdim[2] < 3) break;
    auto gindex = [&](int ix, int iy, int iz) {
      return static_cast<std::size_t>(ix) +
             static_cast<std::size_t>(gdim[0]) *
                 (static_cast<std::size_t>(iy) +
                  static_cast<std::size_t>(gdim[1]) *
                      static_cast<std::size_t>(iz));
    };

    std::vector<FilterGeometry> geometry(S);
    std::vector<std::vector<float>> response(S);
    for (int s = 0; s < S; ++s) {
      geometry[s] = filter_geometry(hessian_filter_size(octave, s));
      response[s].assign(static_cast<std::size_t>(gdim[0]) * gdim[1] * gdim[2],
                         0.0f);
      const FilterGeometry& f = geometry[s];
      const double size_sq =
          static_cast<double>(f.size) * static_cast<double>(f.size);
      parallel::for_each_index(static_cast<std::size_t>(gdim[2]),
                               [&](std::size_t kz) {
        int z = static_cast<int>(kz) * step;
        if (z < f.margin || z >= v.dims[2] - f.margin) return;
        for (int iy = 0; iy < gdim[1]; ++iy) {
          int y = iy * step;
          if (y < f.margin || y >= v.dims[1] - f.margin) continue;
          for (int ix = 0; ix < gdim[0]; ++ix) {
            int x = ix * step;
            if (x < f.margin || x >= v.dims[0] - f.margin) continue;
            HessianEntries h = box_hessian(iv, f, x, y, z);
            // size^2-scaled entries make |det| comparable across scales.
            double det = h.det() * size_sq * size_sq * size_sq;
            response[s][gindex(ix, iy, static_cast<int>(kz))] =
                static_cast<float>(std::abs(det));
          }
        }
      });
    }

    // 3x3x3x3 non-maximum suppression over the interior scales.
    std::vector<std::vector<Candidate>> blocks(parallel::thread_count());
    parallel::for_blocks(static_cast<std::size_t>(gdim[2]), [&](int block,
                                                                std::size_t lo,
                                                                std::size_t hi) {
      auto& out = blocks[block];
      for (std::size_t kz = std::max<std::size_t>(lo, 1);
           kz < std::min<std::size_t>(hi, gdim[2] - 1); ++kz) {
        for (int s = 1; s + 1 < S; ++s) {
          for (int iy = 1; iy + 1 < gdim[1]; ++iy) {
            for (int ix = 1; ix + 1 < gdim[0]; ++ix) {
              float r = response[s][gindex(ix, iy, static_cast<int>(kz))];
              if (!(r > params.response_threshold) || !(r > 0.0f)) continue;
              bool is_max = true;
              for (int ds = -1; ds <= 1 && is_max; ++ds) {
                for (int dz = -1; dz <= 1 && is_max; ++dz) {
                  for (int dy = -1; dy <= 1 && is_max; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                      if (!ds && !dz && !dy && !dx) continue;
                      if (response[s + ds][gindex(
                              ix + dx, iy + dy, static_cast<int>(kz) + dz)] >=
                          r) {
                        is_max = false;
                        break;
                      }
                    }
                  }
                }
              }
              if (!is_max) continue;

              std::array<std::array<std::array<std::array<float, 3>, 3>, 3>, 3>
                  nbhd;
              for (int ds = -1; ds <= 1; ++ds)
                for (int dz = -1; dz <= 1; ++dz)
                  for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                      nbhd[ds + 1][dz + 1][dy + 1][dx + 1] =
                          response[s + ds][gindex(ix + dx, iy + dy,
                                                  static_cast<int>(kz) + dz)];
              auto delta = refine_offset(nbhd);

              Candidate cand;
              cand.response = r;
              double vx = (ix + delta[0]) * step;
              double vy = (iy + delta[1]) * step;
              double vz = (static_cast<int>(kz) + delta[2]) * step;
              cand.position = {v.origin.x + v.spacing.x * vx,
                               v.origin.y + v.spacing.y * vy,
                               v.origin.z + v.spacing.z * vz};
              double size = geometry[s].size +
                            delta[3] * (geometry[s + 1].size -
                                        geometry[s].size);
              cand.scale = 1.2 * size / 9.0 * mm_per_voxel;
              HessianEntries h = box_hessian(iv, geometry[s], ix * step,
                                             iy * step,
                                             static_cast<int>(kz) * step);
              cand.sign = h.trace() >= 0.0 ? 1 : -1;
              cand.ix = ix * step;
              cand.iy = iy * step;
              cand.iz = static_cast<int>(kz) * step;
              out.push_back(cand);
            }
          }
        }
      }
    });
    for (auto& block : blocks)
      candidates.insert(candidates.end(), block.begin(), block.end());
  }

  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& a, const Candidate& b) {
              if (a.response != b.response) return a.response > b.response;
              if (a.iz != b.iz) return a.iz < b.iz;
              if (a.iy != b.iy) return a.iy < b.iy;
              return a.ix < b.ix;
            });

  // Octaves overlap in scale, so a strong structure can surface twice
  // (e.g. at sizes 39 and 51). Keep the strongest of near-coincident
  // detections at neighboring scales.
  double max_scale = 0.0;
  for (const auto& c : candidates) max_scale = std::max(max_scale, c.scale);
  std::vector<Candidate> accepted;
  const double cell = std::max(max_scale, 1e-6);
  std::unordered_map<std::int64_t, std::vector<std::size_t>> buckets;
  auto key_of = [&](const Vec3& p) {
    auto q = [&](double x) {
      return static_cast<std::int64_t>(std::floor(x / cell)) & 0x1fffff;
    };
    return (q(p.x) << 42) | (q(p.y) << 21) | q(p.z);
  };
  for (const auto& c : candidates) {
    bool duplicate = false;
    std::int64_t cx = static_cast<std::int64_t>(std::floor(c.position.x / cell));
    std::int64_t cy = static_cast<std::int64_t>(std::floor(c.position.y / cell));
    std::int64_t cz = static_cast<std::int64_t>(std::floor(c.position.z / cell));
    for (std::int64_t dx = -1; dx <= 1 && !duplicate; ++dx) {
      for (std::int64_t dy = -1; dy <= 1 && !duplicate; ++dy) {
        for (std::int64_t dz = -1; dz <= 1 && !duplicate; ++dz) {
          std::int64_t key = (((cx + dx) & 0x1fffff) << 42) |
                             (((cy + dy) & 0x1fffff) << 21) |
                             ((cz + dz) & 0x1fffff);
          auto it = buckets.find(key);
          if (it == buckets.end()) continue;
          for (std::size_t idx : it->second) {
            const Candidate& a = accepted[idx];
            if ((a.position - c.position).norm() <
                    0.5 * std::max(a.scale, c.scale) &&
                std::abs(std::log(a.scale / c.scale)) < std::log(2.0)) {
              duplicate = true;
              break;
            }
          }
        }
      }
    }
    if (duplicate) continue;
    buckets[key_of(c.position)].push_back(accepted.size());
    accepted.push_back(c);
    if (static_cast<int>(accepted.size()) >= params.max_keypoints) break;
  }

  std::vector<Keypoint> kps;
  kps.reserve(accepted.size());
  for (const auto& c : accepted) {
    Keypoint kp;
    kp.position = c.position;
    kp.scale = c.scale;
    kp.response = c.response;
    kp.laplacian_sign = c.sign;
    kps.push_back(std::move(kp));
  }
  return kps;
}

std::vector<Keypoint> describe(const IntegralVolume& iv,
                               std::vector<Keypoint> kps) {
  constexpr int kGrid = 10;       // samples per axis, 5 per subregion half
  constexpr int kDescriptor = 48;

  std::vector<std::vector<float>> descriptors(kps.size());
  std::vector<char> keep(kps.size(), 0);
  parallel::for_each_index(kps.size(), [&](std::size_t i) {
    const Keypoint& kp = kps[i];
    Vec3 vox = (kp.position - iv.origin).cdiv(iv.spacing);
    Vec3 sigma_vox = {kp.scale / iv.spacing.x, kp.scale / iv.spacing.y,
                      kp.scale / iv.spacing.z};
    Index3 haar{std::max(1, static_cast<int>(std::lround(sigma_vox.x))),
                std::max(1, static_cast<int>(std::lround(sigma_vox.y))),
                std::max(1, static_cast<int>(std::lround(sigma_vox.z)))};
    // Support: outermost sample center at 4.5 sigma plus the Haar box.
    for (int a = 0; a < 3; ++a) {
      double reach = 4.5 * sigma_vox[a] + haar[a] + 1.0;
      double c = a == 0 ? vox.x : a == 1 ? vox.y : vox.z;
      if (c - reach < 0.0 || c + reach > iv.dims[a] - 1) return;  // dropped
    }

    std::array<double, kDescriptor> acc{};
    for (int mz = 0; mz < kGrid; ++mz) {
      int sz = static_cast<int>(std::lround(vox.z + (mz - 4.5) * sigma_vox.z));
      for (int my = 0; my < kGrid; ++my) {
        int sy =
            static_cast<int>(std::lround(vox.y + (my - 4.5) * sigma_vox.y));
        for (int mx = 0; mx < kGrid; ++mx) {
          int sx =
              static_cast<int>(std::lround(vox.x + (mx - 4.5) * sigma_vox.x));
          // Haar responses: difference of the two half boxes, as means so
          // anisotropic voxel counts do not bias the axes.
          auto haar_response = [&](int axis) {
            Index3 lo{sx - haar[0], sy - haar[1], sz - haar[2]};
            Index3 hi{sx + haar[0], sy + haar[1], sz + haar[2]};
            Index3 plo = lo, phi = hi;
            int center = axis == 0 ? sx : axis == 1 ? sy : sz;
            plo[axis] = center + 1;
            phi[axis] = center + haar[axis];
            Index3 nlo = lo, nhi = hi;
            nlo[axis] = center - haar[axis];
            nhi[axis] = center - 1;
            double count = static_cast<double>(haar[axis]);
            for (int b = 0; b < 3; ++b)
              if (b != axis) count *= 2.0 * haar[b] + 1.0;
            return (iv.box_sum(plo, phi) - iv.box_sum(nlo, nhi)) / count;
          };
          double dx = haar_response(0);
          double dy = haar_response(1);
          double dz = haar_response(2);
          int sub = (mx / 5) + 2 * (my / 5) + 4 * (mz / 5);
          double* slot = acc.data() + 6 * sub;
          slot[0] += dx;
          slot[1] += dy;
          slot[2] += dz;
          slot[3] += std::abs(dx);
          slot[4] += std::abs(dy);
          slot[5] += std::abs(dz);
        }
      }
    }
    double norm = 0.0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    if (norm < 1e-20) return;  // featureless support, drop
    descriptors[i].resize(kDescriptor);
    for (int a = 0; a < kDescriptor; ++a)
      descriptors[i][a] = static_cast<float>(acc[a] / norm);
    keep[i] = 1;
  });

  std::vector<Keypoint> out;
  out.reserve(kps.size());
  for (std::size_t i = 0; i < kps.size(); ++i) {
    if (!keep[i]) continue;
    Keypoint kp = std::move(kps[i]);
    kp.descriptor = std::move(descriptors[i]);
    out.push_back(std::move(kp));
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'G', 'R', 'E', 'G', 'K', 'P', '0', '1'};

template <typename T>
void write_raw(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(path + ": truncated keypoint file");
  return v;
}

}  // namespace

void save_keypoints(const std::string& path,
                    const std::vector<Keypoint>& kps) {
  std::uint32_t dim = kps.empty() ? 48u
                                  : static_cast<std::uint32_t>(
                                        kps[0].descriptor.size());
  for (const auto& kp : kps) {
    if (kp.descriptor.size() != dim)
      throw std::invalid_argument(path +
                                  ": inconsistent descriptor lengths");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(kMagic, sizeof(kMagic));
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(kps.size()));
  write_raw<std::uint32_t>(out, dim);
  for (const auto& kp : kps) {
    write_raw<float>(out, static_cast<float>(kp.position.x));
    write_raw<float>(out, static_cast<float>(kp.position.y));
    write_raw<float>(out, static_cast<float>(kp.position.z));
    write_raw<float>(out, static_cast<float>(kp.scale));
    write_raw<float>(out, static_cast<float>(kp.response));
    write_raw<std::int8_t>(out,
                           static_cast<std::int8_t>(kp.laplacian_sign >= 0
                                                        ? 1
                                                        : -1));
    for (float d : kp.descriptor) write_raw<float>(out, d);
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

std::vector<Keypoint> load_keypoints(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path + ": not a keypoint file (bad magic)");
  std::uint32_t count = read_raw<std::uint32_t>(in, path);
  std::uint32_t dim = read_raw<std::uint32_t>(in, path);
  if (dim == 0 || dim > 4096)
    throw std::runtime_error(path + ": implausible descriptor length");
  std::vector<Keypoint> kps(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Keypoint& kp = kps[i];
    kp.position.x = read_raw<float>(in, path);
    kp.position.y = read_raw<float>(in, path);
    kp.position.z = read_raw<float>(in, path);
    kp.scale = read_raw<float>(in, path);
    kp.response = read_raw<float>(in, path);
    kp.laplacian_sign = read_raw<std::int8_t>(in, path);
    kp.descriptor.resize(dim);
    in.read(reinterpret_cast<char*>(kp.descriptor.data()),
            static_cast<std::streamsize>(dim * sizeof(float)));
    if (!in) throw std::runtime_error(path + ": truncated keypoint file");
  }
  return kps;
}

}  // namespace groupreg
