#include "groupreg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "groupreg/parallel.hpp"

namespace groupreg {

void save_landmarks(const std::string& path, const LandmarkTable& table) {
  for (const LandmarkEntry& e : table) {
    if (e.category.empty() ||
        e.category.find_first_of(",\n\r") != std::string::npos)
      throw std::invalid_argument(
          "save_landmarks: category names must be non-empty and free of "
          "commas");
  }
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  std::fprintf(f, "image_id,category,x,y,z\n");
  for (const LandmarkEntry& e : table)
    std::fprintf(f, "%d,%s,%.17g,%.17g,%.17g\n", e.image_id,
                 e.category.c_str(), e.position.x, e.position.y, e.position.z);
  std::fclose(f);
}

LandmarkTable load_landmarks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path + ": empty landmark file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image_id,category,x,y,z")
    throw std::runtime_error(path + ": unexpected landmark CSV header");

  LandmarkTable table;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string, 5> field;
    std::size_t start = 0;
    for (int i = 0; i < 5; ++i) {
      std::size_t comma = line.find(',', start);
      if (i < 4 && comma == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": expected 5 comma-separated fields");
      field[i] = line.substr(start, comma == std::string::npos
                                        ? std::string::npos
                                        : comma - start);
      start = comma + 1;
    }
    try {
      LandmarkEntry e;
      e.image_id = std::stoi(field[0]);
      e.category = field[1];
      e.position = {std::stod(field[2]), std::stod(field[3]),
                    std::stod(field[4])};
      if (e.category.empty())
        throw std::invalid_argument("empty category");
      table.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " +
                               ex.what());
    }
  }
  return table;
}

LandmarkReport evaluate_landmarks(
    const LandmarkTable& table, const std::vector<HalfTransform>& transforms) {
  std::map<std::string, std::vector<Vec3>> by_category;
  for (const LandmarkEntry& e : table) {
    if (e.image_id < 0 ||
        e.image_id >= static_cast<int>(transforms.size()))
      throw std::invalid_argument(
          "evaluate_landmarks: landmark image_id " +
          std::to_string(e.image_id) + " has no transform");
    by_category[e.category].push_back(
        transforms[e.image_id].apply(e.position));
  }

  LandmarkReport report;
  double distance_sum = 0.0;
  for (const auto& [category, points] : by_category) {
    if (points.size() < 2) {
      report.skipped.push_back(category);
      continue;
    }
    Vec3 mean{};
    for (const Vec3& p : points) mean += p;
    mean = mean / static_cast<double>(points.size());
    CategoryStat stat;
    stat.category = category;
    stat.count = static_cast<int>(points.size());
    for (const Vec3& p : points) {
      double d = (p - mean).norm();
      stat.mean_mm += d;
      stat.max_mm = std::max(stat.max_mm, d);
      distance_sum += d;
      report.global_max_mm = std::max(report.global_max_mm, d);
    }
    stat.mean_mm /= points.size();
    report.total_landmarks += stat.count;
    report.categories.push_back(std::move(stat));
  }
  if (report.total_landmarks > 0)
    report.global_mean_mm = distance_sum / report.total_landmarks;
  return report;
}

void save_report_csv(const std::string& path, const LandmarkReport& report) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  std::fprintf(f, "category,mean_mm,max_mm,count\n");
  for (const CategoryStat& s : report.categories)
    std::fprintf(f, "%s,%.17g,%.17g,%d\n", s.category.c_str(), s.mean_mm,
                 s.max_mm, s.count);
  std::fclose(f);
}

std::string format_report(const LandmarkReport& report) {
  std::ostringstream out;
  std::size_t width = 8;
  for (const CategoryStat& s : report.categories)
    width = std::max(width, s.category.size());
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s %6s %12s %12s\n",
                static_cast<int>(width), "category", "count", "mean_mm",
                "max_mm");
  out << line;
  for (const CategoryStat& s : report.categories) {
    std::snprintf(line, sizeof(line), "%-*s %6d %12.3f %12.3f\n",
                  static_cast<int>(width), s.category.c_str(), s.count,
                  s.mean_mm, s.max_mm);
    out << line;
  }
  std::snprintf(line, sizeof(line),
                "overall: %d landmarks, mean %.3f mm, max %.3f mm\n",
                report.total_landmarks, report.global_mean_mm,
                report.global_max_mm);
  out << line;
  if (!report.skipped.empty()) {
    out << "skipped (seen in fewer than 2 images):";
    for (const std::string& s : report.skipped) out << ' ' << s;
    out << '\n';
  }
  return out.str();
}

OutputGrid default_render_grid(const std::vector<Volume>& volumes,
                               const std::vector<HalfTransform>& transforms,
                               double spacing) {
  if (volumes.size() != transforms.size())
    throw std::invalid_argument(
        "default_render_grid: one transform per volume required");
  if (volumes.empty())
    throw std::invalid_argument("default_render_grid: no volumes");
  if (spacing <= 0.0)
    throw std::invalid_argument("default_render_grid: spacing must be > 0");

  // Map a coarse lattice of each volume; corners alone can underestimate a
  // deformable mapping.
  constexpr int kLattice = 8;
  bool first = true;
  Vec3 lo{}, hi{};
  for (std::size_t v = 0; v < volumes.size(); ++v) {
    const Volume& vol = volumes[v];
    for (int a = 0; a < 3; ++a)
      if (vol.dims[a] < 1)
        throw std::invalid_argument("default_render_grid: empty volume");
    for (int kz = 0; kz < kLattice; ++kz) {
      double fz = kz / (kLattice - 1.0);
      for (int ky = 0; ky < kLattice; ++ky) {
        double fy = ky / (kLattice - 1.0);
        for (int kx = 0; kx < kLattice; ++kx) {
          double fx = kx / (kLattice - 1.0);
          Vec3 p = vol.position(0, 0, 0) +
                   Vec3{vol.spacing.x * (vol.dims[0] - 1) * fx,
                        vol.spacing.y * (vol.dims[1] - 1) * fy,
                        vol.spacing.z * (vol.dims[2] - 1) * fz};
          Vec3 q = transforms[v].apply(p);
          lo = first ? q : lo.cwise_min(q);
          hi = first ? q : hi.cwise_max(q);
          first = false;
        }
      }
    }
  }

  OutputGrid grid;
  grid.spacing = spacing;
  grid.origin = lo;
  for (int a = 0; a < 3; ++a)
    grid.dims[a] = std::max(
        1, static_cast<int>(std::floor((hi[a] - lo[a]) / spacing)) + 1);
  return grid;
}

Volume render_average(const std::vector<Volume>& volumes,
                      const std::vector<HalfTransform>& transforms,
                      const OutputGrid& grid, RenderStats* stats) {
  if (volumes.size() != transforms.size())
    throw std::invalid_argument(
        "render_average: one transform per volume required");
  if (volumes.empty())
    throw std::invalid_argument("render_average: no volumes");

  Volume out;
  out.dims = grid.dims;
  out.spacing = {grid.spacing, grid.spacing, grid.spacing};
  out.origin = grid.origin;
  out.source_type = VoxelType::float32;
  out.voxels.assign(static_cast<std::size_t>(flat_size(grid.dims)), 0.0f);

  const double inv_n = 1.0 / static_cast<double>(volumes.size());
  std::vector<std::size_t> failed(parallel::thread_count(), 0);
  parallel::for_blocks(
      static_cast<std::size_t>(grid.dims[2]),
      [&](int block, std::size_t zb, std::size_t ze) {
        for (std::size_t k = zb; k < ze; ++k) {
          for (int j = 0; j < grid.dims[1]; ++j) {
            for (int i = 0; i < grid.dims[0]; ++i) {
              Vec3 q = out.position(i, j, static_cast<int>(k));
              double acc = 0.0;
              bool ok = true;
              for (std::size_t v = 0; v < volumes.size(); ++v) {
                auto p = transforms[v].invert_point(q);
                if (!p) {
                  ok = false;
                  break;
                }
                acc += volumes[v].sample_trilinear(*p);
              }
              if (ok) {
                out.at(i, j, static_cast<int>(k)) =
                    static_cast<float>(acc * inv_n);
              } else {
                ++failed[block];
              }
            }
          }
        }
      });

  std::size_t failed_total = 0;
  for (std::size_t f : failed) failed_total += f;
  if (stats) {
    stats->total_voxels = out.voxels.size();
    stats->failed_inversions = failed_total;
  }
  if (failed_total * 100 > out.voxels.size())
    std::fprintf(stderr,
                 "warning: %zu of %zu output voxels could not be inverted and "
                 "were masked to zero\n",
                 failed_total, out.voxels.size());
  return out;
}

}  // namespace groupreg
