#include "groupreg/transforms.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace groupreg {

std::array<double, 4> bspline_weights(double u) {
  double v = 1.0 - u;
  return {v * v * v / 6.0, (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
          (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
          u * u * u / 6.0};
}

std::array<double, 4> bspline_weight_derivatives(double u) {
  double v = 1.0 - u;
  return {-v * v / 2.0, (3.0 * u * u - 4.0 * u) / 2.0,
          (-3.0 * u * u + 2.0 * u + 1.0) / 2.0, u * u / 2.0};
}

bool SplineGrid::contains(const Vec3& p) const {
  Vec3 u = (p - origin) / spacing;
  for (int a = 0; a < 3; ++a) {
    if (!(u[a] >= 0.0 && u[a] <= dims[a] - 3)) return false;
  }
  return true;
}

double SplineGrid::max_abs_coefficient() const {
  double m = 0.0;
  for (double c : coeffs) m = std::max(m, std::abs(c));
  return m;
}

namespace {

// Local cell and fractional coordinate along one axis; points exactly on the
// upper support bound borrow the last interior cell with u = 1.
bool locate(double x, double origin, double spacing, int dim, int* cell,
            double* u) {
  double t = (x - origin) / spacing;
  if (!(t >= 0.0 && t <= dim - 3)) return false;
  int c = static_cast<int>(t);
  if (c > dim - 4) c = dim - 4;
  *cell = c;
  *u = t - c;
  return true;
}

}  // namespace

SplineBasis basis_row_checked(const Vec3& p, const SplineGrid& grid) {
  SplineBasis b;
  double ux, uy, uz;
  if (!locate(p.x, grid.origin.x, grid.spacing, grid.dims[0], &b.base[0], &ux))
    return b;
  if (!locate(p.y, grid.origin.y, grid.spacing, grid.dims[1], &b.base[1], &uy))
    return b;
  if (!locate(p.z, grid.origin.z, grid.spacing, grid.dims[2], &b.base[2], &uz))
    return b;
  b.wx = bspline_weights(ux);
  b.wy = bspline_weights(uy);
  b.wz = bspline_weights(uz);
  b.valid = true;
  return b;
}

SplineBasis basis_row(const Vec3& p, const SplineGrid& grid) {
  SplineBasis b = basis_row_checked(p, grid);
  if (!b.valid)
    throw std::domain_error("point outside the spline grid support");
  return b;
}

Vec3 grid_displacement(const SplineGrid& grid, const SplineBasis& basis) {
  if (!basis.valid) return {};
  Vec3 d;
  for (int c = 0; c < 4; ++c) {
    for (int bidx = 0; bidx < 4; ++bidx) {
      double wyz = basis.wy[bidx] * basis.wz[c];
      if (wyz == 0.0) continue;
      std::size_t row0 = grid.control_index(
          basis.base[0], basis.base[1] + bidx, basis.base[2] + c);
      const double* coeff = grid.coeffs.data() + 3 * row0;
      for (int a = 0; a < 4; ++a) {
        double w = basis.wx[a] * wyz;
        d.x += w * coeff[3 * a + 0];
        d.y += w * coeff[3 * a + 1];
        d.z += w * coeff[3 * a + 2];
      }
    }
  }
  return d;
}

bool diffeo_ok(const SplineGrid& grid) {
  return grid.max_abs_coefficient() < 0.4 * grid.spacing;
}

Vec3 HalfTransform::apply(const Vec3& p) const {
  Vec3 q = linear.apply(p);
  for (const auto& grid : grids) {
    SplineBasis b = basis_row_checked(q, grid);
    if (b.valid) q += grid_displacement(grid, b);
  }
  return q;
}

Vec3 HalfTransform::apply_checked(const Vec3& p, bool* escaped) const {
  bool out = false;
  Vec3 q = linear.apply(p);
  for (const auto& grid : grids) {
    SplineBasis b = basis_row_checked(q, grid);
    if (b.valid)
      q += grid_displacement(grid, b);
    else
      out = true;
  }
  if (escaped) *escaped = out;
  return q;
}

namespace {

// 3x3 Jacobian of one grid's displacement at a located point, as the matrix
// G[r][c] = d disp_r / d q_c.
void grid_jacobian(const SplineGrid& grid, const Vec3& q, double G[3][3]) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) G[r][c] = 0.0;
  int cx, cy, cz;
  double ux, uy, uz;
  if (!locate(q.x, grid.origin.x, grid.spacing, grid.dims[0], &cx, &ux)) return;
  if (!locate(q.y, grid.origin.y, grid.spacing, grid.dims[1], &cy, &uy)) return;
  if (!locate(q.z, grid.origin.z, grid.spacing, grid.dims[2], &cz, &uz)) return;
  auto wx = bspline_weights(ux), wy = bspline_weights(uy),
       wz = bspline_weights(uz);
  auto dx = bspline_weight_derivatives(ux), dy = bspline_weight_derivatives(uy),
       dz = bspline_weight_derivatives(uz);
  double inv_g = 1.0 / grid.spacing;
  for (int c = 0; c < 4; ++c) {
    for (int b = 0; b < 4; ++b) {
      std::size_t row0 = grid.control_index(cx, cy + b, cz + c);
      const double* coeff = grid.coeffs.data() + 3 * row0;
      for (int a = 0; a < 4; ++a) {
        double w_x = dx[a] * wy[b] * wz[c] * inv_g;
        double w_y = wx[a] * dy[b] * wz[c] * inv_g;
        double w_z = wx[a] * wy[b] * dz[c] * inv_g;
        for (int r = 0; r < 3; ++r) {
          double cr = coeff[3 * a + r];
          G[r][0] += w_x * cr;
          G[r][1] += w_y * cr;
          G[r][2] += w_z * cr;
        }
      }
    }
  }
}

}  // namespace

double HalfTransform::jacobian_determinant(const Vec3& p) const {
  // J = J_gridK(q_{K-1}) ... J_grid1(q_0) diag(scale) by the chain rule.
  double J[3][3] = {{linear.scale.x, 0, 0},
                    {0, linear.scale.y, 0},
                    {0, 0, linear.scale.z}};
  Vec3 q = linear.apply(p);
  for (const auto& grid : grids) {
    double G[3][3];
    grid_jacobian(grid, q, G);
    double M[3][3];  // (I + G) * J
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        double acc = J[r][c];
        for (int k = 0; k < 3; ++k) acc += G[r][k] * J[k][c];
        M[r][c] = acc;
      }
    }
    std::memcpy(J, M, sizeof(M));
    SplineBasis b = basis_row_checked(q, grid);
    if (b.valid) q += grid_displacement(grid, b);
  }
  return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
         J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
         J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

std::optional<Vec3> HalfTransform::invert_point(const Vec3& q) const {
  constexpr double kTol = 1e-4;
  constexpr int kMaxIterations = 100;
  Vec3 p = linear.invert(q);
  for (int it = 0; it < kMaxIterations; ++it) {
    Vec3 residual = apply(p) - q;
    if (residual.norm() < kTol) return p;
    p -= residual;
  }
  if ((apply(p) - q).norm() < kTol) return p;
  return std::nullopt;
}

void save_transform(const std::string& path, const HalfTransform& t,
                    int image_id) {
  nlohmann::json j;
  j["format"] = "groupreg-transform";
  j["version"] = 1;
  j["image_id"] = image_id;
  j["linear"] = {
      {"scale", {t.linear.scale.x, t.linear.scale.y, t.linear.scale.z}},
      {"translation",
       {t.linear.translation.x, t.linear.translation.y,
        t.linear.translation.z}}};
  nlohmann::json grids = nlohmann::json::array();
  for (const auto& g : t.grids) {
    nlohmann::json jg;
    jg["origin"] = {g.origin.x, g.origin.y, g.origin.z};
    jg["spacing"] = g.spacing;
    jg["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
    jg["frozen"] = g.frozen;
    jg["coeffs"] = g.coeffs;
    grids.push_back(std::move(jg));
  }
  j["grids"] = std::move(grids);
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << j.dump(1) << "\n";
  if (!out) throw std::runtime_error(path + ": write failed");
}

HalfTransform load_transform(const std::string& path, int* image_id) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": not valid JSON (" + e.what() + ")");
  }
  try {
    if (j.at("format") != "groupreg-transform" || j.at("version") != 1)
      throw std::runtime_error(path + ": unrecognized transform file");
    HalfTransform t;
    auto& lin = j.at("linear");
    auto s = lin.at("scale");
    auto tr = lin.at("translation");
    t.linear.scale = {s.at(0), s.at(1), s.at(2)};
    t.linear.translation = {tr.at(0), tr.at(1), tr.at(2)};
    for (const auto& jg : j.at("grids")) {
      SplineGrid g;
      auto o = jg.at("origin");
      g.origin = {o.at(0), o.at(1), o.at(2)};
      g.spacing = jg.at("spacing");
      auto d = jg.at("dims");
      g.dims = {d.at(0), d.at(1), d.at(2)};
      g.frozen = jg.at("frozen");
      g.coeffs = jg.at("coeffs").get<std::vector<double>>();
      if (g.dims[0] < 4 || g.dims[1] < 4 || g.dims[2] < 4)
        throw std::runtime_error(path + ": grid needs at least 4^3 controls");
      if (g.coeffs.size() != 3 * g.control_count())
        throw std::runtime_error(path + ": coefficient count mismatch");
      if (!(g.spacing > 0.0))
        throw std::runtime_error(path + ": non-positive grid spacing");
      t.grids.push_back(std::move(g));
    }
    if (image_id) *image_id = j.at("image_id");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": malformed transform file (" +
                             std::string(e.what()) + ")");
  }
}

}  // namespace groupreg
