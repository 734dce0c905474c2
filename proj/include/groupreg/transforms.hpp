#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "groupreg/core.hpp"

namespace groupreg {

// Anisotropic scale plus translation: p -> scale o p + translation.
struct LinearTransform {
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 translation{0.0, 0.0, 0.0};

  Vec3 apply(const Vec3& p) const { return scale.hadamard(p) + translation; }
  Vec3 invert(const Vec3& q) const { return (q - translation).cdiv(scale); }
};

// Uniform cubic B-spline displacement field on an isotropic control grid.
// A point with local coordinate u = (p - origin)/spacing in cell c = floor(u)
// is influenced by control points c..c+3 per axis, so the supported domain is
// [origin, origin + (dims - 3) * spacing]. Coefficients are displacement
// vectors in mm, stored row-major with x-fastest control index:
// coeffs[3 * (ix + dims[0] * (iy + dims[1] * iz)) + axis].
struct SplineGrid {
  Vec3 origin{0.0, 0.0, 0.0};
  double spacing = 1.0;
  Index3 dims{4, 4, 4};  // control points per axis, >= 4
  bool frozen = false;
  std::vector<double> coeffs;

  std::size_t control_count() const {
    return static_cast<std::size_t>(flat_size(dims));
  }
  std::size_t control_index(int ix, int iy, int iz) const {
    return static_cast<std::size_t>(ix) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(iy) +
                static_cast<std::size_t>(dims[1]) *
                    static_cast<std::size_t>(iz));
  }
  bool contains(const Vec3& p) const;
  // Largest absolute coefficient over all control points and axes.
  double max_abs_coefficient() const;
};

// Cubic B-spline basis values for local coordinate u in [0,1):
// w[0] = (1-u)^3/6, w[1] = (3u^3-6u^2+4)/6, w[2] = (-3u^3+3u^2+3u+1)/6,
// w[3] = u^3/6; they form a partition of unity.
std::array<double, 4> bspline_weights(double u);
std::array<double, 4> bspline_weight_derivatives(double u);  // d/du

// Tensor-product basis row of a point within a grid, factored per axis.
// Expanding wx (x) wy (x) wz gives the 64 nonzero entries of the row.
struct SplineBasis {
  bool valid = false;       // false when the point escapes the grid support
  Index3 base{0, 0, 0};     // first influencing control point per axis
  std::array<double, 4> wx{}, wy{}, wz{};
};

// Basis row of p in the grid; throws std::domain_error if p is outside the
// supported domain.
SplineBasis basis_row(const Vec3& p, const SplineGrid& grid);
// Non-throwing variant: returns an invalid basis outside the support.
SplineBasis basis_row_checked(const Vec3& p, const SplineGrid& grid);

// Displacement contributed by a grid at a precomputed basis row.
Vec3 grid_displacement(const SplineGrid& grid, const SplineBasis& basis);

// A grid keeps the stacked transform diffeomorphic when every control
// displacement component stays below 0.4 * spacing.
bool diffeo_ok(const SplineGrid& grid);

// Half-transform of one image into the common space: the linear part followed
// by the composition of the spline grids in order (earlier grids were frozen
// first). Points that leave a grid's support pass through it unchanged.
struct HalfTransform {
  LinearTransform linear;
  std::vector<SplineGrid> grids;

  Vec3 apply(const Vec3& p) const;
  // Also reports whether any grid evaluation fell outside its support.
  Vec3 apply_checked(const Vec3& p, bool* escaped) const;

  // Determinant of the spatial Jacobian at p (chain rule through the stack).
  double jacobian_determinant(const Vec3& p) const;

  // Fixed-point inversion: p <- p - (apply(p) - q) from linear^-1(q), stopping
  // at 1e-4 mm or 100 iterations; nullopt when it fails to converge.
  std::optional<Vec3> invert_point(const Vec3& q) const;
};

// JSON transform file with version, image_id, the linear part and the grid
// stack (origin, spacing, dims, frozen flag, row-major coefficients in mm).
void save_transform(const std::string& path, const HalfTransform& t,
                    int image_id);
HalfTransform load_transform(const std::string& path, int* image_id = nullptr);

}  // namespace groupreg
