#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace groupreg {

// All geometry is in physical millimeters unless a name says otherwise.
struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(double k) const { return {x * k, y * k, z * k}; }
  Vec3 operator/(double k) const { return {x / k, y / k, z / k}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  Vec3& operator-=(const Vec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }

  // Componentwise (Hadamard) product and quotient.
  Vec3 hadamard(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
  Vec3 cdiv(const Vec3& o) const { return {x / o.x, y / o.y, z / o.z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double squared_norm() const { return dot(*this); }
  double norm() const { return std::sqrt(squared_norm()); }

  Vec3 cwise_min(const Vec3& o) const {
    return {std::min(x, o.x), std::min(y, o.y), std::min(z, o.z)};
  }
  Vec3 cwise_max(const Vec3& o) const {
    return {std::max(x, o.x), std::max(y, o.y), std::max(z, o.z)};
  }
  double max_component() const { return std::max(x, std::max(y, z)); }
  double min_component() const { return std::min(x, std::min(y, z)); }
};

inline Vec3 operator*(double k, const Vec3& v) { return v * k; }

using Index3 = std::array<int, 3>;

inline std::int64_t flat_size(const Index3& d) {
  return static_cast<std::int64_t>(d[0]) * d[1] * d[2];
}

}  // namespace groupreg
