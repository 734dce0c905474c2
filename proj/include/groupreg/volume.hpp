#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "groupreg/core.hpp"

namespace groupreg {

enum class VoxelType { uint8, int16, int32, float32 };

const char* voxel_type_name(VoxelType t);
std::size_t voxel_type_size(VoxelType t);

// Scalar volume with x-fastest voxel layout. The physical position of voxel
// (i,j,k) is origin + spacing*(i,j,k); origin is the center of voxel (0,0,0).
struct Volume {
  Index3 dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  VoxelType source_type = VoxelType::float32;
  std::vector<float> voxels;

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) +
                static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }
  float at(int i, int j, int k) const { return voxels[index(i, j, k)]; }
  float& at(int i, int j, int k) { return voxels[index(i, j, k)]; }

  Vec3 position(int i, int j, int k) const {
    return {origin.x + spacing.x * i, origin.y + spacing.y * j,
            origin.z + spacing.z * k};
  }
  // Continuous voxel coordinates of a physical point.
  Vec3 voxel_coordinates(const Vec3& p) const {
    return (p - origin).cdiv(spacing);
  }

  // Trilinear interpolation at a physical point; zero outside the volume.
  double sample_trilinear(const Vec3& p) const;
};

// Summed-volume table: sums has (dims+1) entries per axis so that
// box_sum(lo, hi) needs only eight reads. Carries the source geometry so
// detectors and descriptors can map physical points to voxels.
struct IntegralVolume {
  Index3 dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<double> sums;

  std::size_t sum_index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0] + 1) *
               (static_cast<std::size_t>(j) +
                static_cast<std::size_t>(dims[1] + 1) *
                    static_cast<std::size_t>(k));
  }

  // Inclusive box [lo, hi] clamped to the volume; an empty intersection
  // yields 0 so border filters need no special casing.
  double box_sum(Index3 lo, Index3 hi) const;
};

IntegralVolume build_integral(const Volume& v);

// Geometry and payload description extracted from a NIfTI-1 header.
struct NiftiHeaderInfo {
  Index3 dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  VoxelType dtype = VoxelType::float32;
  std::uint64_t data_offset = 0;
  bool separate_data = false;  // "ni1\0": payload lives in a sibling .img
};

// Parses the 348-byte NIfTI-1 header (little-endian subset: dim[0] == 3,
// scalar datatypes, sform/qform reduced to scale+translation).
NiftiHeaderInfo parse_nifti_header(const unsigned char* bytes, std::size_t len);

// Loads either a NIfTI-1 file (sniffed by magic) or a text-header raw volume
// (`key: value` lines naming dims/spacing/origin/dtype and the payload file).
Volume load_volume(const std::string& path);

// Writes NIfTI-1 for .nii paths, the raw text-header format otherwise. The
// payload keeps the volume's source_type so round trips are byte-identical.
void write_volume(const std::string& path, const Volume& v);

}  // namespace groupreg
