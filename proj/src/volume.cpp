#include "groupreg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace groupreg {

namespace {

namespace fs = std::filesystem;

// Little-endian readers; the supported formats and the target platforms are
// both little-endian so plain memcpy does the job.
template <typename T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void write_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

constexpr int kNiftiHeaderSize = 348;
constexpr short kDtUint8 = 2;
constexpr short kDtInt16 = 4;
constexpr short kDtInt32 = 8;
constexpr short kDtFloat32 = 16;

short nifti_code(VoxelType t) {
  switch (t) {
    case VoxelType::uint8: return kDtUint8;
    case VoxelType::int16: return kDtInt16;
    case VoxelType::int32: return kDtInt32;
    case VoxelType::float32: return kDtFloat32;
  }
  return kDtFloat32;
}

VoxelType voxel_type_from_code(short code, const std::string& path) {
  switch (code) {
    case kDtUint8: return VoxelType::uint8;
    case kDtInt16: return VoxelType::int16;
    case kDtInt32: return VoxelType::int32;
    case kDtFloat32: return VoxelType::float32;
    default:
      throw std::runtime_error(path + ": unsupported NIfTI datatype code " +
                               std::to_string(code));
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<float> decode_voxels(const unsigned char* bytes, std::size_t len,
                                 VoxelType t, std::size_t count,
                                 const std::string& path) {
  if (len < count * voxel_type_size(t))
    throw std::runtime_error(path + ": voxel payload truncated");
  std::vector<float> out(count);
  switch (t) {
    case VoxelType::uint8:
      for (std::size_t i = 0; i < count; ++i) out[i] = bytes[i];
      break;
    case VoxelType::int16:
      for (std::size_t i = 0; i < count; ++i)
        out[i] = read_le<std::int16_t>(bytes + 2 * i);
      break;
    case VoxelType::int32:
      for (std::size_t i = 0; i < count; ++i)
        out[i] = static_cast<float>(read_le<std::int32_t>(bytes + 4 * i));
      break;
    case VoxelType::float32:
      for (std::size_t i = 0; i < count; ++i)
        out[i] = read_le<float>(bytes + 4 * i);
      break;
  }
  return out;
}

std::string encode_voxels(const std::vector<float>& voxels, VoxelType t) {
  std::string out;
  out.reserve(voxels.size() * voxel_type_size(t));
  switch (t) {
    case VoxelType::uint8:
      for (float v : voxels)
        out.push_back(static_cast<char>(static_cast<unsigned char>(
            std::clamp(std::llround(v), 0ll, 255ll))));
      break;
    case VoxelType::int16:
      for (float v : voxels)
        write_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(
                                        std::llround(v), -32768ll, 32767ll)));
      break;
    case VoxelType::int32:
      for (float v : voxels)
        write_le<std::int32_t>(
            out, static_cast<std::int32_t>(std::clamp(
                     std::llround(v), -2147483648ll, 2147483647ll)));
      break;
    case VoxelType::float32:
      for (float v : voxels) write_le<float>(out, v);
      break;
  }
  return out;
}

Volume load_nifti(const std::string& path, const std::string& bytes) {
  auto info = parse_nifti_header(
      reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  Volume v;
  v.dims = info.dims;
  v.spacing = info.spacing;
  v.origin = info.origin;
  v.source_type = info.dtype;
  std::size_t count = static_cast<std::size_t>(flat_size(v.dims));
  if (info.separate_data) {
    fs::path img = fs::path(path);
    img.replace_extension(".img");
    std::string payload = read_file(img.string());
    v.voxels = decode_voxels(
        reinterpret_cast<const unsigned char*>(payload.data()), payload.size(),
        v.source_type, count, img.string());
  } else {
    if (info.data_offset > bytes.size())
      throw std::runtime_error(path + ": vox_offset beyond end of file");
    v.voxels = decode_voxels(
        reinterpret_cast<const unsigned char*>(bytes.data()) + info.data_offset,
        bytes.size() - info.data_offset, v.source_type, count, path);
  }
  return v;
}

VoxelType parse_dtype_name(const std::string& name, const std::string& path) {
  if (name == "uint8") return VoxelType::uint8;
  if (name == "int16") return VoxelType::int16;
  if (name == "int32") return VoxelType::int32;
  if (name == "float32") return VoxelType::float32;
  throw std::runtime_error(path + ": unsupported dtype '" + name + "'");
}

Volume load_raw(const std::string& path, const std::string& text) {
  Volume v;
  bool have_dims = false, have_dtype = false;
  std::string data_file;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string key = line.substr(0, colon);
    std::istringstream value(line.substr(colon + 1));
    if (key == "dims") {
      if (!(value >> v.dims[0] >> v.dims[1] >> v.dims[2]))
        throw std::runtime_error(path + ": malformed dims line");
      have_dims = true;
    } else if (key == "spacing") {
      if (!(value >> v.spacing.x >> v.spacing.y >> v.spacing.z))
        throw std::runtime_error(path + ": malformed spacing line");
    } else if (key == "origin") {
      if (!(value >> v.origin.x >> v.origin.y >> v.origin.z))
        throw std::runtime_error(path + ": malformed origin line");
    } else if (key == "dtype") {
      std::string name;
      value >> name;
      v.source_type = parse_dtype_name(name, path);
      have_dtype = true;
    } else if (key == "data") {
      value >> data_file;
    }
  }
  if (!have_dims || !have_dtype || data_file.empty())
    throw std::runtime_error(path + ": header needs dims, dtype and data keys");
  if (v.dims[0] <= 0 || v.dims[1] <= 0 || v.dims[2] <= 0)
    throw std::runtime_error(path + ": non-positive dimensions");
  fs::path payload_path = fs::path(path).parent_path() / data_file;
  std::string payload = read_file(payload_path.string());
  v.voxels = decode_voxels(
      reinterpret_cast<const unsigned char*>(payload.data()), payload.size(),
      v.source_type, static_cast<std::size_t>(flat_size(v.dims)),
      payload_path.string());
  return v;
}

void write_nifti(const std::string& path, const Volume& v) {
  std::string h(kNiftiHeaderSize, '\0');
  auto put = [&h](std::size_t offset, auto value) {
    std::memcpy(h.data() + offset, &value, sizeof(value));
  };
  put(0, std::int32_t{kNiftiHeaderSize});
  put(38, char{'r'});
  std::int16_t dim[8] = {3,
                         static_cast<std::int16_t>(v.dims[0]),
                         static_cast<std::int16_t>(v.dims[1]),
                         static_cast<std::int16_t>(v.dims[2]),
                         1, 1, 1, 1};
  std::memcpy(h.data() + 40, dim, sizeof(dim));
  put(70, nifti_code(v.source_type));
  put(72, static_cast<std::int16_t>(8 * voxel_type_size(v.source_type)));
  float pixdim[8] = {1.0f,
                     static_cast<float>(v.spacing.x),
                     static_cast<float>(v.spacing.y),
                     static_cast<float>(v.spacing.z),
                     1.0f, 1.0f, 1.0f, 1.0f};
  std::memcpy(h.data() + 76, pixdim, sizeof(pixdim));
  put(108, 352.0f);  // vox_offset
  put(112, 1.0f);    // scl_slope
  put(252, std::int16_t{1});  // qform_code, identity rotation
  put(268, static_cast<float>(v.origin.x));
  put(272, static_cast<float>(v.origin.y));
  put(276, static_cast<float>(v.origin.z));
  put(254, std::int16_t{1});  // sform_code
  float srow_x[4] = {static_cast<float>(v.spacing.x), 0, 0,
                     static_cast<float>(v.origin.x)};
  float srow_y[4] = {0, static_cast<float>(v.spacing.y), 0,
                     static_cast<float>(v.origin.y)};
  float srow_z[4] = {0, 0, static_cast<float>(v.spacing.z),
                     static_cast<float>(v.origin.z)};
  std::memcpy(h.data() + 280, srow_x, sizeof(srow_x));
  std::memcpy(h.data() + 296, srow_y, sizeof(srow_y));
  std::memcpy(h.data() + 312, srow_z, sizeof(srow_z));
  std::memcpy(h.data() + 344, "n+1\0", 4);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const char pad[4] = {0, 0, 0, 0};
  out.write(pad, 4);  // up to vox_offset = 352
  std::string payload = encode_voxels(v.voxels, v.source_type);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

void write_raw(const std::string& path, const Volume& v) {
  fs::path data_path = fs::path(path);
  data_path.replace_extension(".bin");
  std::ostringstream header;
  header << "dims: " << v.dims[0] << " " << v.dims[1] << " " << v.dims[2]
         << "\n";
  header << "spacing: " << v.spacing.x << " " << v.spacing.y << " "
         << v.spacing.z << "\n";
  header << "origin: " << v.origin.x << " " << v.origin.y << " " << v.origin.z
         << "\n";
  header << "dtype: " << voxel_type_name(v.source_type) << "\n";
  header << "data: " << data_path.filename().string() << "\n";
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << header.str();
  std::ofstream data(data_path, std::ios::binary);
  if (!data)
    throw std::runtime_error(data_path.string() + ": cannot open for writing");
  std::string payload = encode_voxels(v.voxels, v.source_type);
  data.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!data) throw std::runtime_error(data_path.string() + ": write failed");
}

}  // namespace

const char* voxel_type_name(VoxelType t) {
  switch (t) {
    case VoxelType::uint8: return "uint8";
    case VoxelType::int16: return "int16";
    case VoxelType::int32: return "int32";
    case VoxelType::float32: return "float32";
  }
  return "float32";
}

std::size_t voxel_type_size(VoxelType t) {
  switch (t) {
    case VoxelType::uint8: return 1;
    case VoxelType::int16: return 2;
    case VoxelType::int32: return 4;
    case VoxelType::float32: return 4;
  }
  return 4;
}

double Volume::sample_trilinear(const Vec3& p) const {
  Vec3 v = voxel_coordinates(p);
  if (!(v.x >= 0.0 && v.y >= 0.0 && v.z >= 0.0 && v.x <= dims[0] - 1 &&
        v.y <= dims[1] - 1 && v.z <= dims[2] - 1))
    return 0.0;
  int i0 = std::min(static_cast<int>(v.x), dims[0] - 2 >= 0 ? dims[0] - 2 : 0);
  int j0 = std::min(static_cast<int>(v.y), dims[1] - 2 >= 0 ? dims[1] - 2 : 0);
  int k0 = std::min(static_cast<int>(v.z), dims[2] - 2 >= 0 ? dims[2] - 2 : 0);
  double fx = v.x - i0, fy = v.y - j0, fz = v.z - k0;
  int i1 = std::min(i0 + 1, dims[0] - 1);
  int j1 = std::min(j0 + 1, dims[1] - 1);
  int k1 = std::min(k0 + 1, dims[2] - 1);
  double c000 = at(i0, j0, k0), c100 = at(i1, j0, k0);
  double c010 = at(i0, j1, k0), c110 = at(i1, j1, k0);
  double c001 = at(i0, j0, k1), c101 = at(i1, j0, k1);
  double c011 = at(i0, j1, k1), c111 = at(i1, j1, k1);
  double c00 = c000 * (1 - fx) + c100 * fx;
  double c10 = c010 * (1 - fx) + c110 * fx;
  double c01 = c001 * (1 - fx) + c101 * fx;
  double c11 = c011 * (1 - fx) + c111 * fx;
  double c0 = c00 * (1 - fy) + c10 * fy;
  double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

double IntegralVolume::box_sum(Index3 lo, Index3 hi) const {
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(lo[a], 0);
    hi[a] = std::min(hi[a], dims[a] - 1);
    if (lo[a] > hi[a]) return 0.0;
  }
  int a0 = lo[0], a1 = lo[1], a2 = lo[2];
  int b0 = hi[0] + 1, b1 = hi[1] + 1, b2 = hi[2] + 1;
  return sums[sum_index(b0, b1, b2)] - sums[sum_index(a0, b1, b2)] -
         sums[sum_index(b0, a1, b2)] - sums[sum_index(b0, b1, a2)] +
         sums[sum_index(a0, a1, b2)] + sums[sum_index(a0, b1, a2)] +
         sums[sum_index(b0, a1, a2)] - sums[sum_index(a0, a1, a2)];
}

IntegralVolume build_integral(const Volume& v) {
  IntegralVolume iv;
  iv.dims = v.dims;
  iv.spacing = v.spacing;
  iv.origin = v.origin;
  const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  iv.sums.assign(static_cast<std::size_t>(nx + 1) * (ny + 1) * (nz + 1), 0.0);
  for (int k = 0; k < nz; ++k) {
    for (int j = 0; j < ny; ++j) {
      double row = 0.0;  // running sum along x of the current (j,k) line
      for (int i = 0; i < nx; ++i) {
        row += v.at(i, j, k);
        // S(i+1,j+1,k+1) = row + S(i+1,j,k+1) + S(i+1,j+1,k) - S(i+1,j,k)
        iv.sums[iv.sum_index(i + 1, j + 1, k + 1)] =
            row + iv.sums[iv.sum_index(i + 1, j, k + 1)] +
            iv.sums[iv.sum_index(i + 1, j + 1, k)] -
            iv.sums[iv.sum_index(i + 1, j, k)];
      }
    }
  }
  return iv;
}

NiftiHeaderInfo parse_nifti_header(const unsigned char* bytes,
                                   std::size_t len) {
  if (len < kNiftiHeaderSize)
    throw std::runtime_error("NIfTI header shorter than 348 bytes");
  if (read_le<std::int32_t>(bytes) != kNiftiHeaderSize)
    throw std::runtime_error("not a little-endian NIfTI-1 header");
  const char* magic = reinterpret_cast<const char*>(bytes + 344);
  bool single = std::memcmp(magic, "n+1\0", 4) == 0;
  bool pair = std::memcmp(magic, "ni1\0", 4) == 0;
  if (!single && !pair) throw std::runtime_error("bad NIfTI magic");

  NiftiHeaderInfo info;
  std::int16_t ndim = read_le<std::int16_t>(bytes + 40);
  if (ndim != 3)
    throw std::runtime_error("only 3-dimensional NIfTI volumes are supported");
  for (int a = 0; a < 3; ++a) {
    std::int16_t d = read_le<std::int16_t>(bytes + 40 + 2 * (a + 1));
    if (d <= 0) throw std::runtime_error("non-positive NIfTI dimension");
    info.dims[a] = d;
  }
  info.dtype = voxel_type_from_code(read_le<std::int16_t>(bytes + 70), "NIfTI");
  for (int a = 0; a < 3; ++a) {
    float pd = read_le<float>(bytes + 76 + 4 * (a + 1));
    double s = std::abs(static_cast<double>(pd));
    (a == 0 ? info.spacing.x : a == 1 ? info.spacing.y : info.spacing.z) =
        s > 0.0 ? s : 1.0;
  }
  std::int16_t qform = read_le<std::int16_t>(bytes + 252);
  std::int16_t sform = read_le<std::int16_t>(bytes + 254);
  if (sform > 0) {
    info.origin = {read_le<float>(bytes + 280 + 12),
                   read_le<float>(bytes + 296 + 12),
                   read_le<float>(bytes + 312 + 12)};
  } else if (qform > 0) {
    info.origin = {read_le<float>(bytes + 268), read_le<float>(bytes + 272),
                   read_le<float>(bytes + 276)};
  }
  info.separate_data = pair;
  if (single) {
    float off = read_le<float>(bytes + 108);
    info.data_offset =
        static_cast<std::uint64_t>(std::max(off, 352.0f));
  }
  return info;
}

Volume load_volume(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() >= 4 &&
      read_le<std::int32_t>(reinterpret_cast<const unsigned char*>(
          bytes.data())) == kNiftiHeaderSize)
    return load_nifti(path, bytes);
  return load_raw(path, bytes);
}

void write_volume(const std::string& path, const Volume& v) {
  if (static_cast<std::size_t>(flat_size(v.dims)) != v.voxels.size())
    throw std::invalid_argument(path + ": dims do not match voxel count");
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".nii")
    write_nifti(path, v);
  else
    write_raw(path, v);
}

}  // namespace groupreg
