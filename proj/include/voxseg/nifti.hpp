#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "voxseg/common.hpp"

namespace voxseg {

// NIfTI-1 header, 348 bytes.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;    /* MUST be 348 */
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];        /* dim[0] = rank, dim[1..3] = nx,ny,nz */
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;      /* 2=uint8, 4=int16, 8=int32, 16=float32, 64=float64 */
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];            /* rows of the voxel->mm affine */
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];              /* "n+1\0" */
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum NiftiDtype : std::int16_t {
  kNiftiUint8 = 2,
  kNiftiInt16 = 4,
  kNiftiInt32 = 8,
  kNiftiFloat32 = 16,
  kNiftiFloat64 = 64,
};

// 4x4 voxel->world affine, row-major, last row (0,0,0,1).
using Affine = std::array<float, 16>;

inline Affine identity_affine() {
  Affine a{};
  a[0] = a[5] = a[10] = a[15] = 1.0f;
  return a;
}

inline double affine_det3(const Affine& a) {
  return double(a[0]) * (double(a[5]) * a[10] - double(a[6]) * a[9]) -
         double(a[1]) * (double(a[4]) * a[10] - double(a[6]) * a[8]) +
         double(a[2]) * (double(a[4]) * a[9] - double(a[5]) * a[8]);
}

// Voxel spacing in mm: L2 norm of each affine column.
inline std::array<double, 3> affine_spacing(const Affine& a) {
  std::array<double, 3> sp{};
  for (int c = 0; c < 3; ++c)
    sp[c] = std::sqrt(double(a[c]) * a[c] + double(a[4 + c]) * a[4 + c] +
                      double(a[8 + c]) * a[8 + c]);
  return sp;
}

// Raw volume as stored on disk. shape follows the axis order (nx,ny,nz);
// data is kept in the library convention: axis2 fastest.
struct NiftiVolume {
  Shape3 shape{0, 0, 0};
  Affine affine = identity_affine();
  std::int16_t dtype = kNiftiFloat32;
  std::vector<float> fdata;  // converted values, shape[2]-fastest layout
};

namespace detail {

template <class T>
inline void bswap(T& v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
}

inline void swap_header(Nifti1Header& h) {
  bswap(h.sizeof_hdr);
  bswap(h.extents);
  bswap(h.session_error);
  for (auto& v : h.dim) bswap(v);
  bswap(h.intent_p1); bswap(h.intent_p2); bswap(h.intent_p3);
  bswap(h.intent_code); bswap(h.datatype); bswap(h.bitpix); bswap(h.slice_start);
  for (auto& v : h.pixdim) bswap(v);
  bswap(h.vox_offset); bswap(h.scl_slope); bswap(h.scl_inter);
  bswap(h.slice_end);
  bswap(h.cal_max); bswap(h.cal_min); bswap(h.slice_duration); bswap(h.toffset);
  bswap(h.glmax); bswap(h.glmin);
  bswap(h.qform_code); bswap(h.sform_code);
  bswap(h.quatern_b); bswap(h.quatern_c); bswap(h.quatern_d);
  bswap(h.qoffset_x); bswap(h.qoffset_y); bswap(h.qoffset_z);
  for (auto& v : h.srow_x) bswap(v);
  for (auto& v : h.srow_y) bswap(v);
  for (auto& v : h.srow_z) bswap(v);
}

// gzread handles both plain and gzip-compressed files transparently.
inline std::vector<char> read_file(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw UnreadableFile(path);
  std::vector<char> out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw UnreadableFile(path + " (gz stream error)");
  return out;
}

inline void write_file(const std::string& path, const char* data, std::size_t n) {
  const bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path);
    std::size_t off = 0;
    while (off < n) {
      const unsigned chunk = unsigned(std::min<std::size_t>(n - off, 1u << 24));
      if (gzwrite(f, data + off, chunk) != int(chunk)) {
        gzclose(f);
        throw IoError("short write to " + path);
      }
      off += chunk;
    }
    gzclose(f);
  } else {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f.write(data, std::streamsize(n));
    if (!f) throw IoError("short write to " + path);
  }
}

}  // namespace detail

inline NiftiVolume read_nifti(const std::string& path) {
  const std::vector<char> raw = detail::read_file(path);
  if (raw.size() < sizeof(Nifti1Header)) throw CorruptFile(path + " (truncated header)");

  Nifti1Header h;
  std::memcpy(&h, raw.data(), sizeof(h));
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    detail::swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw CorruptFile(path + " (not a NIfTI-1 file)");
  }
  if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
    throw CorruptFile(path + " (bad magic)");
  if (h.dim[0] < 3 || h.dim[1] <= 0 || h.dim[2] <= 0 || h.dim[3] <= 0)
    throw CorruptFile(path + " (unsupported dimensionality)");
  for (int d = 4; d <= h.dim[0]; ++d)
    if (h.dim[d] > 1) throw CorruptFile(path + " (expected a 3D volume)");

  NiftiVolume vol;
  vol.shape = {h.dim[1], h.dim[2], h.dim[3]};
  vol.dtype = h.datatype;
  if (h.sform_code > 0) {
    for (int i = 0; i < 4; ++i) {
      vol.affine[i] = h.srow_x[i];
      vol.affine[4 + i] = h.srow_y[i];
      vol.affine[8 + i] = h.srow_z[i];
    }
    vol.affine[12] = vol.affine[13] = vol.affine[14] = 0.0f;
    vol.affine[15] = 1.0f;
  } else {
    vol.affine = identity_affine();
    vol.affine[0] = h.pixdim[1] != 0 ? h.pixdim[1] : 1.0f;
    vol.affine[5] = h.pixdim[2] != 0 ? h.pixdim[2] : 1.0f;
    vol.affine[10] = h.pixdim[3] != 0 ? h.pixdim[3] : 1.0f;
  }

  int elem = 0;
  switch (h.datatype) {
    case kNiftiUint8: elem = 1; break;
    case kNiftiInt16: elem = 2; break;
    case kNiftiInt32: elem = 4; break;
    case kNiftiFloat32: elem = 4; break;
    case kNiftiFloat64: elem = 8; break;
    default: throw CorruptFile(path + " (unsupported datatype " + std::to_string(h.datatype) + ")");
  }
  const std::int64_t n = numel(vol.shape);
  const std::size_t off = std::size_t(h.vox_offset);
  if (off < 348 || raw.size() < off + std::size_t(n) * elem)
    throw CorruptFile(path + " (truncated data)");

  const char* src = raw.data() + off;
  vol.fdata.resize(std::size_t(n));
  const int nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2];
  auto convert = [&](auto read_one) {
    // file layout: x fastest; library layout: z fastest
    for (std::int64_t z = 0; z < nz; ++z)
      for (std::int64_t y = 0; y < ny; ++y)
        for (std::int64_t x = 0; x < nx; ++x) {
          const std::int64_t fi = x + nx * (y + ny * z);
          vol.fdata[std::size_t((x * ny + y) * nz + z)] = read_one(src + fi * elem);
        }
  };
  switch (h.datatype) {
    case kNiftiUint8:
      convert([&](const char* p) { return float(*reinterpret_cast<const std::uint8_t*>(p)); });
      break;
    case kNiftiInt16:
      convert([&](const char* p) {
        std::int16_t v; std::memcpy(&v, p, 2);
        if (swapped) detail::bswap(v);
        return float(v);
      });
      break;
    case kNiftiInt32:
      convert([&](const char* p) {
        std::int32_t v; std::memcpy(&v, p, 4);
        if (swapped) detail::bswap(v);
        return float(v);
      });
      break;
    case kNiftiFloat32:
      convert([&](const char* p) {
        float v; std::memcpy(&v, p, 4);
        if (swapped) detail::bswap(v);
        return v;
      });
      break;
    case kNiftiFloat64:
      convert([&](const char* p) {
        double v; std::memcpy(&v, p, 8);
        if (swapped) detail::bswap(v);
        return float(v);
      });
      break;
  }
  // scl_slope/inter scaling (slope 0 means unscaled)
  if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f))
    for (auto& v : vol.fdata) v = v * h.scl_slope + h.scl_inter;
  return vol;
}

namespace detail {

inline Nifti1Header make_header(const Shape3& shape, const Affine& affine,
                                std::int16_t dtype, std::int16_t bitpix) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = std::int16_t(shape[0]);
  h.dim[2] = std::int16_t(shape[1]);
  h.dim[3] = std::int16_t(shape[2]);
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  h.datatype = dtype;
  h.bitpix = bitpix;
  const auto sp = affine_spacing(affine);
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[1 + i] = float(sp[i]);
  h.vox_offset = 352.0f;  // 348 + 4-byte extension flag
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // NIFTI_UNITS_MM
  h.sform_code = 1;
  h.qform_code = 0;
  for (int i = 0; i < 4; ++i) {
    h.srow_x[i] = affine[i];
    h.srow_y[i] = affine[4 + i];
    h.srow_z[i] = affine[8 + i];
  }
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

template <class T>
inline void write_nifti(const std::string& path, const Shape3& shape, const Affine& affine,
                        const T* data, std::int16_t dtype, std::int16_t bitpix) {
  const Nifti1Header h = make_header(shape, affine, dtype, bitpix);
  const std::int64_t n = numel(shape);
  std::vector<char> out(352 + std::size_t(n) * sizeof(T), 0);
  std::memcpy(out.data(), &h, sizeof(h));
  T* dst = reinterpret_cast<T*>(out.data() + 352);
  const int nx = shape[0], ny = shape[1], nz = shape[2];
  for (std::int64_t z = 0; z < nz; ++z)
    for (std::int64_t y = 0; y < ny; ++y)
      for (std::int64_t x = 0; x < nx; ++x)
        dst[x + nx * (y + ny * z)] = data[std::size_t((x * ny + y) * nz + z)];
  write_file(path, out.data(), out.size());
}

}  // namespace detail

inline void write_nifti_f32(const std::string& path, const Shape3& shape,
                            const Affine& affine, const float* data) {
  detail::write_nifti<float>(path, shape, affine, data, kNiftiFloat32, 32);
}

inline void write_nifti_u8(const std::string& path, const Shape3& shape,
                           const Affine& affine, const std::uint8_t* data) {
  detail::write_nifti<std::uint8_t>(path, shape, affine, data, kNiftiUint8, 8);
}

}  // namespace voxseg
