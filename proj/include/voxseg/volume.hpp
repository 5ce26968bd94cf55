#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/nifti.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

inline constexpr int kNumModalities = 4;
inline constexpr int kNumClasses = 4;

// Channel order is fixed; BraTS-style file suffixes in the same order.
enum class Modality { T1 = 0, T1ce = 1, T2 = 2, Flair = 3 };
inline constexpr std::array<const char*, 4> kModalitySuffix{"t1n", "t1c", "t2w", "t2f"};

struct SpatialMeta {
  Shape3 original_shape{0, 0, 0};
  Affine affine = identity_affine();
  std::optional<Shape3> crop_offset;  // offset of the crop origin in the original grid

  void validate() const {
    if (std::abs(affine_det3(affine)) <= 0.0)
      throw DataError("SpatialMeta: affine is not invertible");
  }
};

struct MultiModalVolume {
  Tensor<float> data;  // (4, D, H, W)
  SpatialMeta meta;

  Shape3 shape() const { return {data.d(), data.h(), data.w()}; }
};

struct LabelMask {
  std::vector<std::uint8_t> data;  // (D, H, W), values 0..3
  Shape3 shape{0, 0, 0};
  SpatialMeta meta;

  std::uint8_t& at(int z, int y, int x) {
    return data[std::size_t((std::int64_t(z) * shape[1] + y) * shape[2] + x)];
  }
  const std::uint8_t& at(int z, int y, int x) const {
    return data[std::size_t((std::int64_t(z) * shape[1] + y) * shape[2] + x)];
  }
};

struct RegionMasks {
  // wt = labels {1,2,3}, tc = {1,3}, et = {3}; same grid as the source mask
  std::vector<std::uint8_t> wt, tc, et;
  Shape3 shape{0, 0, 0};
};

inline void validate_labels(const std::vector<std::uint8_t>& data) {
  for (std::uint8_t v : data)
    if (v > 3) throw BadLabel("mask contains value " + std::to_string(int(v)));
}

// ---------------------------------------------------------------------------
// load_subject
// ---------------------------------------------------------------------------

inline std::pair<MultiModalVolume, std::optional<LabelMask>> load_subject(
    const std::array<std::string, 4>& modality_paths,
    const std::optional<std::string>& mask_path = std::nullopt) {
  MultiModalVolume vol;
  Shape3 shape{0, 0, 0};
  Affine affine{};
  for (int c = 0; c < kNumModalities; ++c) {
    NiftiVolume nv = read_nifti(modality_paths[std::size_t(c)]);
    if (c == 0) {
      shape = nv.shape;
      affine = nv.affine;
      vol.data.resize({kNumModalities, shape[0], shape[1], shape[2]});
    } else {
      if (nv.shape != shape)
        throw ShapeMismatch(modality_paths[std::size_t(c)] + " has shape " +
                            to_string(nv.shape) + ", expected " + to_string(shape));
      for (int i = 0; i < 16; ++i)
        if (std::abs(nv.affine[i] - affine[i]) > 1e-4f)
          throw ShapeMismatch(modality_paths[std::size_t(c)] + " affine differs from " +
                              modality_paths[0]);
    }
    std::copy(nv.fdata.begin(), nv.fdata.end(),
              vol.data.data.begin() + std::size_t(c) * std::size_t(numel(shape)));
  }
  vol.meta.original_shape = shape;
  vol.meta.affine = affine;
  vol.meta.validate();
  if (!all_finite(vol.data)) throw NonFinite("volume contains NaN/Inf");

  std::optional<LabelMask> mask;
  if (mask_path) {
    NiftiVolume nv = read_nifti(*mask_path);
    if (nv.shape != shape)
      throw ShapeMismatch(*mask_path + " has shape " + to_string(nv.shape) +
                          ", expected " + to_string(shape));
    LabelMask m;
    m.shape = shape;
    m.meta = vol.meta;
    m.data.resize(std::size_t(numel(shape)));
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      const float v = nv.fdata[i];
      if (!(v == 0.0f || v == 1.0f || v == 2.0f || v == 3.0f))
        throw BadLabel(*mask_path + " contains value " + std::to_string(v));
      m.data[i] = std::uint8_t(v);
    }
    mask = std::move(m);
  }
  return {std::move(vol), std::move(mask)};
}

// Subject directory layout: {id}-t1n, {id}-t1c, {id}-t2w, {id}-t2f, optional {id}-seg.
inline std::string find_volume_file(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p.string();
  }
  return {};
}

inline std::pair<MultiModalVolume, std::optional<LabelMask>> load_subject_dir(
    const std::string& subject_dir, bool require_mask = false) {
  const std::filesystem::path dir(subject_dir);
  const std::string id = dir.filename().string();
  std::array<std::string, 4> paths;
  for (int c = 0; c < kNumModalities; ++c) {
    paths[std::size_t(c)] = find_volume_file(dir, id + "-" + kModalitySuffix[std::size_t(c)]);
    if (paths[std::size_t(c)].empty())
      throw UnreadableFile("missing " + id + "-" + kModalitySuffix[std::size_t(c)] +
                           " in " + subject_dir);
  }
  std::optional<std::string> mask_path;
  const std::string seg = find_volume_file(dir, id + "-seg");
  if (!seg.empty())
    mask_path = seg;
  else if (require_mask)
    throw UnreadableFile("missing " + id + "-seg in " + subject_dir);
  return load_subject(paths, mask_path);
}

// ---------------------------------------------------------------------------
// center_crop / pad_to_original
// ---------------------------------------------------------------------------

inline Shape3 center_crop_offset(const Shape3& in, const Shape3& target) {
  Shape3 off{};
  for (int a = 0; a < 3; ++a) {
    if (target[a] > in[a])
      throw TargetTooLarge("crop target " + to_string(target) + " exceeds " + to_string(in));
    off[a] = (in[a] - target[a]) / 2;
  }
  return off;
}

inline void accumulate_crop(SpatialMeta& meta, const Shape3& off) {
  if (meta.crop_offset)
    for (int a = 0; a < 3; ++a) (*meta.crop_offset)[a] += off[a];
  else
    meta.crop_offset = off;
}

inline MultiModalVolume center_crop(const MultiModalVolume& vol, const Shape3& target) {
  const Shape3 in = vol.shape();
  const Shape3 off = center_crop_offset(in, target);
  MultiModalVolume out;
  out.meta = vol.meta;
  accumulate_crop(out.meta, off);
  out.data.resize({kNumModalities, target[0], target[1], target[2]});
  for (int c = 0; c < kNumModalities; ++c)
    for (int z = 0; z < target[0]; ++z)
      for (int y = 0; y < target[1]; ++y) {
        const float* src = &vol.data.at(c, z + off[0], y + off[1], off[2]);
        float* dst = &out.data.at(c, z, y, 0);
        std::copy(src, src + target[2], dst);
      }
  return out;
}

inline LabelMask center_crop(const LabelMask& mask, const Shape3& target) {
  const Shape3 off = center_crop_offset(mask.shape, target);
  LabelMask out;
  out.meta = mask.meta;
  accumulate_crop(out.meta, off);
  out.shape = target;
  out.data.resize(std::size_t(numel(target)));
  for (int z = 0; z < target[0]; ++z)
    for (int y = 0; y < target[1]; ++y) {
      const std::uint8_t* src = &mask.data[std::size_t(
          (std::int64_t(z + off[0]) * mask.shape[1] + (y + off[1])) * mask.shape[2] + off[2])];
      std::copy(src, src + target[2], &out.at(z, y, 0));
    }
  return out;
}

inline LabelMask pad_to_original(const LabelMask& mask) {
  if (!mask.meta.crop_offset)
    throw MissingMeta("pad_to_original requires a crop_offset");
  const Shape3 orig = mask.meta.original_shape;
  if (orig[0] <= 0) throw MissingMeta("pad_to_original requires original_shape");
  const Shape3 off = *mask.meta.crop_offset;
  LabelMask out;
  out.meta = mask.meta;
  out.meta.crop_offset.reset();
  out.shape = orig;
  out.data.assign(std::size_t(numel(orig)), 0);
  for (int z = 0; z < mask.shape[0]; ++z)
    for (int y = 0; y < mask.shape[1]; ++y)
      std::copy(&mask.at(z, y, 0), &mask.at(z, y, 0) + mask.shape[2],
                &out.at(z + off[0], y + off[1], off[2]));
  return out;
}

// ---------------------------------------------------------------------------
// aggregate_regions / write_mask
// ---------------------------------------------------------------------------

inline RegionMasks aggregate_regions(const LabelMask& mask) {
  RegionMasks r;
  r.shape = mask.shape;
  const std::size_t n = mask.data.size();
  r.wt.resize(n);
  r.tc.resize(n);
  r.et.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t v = mask.data[i];
    r.wt[i] = v >= 1;
    r.tc[i] = (v == 1 || v == 3);
    r.et[i] = v == 3;
  }
  return r;
}

inline void write_mask(const LabelMask& mask, const std::string& path) {
  if (mask.meta.crop_offset)
    throw CroppedMaskNotRestored("refusing to write a cropped mask; call pad_to_original first");
  write_nifti_u8(path, mask.shape, mask.meta.affine, mask.data.data());
}

inline LabelMask read_mask(const std::string& path) {
  NiftiVolume nv = read_nifti(path);
  LabelMask m;
  m.shape = nv.shape;
  m.meta.original_shape = nv.shape;
  m.meta.affine = nv.affine;
  m.data.resize(nv.fdata.size());
  for (std::size_t i = 0; i < nv.fdata.size(); ++i) {
    const float v = nv.fdata[i];
    if (!(v == 0.0f || v == 1.0f || v == 2.0f || v == 3.0f))
      throw BadLabel(path + " contains value " + std::to_string(v));
    m.data[i] = std::uint8_t(v);
  }
  return m;
}

}  // namespace voxseg
