#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// z-score normalization over the nonzero region of each channel
// ---------------------------------------------------------------------------

inline MultiModalVolume zscore_normalize(const MultiModalVolume& vol) {
  MultiModalVolume out;
  out.meta = vol.meta;
  out.data.resize_like(vol.data);
  const std::int64_t n = vol.data.spatial();
  for (int c = 0; c < kNumModalities; ++c) {
    const float* src = vol.data.ptr() + std::size_t(c) * std::size_t(n);
    float* dst = out.data.ptr() + std::size_t(c) * std::size_t(n);
    double sum = 0.0, sum2 = 0.0;
    std::int64_t cnt = 0;
    bool distinct = false;
    float first = 0.0f;
    for (std::int64_t i = 0; i < n; ++i) {
      const float v = src[i];
      if (v == 0.0f) continue;
      if (cnt == 0)
        first = v;
      else if (v != first)
        distinct = true;
      sum += v;
      sum2 += double(v) * v;
      ++cnt;
    }
    if (cnt < 2 || !distinct)
      throw DegenerateChannel("channel " + std::to_string(c) +
                              " has a constant or empty nonzero region");
    const double mean = sum / double(cnt);
    const double var = sum2 / double(cnt) - mean * mean;  // population variance
    const double inv_std = 1.0 / std::sqrt(var);
    for (std::int64_t i = 0; i < n; ++i)
      dst[i] = src[i] == 0.0f ? 0.0f : float((double(src[i]) - mean) * inv_std);
  }
  return out;
}

// ---------------------------------------------------------------------------
// one-hot encoding / argmax decoding
// ---------------------------------------------------------------------------

struct OneHotMask {
  Tensor<float> data;  // (4, D, H, W), channel sums exactly 1

  Shape3 shape() const { return {data.d(), data.h(), data.w()}; }
};

inline OneHotMask one_hot_encode(const LabelMask& mask) {
  OneHotMask out;
  out.data.resize({kNumClasses, mask.shape[0], mask.shape[1], mask.shape[2]});
  const std::int64_t n = numel(mask.shape);
  for (std::int64_t i = 0; i < n; ++i)
    out.data.data[std::size_t(std::int64_t(mask.data[std::size_t(i)]) * n + i)] = 1.0f;
  return out;
}

template <class T>
inline LabelMask one_hot_decode(const Tensor<T>& probs) {
  if (probs.c() != kNumClasses) throw ShapeMismatch("one_hot_decode expects 4 channels");
  LabelMask out;
  out.shape = {probs.d(), probs.h(), probs.w()};
  const std::int64_t n = probs.spatial();
  out.data.resize(std::size_t(n));
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    T best_v = probs.data[std::size_t(i)];
    if (!std::isfinite(double(best_v))) throw NonFinite("one_hot_decode input");
    for (int c = 1; c < kNumClasses; ++c) {
      const T v = probs.data[std::size_t(std::int64_t(c) * n + i)];
      if (!std::isfinite(double(v))) throw NonFinite("one_hot_decode input");
      if (v > best_v) {  // ties keep the lowest channel index
        best_v = v;
        best = c;
      }
    }
    out.data[std::size_t(i)] = std::uint8_t(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// stochastic augmentation
// ---------------------------------------------------------------------------

struct AugmentPolicy {
  bool enabled = false;
  std::array<double, 2> scale_range{0.9, 1.1};
  double rotate_range_rad = 0.26;  // ~15 degrees
  double noise_std = 0.01;         // post-normalization units
  std::array<double, 2> blur_sigma_range{0.5, 1.0};
  std::array<double, 2> intensity_scale_range{0.9, 1.1};
  double per_transform_prob = 0.3;
  int active_until_epoch = 10;

  void validate() const {
    if (scale_range[0] > scale_range[1] || blur_sigma_range[0] > blur_sigma_range[1] ||
        intensity_scale_range[0] > intensity_scale_range[1])
      throw ConfigError("augment: range bounds must be ordered low <= high");
    if (per_transform_prob < 0.0 || per_transform_prob > 1.0)
      throw ConfigError("augment: per_transform_prob must be in [0,1]");
    if (rotate_range_rad < 0.0 || noise_std < 0.0)
      throw ConfigError("augment: rotate_range_rad and noise_std must be >= 0");
  }
};

namespace detail {

using Mat3 = std::array<double, 9>;

inline Mat3 axis_angle(double ux, double uy, double uz, double theta) {
  const double c = std::cos(theta), s = std::sin(theta), t = 1.0 - c;
  return {t * ux * ux + c,      t * ux * uy - s * uz, t * ux * uz + s * uy,
          t * ux * uy + s * uz, t * uy * uy + c,      t * uy * uz - s * ux,
          t * ux * uz - s * uy, t * uy * uz + s * ux, t * uz * uz + c};
}

// Resample around the volume center: out(v) = in(M_inv * (v - c) + c).
template <class Sample>
inline void resample(const Shape3& shape, const Mat3& m_inv, Sample&& sample) {
  const double c0 = 0.5 * (shape[0] - 1), c1 = 0.5 * (shape[1] - 1), c2 = 0.5 * (shape[2] - 1);
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x) {
        const double d0 = z - c0, d1 = y - c1, d2 = x - c2;
        const double s0 = m_inv[0] * d0 + m_inv[1] * d1 + m_inv[2] * d2 + c0;
        const double s1 = m_inv[3] * d0 + m_inv[4] * d1 + m_inv[5] * d2 + c1;
        const double s2 = m_inv[6] * d0 + m_inv[7] * d1 + m_inv[8] * d2 + c2;
        sample(z, y, x, s0, s1, s2);
      }
}

inline float trilinear(const Tensor<float>& t, int ch, double s0, double s1, double s2) {
  const int D = t.d(), H = t.h(), W = t.w();
  const int z0 = int(std::floor(s0)), y0 = int(std::floor(s1)), x0 = int(std::floor(s2));
  const double fz = s0 - z0, fy = s1 - y0, fx = s2 - x0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int z = z0 + dz, y = y0 + dy, x = x0 + dx;
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) continue;  // zero outside
        const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        acc += w * t.at(ch, z, y, x);
      }
  return float(acc);
}

inline void gaussian_blur_channel(float* data, const Shape3& shape, double sigma) {
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(std::size_t(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[std::size_t(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    norm += kernel[std::size_t(i + radius)];
  }
  for (auto& k : kernel) k /= norm;

  const int dims[3] = {shape[0], shape[1], shape[2]};
  const std::int64_t strides[3] = {std::int64_t(shape[1]) * shape[2], shape[2], 1};
  std::vector<float> tmp(std::size_t(numel(shape)));
  for (int axis = 0; axis < 3; ++axis) {
    const int n = dims[axis];
    const std::int64_t stride = strides[axis];
    const std::int64_t total = numel(shape);
    for (std::int64_t base = 0; base < total; ++base) {
      const int pos = int((base / stride) % n);
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int p = pos + k;
        if (p < 0 || p >= n) continue;
        acc += kernel[std::size_t(k + radius)] * data[base + std::int64_t(k) * stride];
      }
      tmp[std::size_t(base)] = float(acc);
    }
    std::copy(tmp.begin(), tmp.end(), data);
  }
}

}  // namespace detail

// Applies the policy's transforms to (image, one-hot mask). Spatial transforms hit
// both (mask via nearest-neighbor on decoded labels); intensity transforms hit the
// image only. Fully determined by rng_seed.
inline std::pair<MultiModalVolume, OneHotMask> augment(const MultiModalVolume& vol,
                                                       const OneHotMask& mask,
                                                       const AugmentPolicy& policy, int epoch,
                                                       std::uint64_t rng_seed) {
  policy.validate();
  if (!policy.enabled || epoch >= policy.active_until_epoch) return {vol, mask};

  Rng rng(rng_seed);
  MultiModalVolume out_vol = vol;
  LabelMask labels = one_hot_decode(mask.data);
  const Shape3 shape = vol.shape();

  // spatial: one affine combining isotropic scale and axis-angle rotation
  if (rng.bernoulli(policy.per_transform_prob)) {
    const double scale = rng.uniform(policy.scale_range[0], policy.scale_range[1]);
    const double theta = rng.uniform(-policy.rotate_range_rad, policy.rotate_range_rad);
    double ux = rng.normal(), uy = rng.normal(), uz = rng.normal();
    const double len = std::sqrt(ux * ux + uy * uy + uz * uz);
    if (len > 1e-12) { ux /= len; uy /= len; uz /= len; }
    else { ux = 1.0; uy = uz = 0.0; }
    detail::Mat3 m_inv = detail::axis_angle(ux, uy, uz, -theta);  // R^T = R(-theta)
    for (auto& v : m_inv) v /= scale;

    Tensor<float> warped;
    warped.resize_like(vol.data);
    detail::resample(shape, m_inv, [&](int z, int y, int x, double s0, double s1, double s2) {
      for (int c = 0; c < kNumModalities; ++c)
        warped.at(c, z, y, x) = detail::trilinear(out_vol.data, c, s0, s1, s2);
    });
    out_vol.data = std::move(warped);

    LabelMask warped_labels;
    warped_labels.shape = shape;
    warped_labels.meta = labels.meta;
    warped_labels.data.assign(labels.data.size(), 0);
    detail::resample(shape, m_inv, [&](int z, int y, int x, double s0, double s1, double s2) {
      const int z0 = int(std::lround(s0)), y0 = int(std::lround(s1)), x0 = int(std::lround(s2));
      if (z0 < 0 || z0 >= shape[0] || y0 < 0 || y0 >= shape[1] || x0 < 0 || x0 >= shape[2])
        return;  // label 0 outside
      warped_labels.at(z, y, x) = labels.at(z0, y0, x0);
    });
    labels = std::move(warped_labels);
  }

  // gaussian noise
  if (rng.bernoulli(policy.per_transform_prob)) {
    for (auto& v : out_vol.data.data) v += float(rng.normal(0.0, policy.noise_std));
  }

  // gaussian blur
  if (rng.bernoulli(policy.per_transform_prob)) {
    const double sigma = rng.uniform(policy.blur_sigma_range[0], policy.blur_sigma_range[1]);
    for (int c = 0; c < kNumModalities; ++c)
      detail::gaussian_blur_channel(out_vol.data.ptr() + std::size_t(c) * std::size_t(out_vol.data.spatial()),
                                    shape, sigma);
  }

  // intensity scaling
  if (rng.bernoulli(policy.per_transform_prob)) {
    const float s = float(rng.uniform(policy.intensity_scale_range[0],
                                      policy.intensity_scale_range[1]));
    for (auto& v : out_vol.data.data) v *= s;
  }

  return {std::move(out_vol), one_hot_encode(labels)};
}

}  // namespace voxseg
