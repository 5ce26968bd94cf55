#pragma once

#include <array>
#include <cmath>
#include <optional>

#include "voxseg/common.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

enum class FocalReduction { mean_voxels_classes, mean_voxels };

struct LossConfig {
  double lambda_dice = 0.75;
  double lambda_focal = 0.25;
  double gamma = 2.0;
  double alpha = 0.25;
  double dice_smooth = 1e-5;
  std::optional<std::array<double, 4>> class_weights;  // default uniform
  FocalReduction focal_reduction = FocalReduction::mean_voxels_classes;

  void validate() const {
    if (lambda_dice < 0 || lambda_focal < 0) throw ConfigError("loss: lambdas must be >= 0");
    if (gamma < 0) throw ConfigError("loss: gamma must be >= 0");
    if (alpha <= 0 || alpha >= 1) throw ConfigError("loss: alpha must be in (0,1)");
    if (dice_smooth <= 0) throw ConfigError("loss: dice_smooth must be > 0");
  }
};

namespace detail {

template <class T>
inline void check_loss_inputs(const Tensor<T>& probs, const Tensor<T>& target) {
  if (!probs.same_shape(target)) throw ShapeMismatch("probs and target shapes differ");
  const int C = probs.c();
  const std::int64_t sp = probs.spatial();
  for (std::int64_t i = 0; i < sp; ++i) {
    double sum = 0.0, tsum = 0.0;
    for (int c = 0; c < C; ++c) {
      const double p = double(probs.data[std::size_t(std::int64_t(c) * sp + i)]);
      if (!std::isfinite(p)) throw NonFinite("probs contain NaN/Inf");
      sum += p;
      const double t = double(target.data[std::size_t(std::int64_t(c) * sp + i)]);
      if (t != 0.0 && t != 1.0) throw DataError("target is not one-hot");
      tsum += t;
    }
    if (std::abs(sum - 1.0) > 1e-4)
      throw NotNormalized("probability channel sums deviate from 1 by more than 1e-4");
    if (tsum != 1.0) throw DataError("target channel sums must be exactly 1");
  }
}

inline std::array<double, 4> normalized_class_weights(const LossConfig& cfg) {
  std::array<double, 4> w{0.25, 0.25, 0.25, 0.25};
  if (cfg.class_weights) {
    double s = 0.0;
    for (double v : *cfg.class_weights) s += v;
    for (int c = 0; c < 4; ++c) w[std::size_t(c)] = (*cfg.class_weights)[std::size_t(c)] / s;
  }
  return w;
}

}  // namespace detail

// L_Dice = mean_c [ 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s) ]
template <class T>
inline T dice_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg,
                   Tensor<T>* gprobs = nullptr) {
  cfg.validate();
  detail::check_loss_inputs(probs, target);
  const int C = probs.c();
  const std::int64_t sp = probs.spatial();
  const double s = cfg.dice_smooth;
  const auto w = detail::normalized_class_weights(cfg);

  double loss = 0.0;
  for (int c = 0; c < C; ++c) {
    const T* p = probs.ptr() + std::size_t(c) * std::size_t(sp);
    const T* t = target.ptr() + std::size_t(c) * std::size_t(sp);
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::int64_t i = 0; i < sp; ++i) {
      inter += double(p[i]) * double(t[i]);
      psum += double(p[i]);
      tsum += double(t[i]);
    }
    const double den = psum + tsum + s;
    const double dice = (2.0 * inter + s) / den;
    loss += w[std::size_t(c)] * (1.0 - dice);
    if (gprobs) {
      T* g = gprobs->ptr() + std::size_t(c) * std::size_t(sp);
      const double num = 2.0 * inter + s;
      for (std::int64_t i = 0; i < sp; ++i) {
        // d(1-dice)/dp_i = -(2*t_i*den - num) / den^2
        g[i] += T(w[std::size_t(c)] * (-(2.0 * double(t[i]) * den - num) / (den * den)));
      }
    }
  }
  return T(loss);
}

// L_Focal = mean [ alpha * (1 - p_t)^gamma * (-log p_t) ], p_t = p where t=1 else 1-p
template <class T>
inline T focal_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg,
                    Tensor<T>* gprobs = nullptr) {
  cfg.validate();
  detail::check_loss_inputs(probs, target);
  const int C = probs.c();
  const std::int64_t sp = probs.spatial();
  const double eps = 1e-7;
  const double gamma = cfg.gamma;
  const auto wv = detail::normalized_class_weights(cfg);
  const double denom =
      cfg.focal_reduction == FocalReduction::mean_voxels_classes ? double(sp) * C : double(sp);

  double loss = 0.0;
  for (int c = 0; c < C; ++c) {
    const T* p = probs.ptr() + std::size_t(c) * std::size_t(sp);
    const T* t = target.ptr() + std::size_t(c) * std::size_t(sp);
    // per-class alpha when class_weights are configured, constant alpha otherwise
    const double a = cfg.class_weights ? wv[std::size_t(c)] * 4.0 * cfg.alpha : cfg.alpha;
    T* g = gprobs ? gprobs->ptr() + std::size_t(c) * std::size_t(sp) : nullptr;
    for (std::int64_t i = 0; i < sp; ++i) {
      const bool pos = double(t[i]) == 1.0;
      const double praw = pos ? double(p[i]) : 1.0 - double(p[i]);
      const bool clamped = praw < eps || praw > 1.0 - eps;
      const double pt = std::min(1.0 - eps, std::max(eps, praw));
      const double one_m = 1.0 - pt;
      const double powg = gamma == 0.0 ? 1.0 : std::pow(one_m, gamma);
      const double lg = std::log(pt);
      loss += a * powg * (-lg);
      if (g && !clamped) {
        double dpt = -a * powg / pt;
        if (gamma > 0.0) dpt += a * gamma * std::pow(one_m, gamma - 1.0) * lg;
        g[i] += T((pos ? dpt : -dpt) / denom);
      }
    }
  }
  return T(loss / denom);
}

// L_total = lambda1 * L_Dice + lambda2 * L_Focal
template <class T>
inline T combined_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg,
                       Tensor<T>* gprobs = nullptr) {
  Tensor<T> gd, gf;
  if (gprobs) {
    gd.resize_like(probs);
    gf.resize_like(probs);
  }
  const T d = dice_loss(probs, target, cfg, gprobs ? &gd : nullptr);
  const T f = focal_loss(probs, target, cfg, gprobs ? &gf : nullptr);
  if (gprobs)
    for (std::size_t i = 0; i < gprobs->data.size(); ++i)
      gprobs->data[i] += T(cfg.lambda_dice) * gd.data[i] + T(cfg.lambda_focal) * gf.data[i];
  return T(cfg.lambda_dice) * d + T(cfg.lambda_focal) * f;
}

// Soft Dice score (not a loss): mean over classes of 2|P∩T|/(|P|+|T|), smoothing s.
template <class T>
inline double soft_dice_score(const Tensor<T>& probs, const Tensor<T>& target,
                              double smooth = 1e-5) {
  const int C = probs.c();
  const std::int64_t sp = probs.spatial();
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    const T* p = probs.ptr() + std::size_t(c) * std::size_t(sp);
    const T* t = target.ptr() + std::size_t(c) * std::size_t(sp);
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::int64_t i = 0; i < sp; ++i) {
      inter += double(p[i]) * double(t[i]);
      psum += double(p[i]);
      tsum += double(t[i]);
    }
    acc += (2.0 * inter + smooth) / (psum + tsum + smooth);
  }
  return acc / C;
}

}  // namespace voxseg
