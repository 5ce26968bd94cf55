#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg::nn {

template <class T>
struct Ctx {
  bool train = false;
  Rng* rng = nullptr;  // consumed by Dropout3d in training mode
};

template <class T>
inline void check_finite(const Tensor<T>& t, const char* where) {
  for (T v : t.data)
    if (!std::isfinite(double(v))) throw NonFiniteActivation(where);
}

// ---------------------------------------------------------------------------
// conv3d: kernel 1 or 3, stride 1 or 2, padding = kernel/2
// ---------------------------------------------------------------------------

template <class T>
struct Conv3d {
  int in_ch = 0, out_ch = 0, ksize = 3, stride = 1;
  bool has_bias = true;
  Tensor<T> w, b, gw, gb;
  Tensor<T> x_cache;

  void build(int in_c, int out_c, int k, int s, bool bias, Rng& rng) {
    in_ch = in_c;
    out_ch = out_c;
    ksize = k;
    stride = s;
    has_bias = bias;
    w.resize({out_c, in_c, k, k, k});
    gw.resize_like(w);
    const double bound = 1.0 / std::sqrt(double(in_c) * k * k * k);  // fan-in uniform
    for (auto& v : w.data) v = T(rng.uniform(-bound, bound));
    if (has_bias) {
      b.resize({out_c});
      gb.resize_like(b);
      for (auto& v : b.data) v = T(rng.uniform(-bound, bound));
    }
  }

  static int out_dim(int in, int k, int s) { return (in + 2 * (k / 2) - k) / s + 1; }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx) {
    if (ctx.train) x_cache = x;
    const int D = x.d(), H = x.h(), W = x.w();
    const int p = ksize / 2;
    const int Do = out_dim(D, ksize, stride), Ho = out_dim(H, ksize, stride),
              Wo = out_dim(W, ksize, stride);
    Tensor<T> out({out_ch, Do, Ho, Wo});
    const std::int64_t in_sp = std::int64_t(D) * H * W;
    const std::int64_t out_sp = std::int64_t(Do) * Ho * Wo;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int oc = 0; oc < out_ch; ++oc)
      for (int zo = 0; zo < Do; ++zo) {
        T* out_z = out.ptr() + std::size_t(oc) * std::size_t(out_sp) +
                   std::size_t(zo) * Ho * Wo;
        for (int yo = 0; yo < Ho; ++yo) {
          T* row = out_z + std::size_t(yo) * Wo;
          const T bias = has_bias ? b.data[std::size_t(oc)] : T(0);
          for (int xo = 0; xo < Wo; ++xo) row[xo] = bias;
          for (int ic = 0; ic < in_ch; ++ic) {
            const T* in_c = x.ptr() + std::size_t(ic) * std::size_t(in_sp);
            const T* wk = w.ptr() + (std::size_t(oc) * in_ch + ic) * std::size_t(ksize * ksize * ksize);
            for (int a = 0; a < ksize; ++a) {
              const int zi = zo * stride + a - p;
              if (zi < 0 || zi >= D) continue;
              for (int bk = 0; bk < ksize; ++bk) {
                const int yi = yo * stride + bk - p;
                if (yi < 0 || yi >= H) continue;
                const T* in_row = in_c + (std::int64_t(zi) * H + yi) * W;
                const T* wrow = wk + std::size_t(a * ksize + bk) * std::size_t(ksize);
                for (int c = 0; c < ksize; ++c) {
                  const T wv = wrow[c];
                  // valid xo range so that xi = xo*stride + c - p stays in [0, W)
                  int lo = 0;
                  if (c < p) lo = (p - c + stride - 1) / stride;
                  int hi = (W - 1 + p - c) / stride;
                  if (hi > Wo - 1) hi = Wo - 1;
                  const T* in_off = in_row + (c - p);
                  if (stride == 1) {
                    for (int xo = lo; xo <= hi; ++xo) row[xo] += wv * in_off[xo];
                  } else {
                    for (int xo = lo; xo <= hi; ++xo) row[xo] += wv * in_off[2 * xo];
                  }
                }
              }
            }
          }
        }
      }
    return out;
  }

  // Accumulates gw/gb, returns grad w.r.t. input.
  Tensor<T> backward(const Tensor<T>& go) {
    const Tensor<T>& x = x_cache;
    const int D = x.d(), H = x.h(), W = x.w();
    const int p = ksize / 2;
    const int Do = go.d(), Ho = go.h(), Wo = go.w();
    const std::int64_t in_sp = std::int64_t(D) * H * W;
    const std::int64_t out_sp = std::int64_t(Do) * Ho * Wo;
    const int kvol = ksize * ksize * ksize;

    // valid output range along one axis for kernel offset k: in = out*stride + k - p
    auto axis_range = [&](int k, int in_dim, int out_dim, int& lo, int& hi) {
      const int off = k - p;
      lo = off < 0 ? (-off + stride - 1) / stride : 0;
      hi = std::min(out_dim - 1, (in_dim - 1 - off) / stride);
    };

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int oc = 0; oc < out_ch; ++oc) {
      T* gwk = gw.ptr() + std::size_t(oc) * std::size_t(in_ch) * std::size_t(kvol);
      const T* go_c = go.ptr() + std::size_t(oc) * std::size_t(out_sp);
      if (has_bias) {
        T gbias = 0;
#ifdef _OPENMP
#pragma omp simd reduction(+ : gbias)
#endif
        for (std::int64_t i = 0; i < out_sp; ++i) gbias += go_c[i];
        gb.data[std::size_t(oc)] += gbias;
      }
      for (int ic = 0; ic < in_ch; ++ic) {
        const T* in_c = x.ptr() + std::size_t(ic) * std::size_t(in_sp);
        T* gw_ic = gwk + std::size_t(ic) * std::size_t(kvol);
        for (int a = 0; a < ksize; ++a) {
          int zlo, zhi;
          axis_range(a, D, Do, zlo, zhi);
          for (int bk = 0; bk < ksize; ++bk) {
            int ylo, yhi;
            axis_range(bk, H, Ho, ylo, yhi);
            for (int c = 0; c < ksize; ++c) {
              int xlo, xhi;
              axis_range(c, W, Wo, xlo, xhi);
              T acc = 0;
              for (int zo = zlo; zo <= zhi; ++zo) {
                const int zi = zo * stride + a - p;
                for (int yo = ylo; yo <= yhi; ++yo) {
                  const int yi = yo * stride + bk - p;
                  const T* go_row = go_c + (std::int64_t(zo) * Ho + yo) * Wo;
                  const T* in_row = in_c + (std::int64_t(zi) * H + yi) * W + (c - p);
                  if (stride == 1) {
#ifdef _OPENMP
#pragma omp simd reduction(+ : acc)
#endif
                    for (int xo = xlo; xo <= xhi; ++xo) acc += go_row[xo] * in_row[xo];
                  } else {
#ifdef _OPENMP
#pragma omp simd reduction(+ : acc)
#endif
                    for (int xo = xlo; xo <= xhi; ++xo) acc += go_row[xo] * in_row[2 * xo];
                  }
                }
              }
              gw_ic[std::size_t(a * ksize + bk) * std::size_t(ksize) + std::size_t(c)] += acc;
            }
          }
        }
      }
    }

    Tensor<T> gx;
    gx.resize_like(x);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int ic = 0; ic < in_ch; ++ic) {
      T* gx_c = gx.ptr() + std::size_t(ic) * std::size_t(in_sp);
      for (int oc = 0; oc < out_ch; ++oc) {
        const T* go_c = go.ptr() + std::size_t(oc) * std::size_t(out_sp);
        const T* wk = w.ptr() + (std::size_t(oc) * in_ch + ic) * std::size_t(kvol);
        for (int zo = 0; zo < Do; ++zo)
          for (int yo = 0; yo < Ho; ++yo) {
            const T* go_row = go_c + (std::int64_t(zo) * Ho + yo) * Wo;
            for (int a = 0; a < ksize; ++a) {
              const int zi = zo * stride + a - p;
              if (zi < 0 || zi >= D) continue;
              for (int bk = 0; bk < ksize; ++bk) {
                const int yi = yo * stride + bk - p;
                if (yi < 0 || yi >= H) continue;
                T* gx_row = gx_c + (std::int64_t(zi) * H + yi) * W;
                const T* wrow = wk + std::size_t(a * ksize + bk) * std::size_t(ksize);
                for (int c = 0; c < ksize; ++c) {
                  const T wv = wrow[c];
                  int lo = 0;
                  if (c < p) lo = (p - c + stride - 1) / stride;
                  int hi = (W - 1 + p - c) / stride;
                  if (hi > Wo - 1) hi = Wo - 1;
                  if (stride == 1) {
                    T* gx_off = gx_row + (c - p);
                    for (int xo = lo; xo <= hi; ++xo) gx_off[xo] += wv * go_row[xo];
                  } else {
                    for (int xo = lo; xo <= hi; ++xo)
                      gx_row[xo * 2 + c - p] += wv * go_row[xo];
                  }
                }
              }
            }
          }
      }
    }
    return gx;
  }

  std::int64_t param_count() const { return w.numel() + (has_bias ? b.numel() : 0); }

  template <class F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".w", w, gw);
    if (has_bias) f(prefix + ".b", b, gb);
  }
};

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

template <class T>
struct GroupNorm {
  int channels = 0, groups = 1;
  T eps = T(1e-5);
  Tensor<T> gamma, beta, ggamma, gbeta;
  Tensor<T> x_cache;
  std::vector<double> mean_, inv_std_;

  static int pick_groups(int channels) {
    int g = std::min(8, channels);
    while (channels % g != 0) --g;
    return g;
  }

  void build(int c) {
    channels = c;
    groups = pick_groups(c);
    gamma.resize({c});
    beta.resize({c});
    ggamma.resize_like(gamma);
    gbeta.resize_like(beta);
    for (auto& v : gamma.data) v = T(1);
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx) {
    if (ctx.train) x_cache = x;
    const std::int64_t sp = x.spatial();
    const int per = channels / groups;
    const std::int64_t n = per * sp;
    Tensor<T> out;
    out.resize_like(x);
    mean_.assign(std::size_t(groups), 0.0);
    inv_std_.assign(std::size_t(groups), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int g = 0; g < groups; ++g) {
      const T* xs = x.ptr() + std::size_t(g) * std::size_t(n);
      double sum = 0.0, sum2 = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        sum += double(xs[i]);
        sum2 += double(xs[i]) * double(xs[i]);
      }
      const double mu = sum / double(n);
      const double var = std::max(0.0, sum2 / double(n) - mu * mu);
      const double inv = 1.0 / std::sqrt(var + double(eps));
      mean_[std::size_t(g)] = mu;
      inv_std_[std::size_t(g)] = inv;
      for (int cc = 0; cc < per; ++cc) {
        const int ch = g * per + cc;
        const T gm = gamma.data[std::size_t(ch)], bt = beta.data[std::size_t(ch)];
        const T* xi = x.ptr() + std::size_t(ch) * std::size_t(sp);
        T* yo = out.ptr() + std::size_t(ch) * std::size_t(sp);
        for (std::int64_t i = 0; i < sp; ++i)
          yo[i] = gm * T((double(xi[i]) - mu) * inv) + bt;
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& go) {
    const Tensor<T>& x = x_cache;
    const std::int64_t sp = x.spatial();
    const int per = channels / groups;
    const std::int64_t n = per * sp;
    Tensor<T> gx;
    gx.resize_like(x);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int g = 0; g < groups; ++g) {
      const double mu = mean_[std::size_t(g)], inv = inv_std_[std::size_t(g)];
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int cc = 0; cc < per; ++cc) {
        const int ch = g * per + cc;
        const double gm = double(gamma.data[std::size_t(ch)]);
        const T* xi = x.ptr() + std::size_t(ch) * std::size_t(sp);
        const T* gi = go.ptr() + std::size_t(ch) * std::size_t(sp);
        double gg = 0.0, gbv = 0.0;
        for (std::int64_t i = 0; i < sp; ++i) {
          const double xh = (double(xi[i]) - mu) * inv;
          const double g0 = double(gi[i]);
          gg += g0 * xh;
          gbv += g0;
          const double dxh = g0 * gm;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh;
        }
        ggamma.data[std::size_t(ch)] += T(gg);
        gbeta.data[std::size_t(ch)] += T(gbv);
      }
      const double m1 = sum_dxhat / double(n);
      const double m2 = sum_dxhat_xhat / double(n);
      for (int cc = 0; cc < per; ++cc) {
        const int ch = g * per + cc;
        const double gm = double(gamma.data[std::size_t(ch)]);
        const T* xi = x.ptr() + std::size_t(ch) * std::size_t(sp);
        const T* gi = go.ptr() + std::size_t(ch) * std::size_t(sp);
        T* gxo = gx.ptr() + std::size_t(ch) * std::size_t(sp);
        for (std::int64_t i = 0; i < sp; ++i) {
          const double xh = (double(xi[i]) - mu) * inv;
          gxo[i] = T(inv * (double(gi[i]) * gm - m1 - xh * m2));
        }
      }
    }
    return gx;
  }

  std::int64_t param_count() const { return gamma.numel() + beta.numel(); }

  template <class F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma, ggamma);
    f(prefix + ".beta", beta, gbeta);
  }
};

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

template <class T>
struct Relu {
  Tensor<T> x_cache;

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx) {
    if (ctx.train) x_cache = x;
    Tensor<T> out;
    out.resize_like(x);
    for (std::size_t i = 0; i < x.data.size(); ++i)
      out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return out;
  }
  Tensor<T> backward(const Tensor<T>& go) {
    Tensor<T> gx;
    gx.resize_like(go);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      gx.data[i] = x_cache.data[i] > T(0) ? go.data[i] : T(0);
    return gx;
  }
};

template <class T>
inline T sigmoid(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : T(1) - T(1) / (T(1) + std::exp(v));
}

// ---------------------------------------------------------------------------
// Dropout3d: zeroes whole feature maps, inverted scaling
// ---------------------------------------------------------------------------

template <class T>
struct Dropout3d {
  double p = 0.0;
  std::vector<std::uint8_t> keep_;

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx) {
    if (!ctx.train || p <= 0.0) {
      keep_.clear();
      return x;
    }
    const int C = x.c();
    keep_.resize(std::size_t(C));
    for (int c = 0; c < C; ++c) keep_[std::size_t(c)] = ctx.rng->bernoulli(p) ? 0 : 1;
    const T scale = T(1.0 / (1.0 - p));
    Tensor<T> out;
    out.resize_like(x);
    const std::int64_t sp = x.spatial();
    for (int c = 0; c < C; ++c) {
      if (!keep_[std::size_t(c)]) continue;
      const T* xi = x.ptr() + std::size_t(c) * std::size_t(sp);
      T* yo = out.ptr() + std::size_t(c) * std::size_t(sp);
      for (std::int64_t i = 0; i < sp; ++i) yo[i] = xi[i] * scale;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& go) {
    if (keep_.empty()) return go;
    const T scale = T(1.0 / (1.0 - p));
    Tensor<T> gx;
    gx.resize_like(go);
    const std::int64_t sp = go.spatial();
    for (int c = 0; c < go.c(); ++c) {
      if (!keep_[std::size_t(c)]) continue;
      const T* gi = go.ptr() + std::size_t(c) * std::size_t(sp);
      T* gxo = gx.ptr() + std::size_t(c) * std::size_t(sp);
      for (std::int64_t i = 0; i < sp; ++i) gxo[i] = gi[i] * scale;
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// trilinear x2 upsampling (align_corners = false)
// ---------------------------------------------------------------------------

template <class T>
struct TrilinearUp2 {
  Shape3 in_shape{0, 0, 0};

  static void axis_weights(int out_n, int in_n, std::vector<int>& i0, std::vector<int>& i1,
                           std::vector<T>& f) {
    i0.resize(std::size_t(out_n));
    i1.resize(std::size_t(out_n));
    f.resize(std::size_t(out_n));
    for (int o = 0; o < out_n; ++o) {
      const double s = (o + 0.5) / 2.0 - 0.5;
      double fl = std::floor(s);
      double frac = s - fl;
      int lo = int(fl), hi = lo + 1;
      if (lo < 0) { lo = 0; }
      if (hi > in_n - 1) { hi = in_n - 1; }
      i0[std::size_t(o)] = lo;
      i1[std::size_t(o)] = hi;
      f[std::size_t(o)] = T(frac);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>&) {
    in_shape = {x.d(), x.h(), x.w()};
    const int C = x.c(), D = x.d(), H = x.h(), W = x.w();
    Tensor<T> out({C, 2 * D, 2 * H, 2 * W});
    std::vector<int> z0, z1, y0, y1, x0, x1;
    std::vector<T> fz, fy, fx;
    axis_weights(2 * D, D, z0, z1, fz);
    axis_weights(2 * H, H, y0, y1, fy);
    axis_weights(2 * W, W, x0, x1, fx);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < 2 * D; ++z)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx) {
            const T wz = fz[std::size_t(z)], wy = fy[std::size_t(y)], wx = fx[std::size_t(xx)];
            T acc = 0;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const T wgt = (dz ? wz : T(1) - wz) * (dy ? wy : T(1) - wy) *
                                (dx ? wx : T(1) - wx);
                  acc += wgt * x.at(c, dz ? z1[std::size_t(z)] : z0[std::size_t(z)],
                                    dy ? y1[std::size_t(y)] : y0[std::size_t(y)],
                                    dx ? x1[std::size_t(xx)] : x0[std::size_t(xx)]);
                }
            out.at(c, z, y, xx) = acc;
          }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& go) {
    const int C = go.c(), D = in_shape[0], H = in_shape[1], W = in_shape[2];
    Tensor<T> gx({C, D, H, W});
    std::vector<int> z0, z1, y0, y1, x0, x1;
    std::vector<T> fz, fy, fx;
    axis_weights(2 * D, D, z0, z1, fz);
    axis_weights(2 * H, H, y0, y1, fy);
    axis_weights(2 * W, W, x0, x1, fx);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < 2 * D; ++z)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx) {
            const T g = go.at(c, z, y, xx);
            if (g == T(0)) continue;
            const T wz = fz[std::size_t(z)], wy = fy[std::size_t(y)], wx = fx[std::size_t(xx)];
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const T wgt = (dz ? wz : T(1) - wz) * (dy ? wy : T(1) - wy) *
                                (dx ? wx : T(1) - wx);
                  gx.at(c, dz ? z1[std::size_t(z)] : z0[std::size_t(z)],
                        dy ? y1[std::size_t(y)] : y0[std::size_t(y)],
                        dx ? x1[std::size_t(xx)] : x0[std::size_t(xx)]) += wgt * g;
                }
          }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// squeeze-and-excitation (channel attention)
// ---------------------------------------------------------------------------

template <class T>
struct SqueezeExcite {
  int channels = 0, hidden = 0;
  Tensor<T> w1, b1, w2, b2;       // w1: (hidden, C), w2: (C, hidden)
  Tensor<T> gw1, gb1, gw2, gb2;
  Tensor<T> x_cache;
  std::vector<T> pooled_, h_relu_, h_pre_, scale_;

  void build(int c, int reduction, Rng& rng) {
    channels = c;
    hidden = std::max(1, c / reduction);
    w1.resize({hidden, c});
    b1.resize({hidden});
    w2.resize({c, hidden});
    b2.resize({c});
    gw1.resize_like(w1);
    gb1.resize_like(b1);
    gw2.resize_like(w2);
    gb2.resize_like(b2);
    const double bound1 = 1.0 / std::sqrt(double(c));
    for (auto& v : w1.data) v = T(rng.uniform(-bound1, bound1));
    for (auto& v : b1.data) v = T(rng.uniform(-bound1, bound1));
    const double bound2 = 1.0 / std::sqrt(double(hidden));
    for (auto& v : w2.data) v = T(rng.uniform(-bound2, bound2));
    for (auto& v : b2.data) v = T(rng.uniform(-bound2, bound2));
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx) {
    if (ctx.train) x_cache = x;
    const std::int64_t sp = x.spatial();
    pooled_.assign(std::size_t(channels), T(0));
    for (int c = 0; c < channels; ++c) {
      const T* xi = x.ptr() + std::size_t(c) * std::size_t(sp);
      double s = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) s += double(xi[i]);
      pooled_[std::size_t(c)] = T(s / double(sp));
    }
    h_pre_.assign(std::size_t(hidden), T(0));
    h_relu_.assign(std::size_t(hidden), T(0));
    for (int h = 0; h < hidden; ++h) {
      T acc = b1.data[std::size_t(h)];
      for (int c = 0; c < channels; ++c)
        acc += w1.data[std::size_t(h * channels + c)] * pooled_[std::size_t(c)];
      h_pre_[std::size_t(h)] = acc;
      h_relu_[std::size_t(h)] = acc > T(0) ? acc : T(0);
    }
    scale_.assign(std::size_t(channels), T(0));
    Tensor<T> out;
    out.resize_like(x);
    for (int c = 0; c < channels; ++c) {
      T acc = b2.data[std::size_t(c)];
      for (int h = 0; h < hidden; ++h)
        acc += w2.data[std::size_t(c * hidden + h)] * h_relu_[std::size_t(h)];
      const T s = sigmoid(acc);
      scale_[std::size_t(c)] = s;
      const T* xi = x.ptr() + std::size_t(c) * std::size_t(sp);
      T* yo = out.ptr() + std::size_t(c) * std::size_t(sp);
      for (std::int64_t i = 0; i < sp; ++i) yo[i] = s * xi[i];
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& go) {
    const Tensor<T>& x = x_cache;
    const std::int64_t sp = x.spatial();
    Tensor<T> gx;
    gx.resize_like(x);
    std::vector<T> gscale(std::size_t(channels), T(0));
    for (int c = 0; c < channels; ++c) {
      const T s = scale_[std::size_t(c)];
      const T* xi = x.ptr() + std::size_t(c) * std::size_t(sp);
      const T* gi = go.ptr() + std::size_t(c) * std::size_t(sp);
      T* gxo = gx.ptr() + std::size_t(c) * std::size_t(sp);
      double gs = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) {
        gs += double(gi[i]) * double(xi[i]);
        gxo[i] = gi[i] * s;
      }
      gscale[std::size_t(c)] = T(gs);
    }
    // through sigmoid and the two fully connected maps
    std::vector<T> gpre2(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
      const T s = scale_[std::size_t(c)];
      gpre2[std::size_t(c)] = gscale[std::size_t(c)] * s * (T(1) - s);
    }
    std::vector<T> gh(std::size_t(hidden), T(0));
    for (int c = 0; c < channels; ++c) {
      gb2.data[std::size_t(c)] += gpre2[std::size_t(c)];
      for (int h = 0; h < hidden; ++h) {
        gw2.data[std::size_t(c * hidden + h)] += gpre2[std::size_t(c)] * h_relu_[std::size_t(h)];
        gh[std::size_t(h)] += w2.data[std::size_t(c * hidden + h)] * gpre2[std::size_t(c)];
      }
    }
    std::vector<T> gpool(std::size_t(channels), T(0));
    for (int h = 0; h < hidden; ++h) {
      const T ghr = h_pre_[std::size_t(h)] > T(0) ? gh[std::size_t(h)] : T(0);
      gb1.data[std::size_t(h)] += ghr;
      for (int c = 0; c < channels; ++c) {
        gw1.data[std::size_t(h * channels + c)] += ghr * pooled_[std::size_t(c)];
        gpool[std::size_t(c)] += w1.data[std::size_t(h * channels + c)] * ghr;
      }
    }
    for (int c = 0; c < channels; ++c) {
      const T gp = gpool[std::size_t(c)] / T(double(sp));
      T* gxo = gx.ptr() + std::size_t(c) * std::size_t(sp);
      for (std::int64_t i = 0; i < sp; ++i) gxo[i] += gp;
    }
    return gx;
  }

  std::int64_t param_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
  }

  template <class F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1, gw1);
    f(prefix + ".b1", b1, gb1);
    f(prefix + ".w2", w2, gw2);
    f(prefix + ".b2", b2, gb2);
  }
};

// ---------------------------------------------------------------------------
// additive attention gate, same-level gating: alpha = sigmoid(psi(relu(Wx x + Wg g)))
// ---------------------------------------------------------------------------

template <class T>
struct AttentionGate {
  int x_ch = 0, g_ch = 0, inter_ch = 0, alpha_ch = 1;
  Conv3d<T> wx, wg, psi;  // all 1x1x1; wx without bias
  Tensor<T> x_cache, g_cache, pre_relu_, alpha_;

  void build(int x_channels, int g_channels, Rng& rng, int inter_channels = 0,
             int alpha_channels = 1) {
    x_ch = x_channels;
    g_ch = g_channels;
    inter_ch = inter_channels > 0 ? inter_channels : std::max(1, x_channels / 2);
    alpha_ch = alpha_channels;
    wx.build(x_channels, inter_ch, 1, 1, /*bias=*/false, rng);
    wg.build(g_channels, inter_ch, 1, 1, /*bias=*/true, rng);
    psi.build(inter_ch, alpha_ch, 1, 1, /*bias=*/true, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& g, const Ctx<T>& ctx) {
    if (x.d() != g.d() || x.h() != g.h() || x.w() != g.w())
      throw ShapeMismatch("attention gate requires same-resolution inputs");
    if (ctx.train) {
      x_cache = x;
      g_cache = g;
    }
    Tensor<T> q = wx.forward(x, ctx);
    Tensor<T> k = wg.forward(g, ctx);
    for (std::size_t i = 0; i < q.data.size(); ++i) q.data[i] += k.data[i];
    if (ctx.train) pre_relu_ = q;
    for (auto& v : q.data) v = v > T(0) ? v : T(0);
    Tensor<T> e = psi.forward(q, ctx);
    alpha_.resize_like(e);
    for (std::size_t i = 0; i < e.data.size(); ++i) alpha_.data[i] = sigmoid(e.data[i]);

    Tensor<T> out;
    out.resize_like(x);
    const std::int64_t sp = x.spatial();
    for (int c = 0; c < x_ch; ++c) {
      const T* a = alpha_.ptr() + std::size_t(alpha_ch == 1 ? 0 : c) * std::size_t(sp);
      const T* xi = x.ptr() + std::size_t(c) * std::size_t(sp);
      T* yo = out.ptr() + std::size_t(c) * std::size_t(sp);
      for (std::int64_t i = 0; i < sp; ++i) yo[i] = a[std::size_t(i)] * xi[i];
    }
    return out;
  }

  // returns (gx, gg)
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& go) {
    const std::int64_t sp = x_cache.spatial();
    Tensor<T> gx;
    gx.resize_like(x_cache);
    Tensor<T> galpha({alpha_ch, go.d(), go.h(), go.w()});
    for (int c = 0; c < x_ch; ++c) {
      const T* a = alpha_.ptr() + std::size_t(alpha_ch == 1 ? 0 : c) * std::size_t(sp);
      T* ga = galpha.ptr() + std::size_t(alpha_ch == 1 ? 0 : c) * std::size_t(sp);
      const T* xi = x_cache.ptr() + std::size_t(c) * std::size_t(sp);
      const T* gi = go.ptr() + std::size_t(c) * std::size_t(sp);
      T* gxo = gx.ptr() + std::size_t(c) * std::size_t(sp);
      for (std::int64_t i = 0; i < sp; ++i) {
        gxo[i] = gi[i] * a[std::size_t(i)];
        ga[std::size_t(i)] += gi[i] * xi[i];
      }
    }
    // sigmoid
    for (std::size_t i = 0; i < galpha.data.size(); ++i) {
      const T a = alpha_.data[i];
      galpha.data[i] *= a * (T(1) - a);
    }
    Tensor<T> ga = psi.backward(galpha);
    for (std::size_t i = 0; i < ga.data.size(); ++i)
      if (pre_relu_.data[i] <= T(0)) ga.data[i] = T(0);
    Tensor<T> gq = wx.backward(ga);
    Tensor<T> gg = wg.backward(ga);
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += gq.data[i];
    return {std::move(gx), std::move(gg)};
  }

  const Tensor<T>& last_alpha() const { return alpha_; }

  std::int64_t param_count() const {
    return wx.param_count() + wg.param_count() + psi.param_count();
  }

  template <class F>
  void visit_params(const std::string& prefix, F&& f) {
    wx.visit_params(prefix + ".wx", f);
    wg.visit_params(prefix + ".wg", f);
    psi.visit_params(prefix + ".psi", f);
  }
};

// ---------------------------------------------------------------------------
// residual block: n_convs x (conv3 -> GN -> ReLU), skip add, optional SE,
// optional Dropout3d after the block
// ---------------------------------------------------------------------------

template <class T>
struct ResidualBlock {
  int in_ch = 0, out_ch = 0, n_convs = 2;
  bool use_se = false;
  std::vector<Conv3d<T>> convs;
  std::vector<GroupNorm<T>> gns;
  std::vector<Relu<T>> relus;
  Conv3d<T> proj;  // 1x1x1 when in_ch != out_ch
  bool has_proj = false;
  SqueezeExcite<T> se;
  Dropout3d<T> dropout;

  void build(int in_c, int out_c, int n, double dropout_p, bool with_se, int se_reduction,
             Rng& rng) {
    in_ch = in_c;
    out_ch = out_c;
    n_convs = n;
    use_se = with_se;
    convs.resize(std::size_t(n));
    gns.resize(std::size_t(n));
    relus.resize(std::size_t(n));
    for (int i = 0; i < n; ++i) {
      convs[std::size_t(i)].build(i == 0 ? in_c : out_c, out_c, 3, 1, true, rng);
      gns[std::size_t(i)].build(out_c);
    }
    has_proj = in_c != out_c;
    if (has_proj) proj.build(in_c, out_c, 1, 1, /*bias=*/false, rng);
    if (use_se) se.build(out_c, se_reduction, rng);
    dropout.p = dropout_p;
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx) {
    Tensor<T> y = x;
    for (int i = 0; i < n_convs; ++i) {
      y = convs[std::size_t(i)].forward(y, ctx);
      y = gns[std::size_t(i)].forward(y, ctx);
      y = relus[std::size_t(i)].forward(y, ctx);
    }
    Tensor<T> skip = has_proj ? proj.forward(x, ctx) : x;
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += skip.data[i];
    if (use_se) y = se.forward(y, ctx);
    y = dropout.forward(y, ctx);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& go) {
    Tensor<T> g = dropout.backward(go);
    if (use_se) g = se.backward(g);
    Tensor<T> gskip = g;  // the residual sum fans out
    for (int i = n_convs - 1; i >= 0; --i) {
      g = relus[std::size_t(i)].backward(g);
      g = gns[std::size_t(i)].backward(g);
      g = convs[std::size_t(i)].backward(g);
    }
    if (has_proj) {
      Tensor<T> gp = proj.backward(gskip);
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += gp.data[i];
    } else {
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += gskip.data[i];
    }
    return g;
  }

  std::int64_t param_count() const {
    std::int64_t n = has_proj ? proj.param_count() : 0;
    for (const auto& c : convs) n += c.param_count();
    for (const auto& g : gns) n += g.param_count();
    if (use_se) n += se.param_count();
    return n;
  }

  template <class F>
  void visit_params(const std::string& prefix, F&& f) {
    for (int i = 0; i < n_convs; ++i) {
      convs[std::size_t(i)].visit_params(prefix + ".conv" + std::to_string(i), f);
      gns[std::size_t(i)].visit_params(prefix + ".gn" + std::to_string(i), f);
    }
    if (has_proj) proj.visit_params(prefix + ".proj", f);
    if (use_se) se.visit_params(prefix + ".se", f);
  }
};

// ---------------------------------------------------------------------------
// channel softmax
// ---------------------------------------------------------------------------

template <class T>
inline Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> out;
  out.resize_like(logits);
  const int C = logits.c();
  const std::int64_t sp = logits.spatial();
  for (std::int64_t i = 0; i < sp; ++i) {
    T mx = logits.data[std::size_t(i)];
    for (int c = 1; c < C; ++c)
      mx = std::max(mx, logits.data[std::size_t(std::int64_t(c) * sp + i)]);
    T sum = 0;
    for (int c = 0; c < C; ++c) {
      const T e = std::exp(logits.data[std::size_t(std::int64_t(c) * sp + i)] - mx);
      out.data[std::size_t(std::int64_t(c) * sp + i)] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) out.data[std::size_t(std::int64_t(c) * sp + i)] /= sum;
  }
  return out;
}

// gin_c = p_c * (go_c - sum_k go_k p_k)
template <class T>
inline Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& go) {
  Tensor<T> gx;
  gx.resize_like(probs);
  const int C = probs.c();
  const std::int64_t sp = probs.spatial();
  for (std::int64_t i = 0; i < sp; ++i) {
    T dot = 0;
    for (int c = 0; c < C; ++c)
      dot += go.data[std::size_t(std::int64_t(c) * sp + i)] *
             probs.data[std::size_t(std::int64_t(c) * sp + i)];
    for (int c = 0; c < C; ++c) {
      const std::size_t k = std::size_t(std::int64_t(c) * sp + i);
      gx.data[k] = probs.data[k] * (go.data[k] - dot);
    }
  }
  return gx;
}

}  // namespace voxseg::nn
