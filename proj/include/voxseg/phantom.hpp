#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/common.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

struct PhantomConfig {
  Shape3 shape{64, 64, 64};
  int n_lesions_min = 1;
  int n_lesions_max = 3;
  double radius_min = 4.0;
  double radius_max = 10.0;
  double rim_thickness = 2.0;
  double edema_thickness = 3.0;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_lesions_min < 1 || n_lesions_max < n_lesions_min)
      throw ConfigError("phantom: need 1 <= n_lesions_min <= n_lesions_max");
    if (radius_min < 1.0 || radius_max < radius_min)
      throw ConfigError("phantom: need 1 <= radius_min <= radius_max");
    const double extent = radius_max + rim_thickness + edema_thickness;
    const int mindim = std::min({shape[0], shape[1], shape[2]});
    if (extent >= mindim / 2.0)
      throw ConfigError("phantom: radius_max + rim + edema must be < min(shape)/2");
  }
};

// Contrast profile per tissue and channel (T1, T1ce, T2, FLAIR). The enhancing
// rim is brightest in T1ce; the edema shell is brightest in FLAIR.
inline constexpr double kPhantomProfile[4][4] = {
    // T1    T1ce   T2    FLAIR
    {1.00, 1.00, 0.90, 0.80},  // brain foreground (label 0)
    {0.60, 0.70, 1.40, 1.20},  // non-enhancing core (label 1)
    {0.80, 0.90, 1.50, 1.80},  // edema shell (label 2)
    {0.90, 2.00, 1.10, 1.30},  // enhancing rim (label 3)
};

namespace detail {

struct Lesion {
  std::array<double, 3> center;
  std::array<double, 3> radii;  // core semi-axes; rim and shell add thickness
};

}  // namespace detail

inline std::pair<MultiModalVolume, LabelMask> generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(Rng::derive(cfg.seed, Rng::tag("phantom")));
  const Shape3 shape = cfg.shape;
  const std::array<double, 3> c{0.5 * (shape[0] - 1), 0.5 * (shape[1] - 1),
                                0.5 * (shape[2] - 1)};
  const std::array<double, 3> brain{0.45 * shape[0], 0.45 * shape[1], 0.45 * shape[2]};
  const double extent_max = cfg.radius_max + cfg.rim_thickness + cfg.edema_thickness;

  const int n_lesions = rng.uniform_int(cfg.n_lesions_min, cfg.n_lesions_max);
  std::vector<detail::Lesion> lesions;
  // an unlucky early lesion can block the rest; restart the whole layout then
  for (int restart = 0; restart < 25 && int(lesions.size()) < n_lesions; ++restart) {
    lesions.clear();
    for (int k = 0; k < n_lesions; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      // later attempts draw smaller radii so crowded subjects still succeed
      const double decay = std::max(0.0, 1.0 - attempt / 80.0);
      const double r_hi = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * decay;
      detail::Lesion cand;
      double max_ratio = 0.0;
      for (int a = 0; a < 3; ++a) {
        cand.radii[std::size_t(a)] = rng.uniform(cfg.radius_min, r_hi);
        const double ext = cand.radii[std::size_t(a)] + cfg.rim_thickness + cfg.edema_thickness;
        max_ratio = std::max(max_ratio, ext / brain[std::size_t(a)]);
      }
      // containment by construction: ||dc/B|| + max_a(ext_a/B_a) <= 1 keeps the
      // full structure (with rim and edema) inside the brain ellipsoid
      const double allowed = 0.98 - max_ratio;
      if (allowed <= 0.0) continue;
      double v[3];
      do {
        for (double& vi : v) vi = rng.uniform(-1.0, 1.0);
      } while (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] > 1.0);
      for (int a = 0; a < 3; ++a)
        cand.center[std::size_t(a)] =
            c[std::size_t(a)] + allowed * v[a] * brain[std::size_t(a)];
      // tumor structures (core + rim) must be disjoint; edema shells may merge
      bool overlaps = false;
      const double cand_tumor = std::max({cand.radii[0], cand.radii[1], cand.radii[2]}) +
                                cfg.rim_thickness;
      for (const auto& other : lesions) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double d = cand.center[std::size_t(a)] - other.center[std::size_t(a)];
          d2 += d * d;
        }
        const double other_tumor = std::max({other.radii[0], other.radii[1], other.radii[2]}) +
                                   cfg.rim_thickness;
        if (std::sqrt(d2) < cand_tumor + other_tumor + 1.0) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;
      lesions.push_back(cand);
      placed = true;
      }
      if (!placed) break;  // re-draw the whole layout
    }
  }
  if (int(lesions.size()) < n_lesions)
    throw PlacementFailure("could not place " + std::to_string(n_lesions) +
                           " lesions (max extent " + std::to_string(extent_max) + ")");

  LabelMask mask;
  mask.shape = shape;
  mask.meta.original_shape = shape;
  mask.meta.affine = identity_affine();
  mask.data.assign(std::size_t(numel(shape)), 0);

  MultiModalVolume vol;
  vol.meta = mask.meta;
  vol.data.resize({kNumModalities, shape[0], shape[1], shape[2]});

  const std::int64_t sp = numel(shape);
  std::vector<std::uint8_t> foreground(std::size_t(sp), 0);
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x) {
        const std::size_t idx = std::size_t((std::int64_t(z) * shape[1] + y) * shape[2] + x);
        const double bz = (z - c[0]) / brain[0], by = (y - c[1]) / brain[1],
                     bx = (x - c[2]) / brain[2];
        const double brho2 = bz * bz + by * by + bx * bx;
        if (brho2 > 1.0) continue;
        foreground[idx] = 1;

        auto inside = [&](const detail::Lesion& les, double extra) {
          double s = 0.0;
          const double p[3] = {double(z), double(y), double(x)};
          for (int a = 0; a < 3; ++a) {
            const double d =
                (p[a] - les.center[std::size_t(a)]) / (les.radii[std::size_t(a)] + extra);
            s += d * d;
          }
          return s <= 1.0;
        };
        // tissue priority across lesions: core over rim over edema shell
        int label = 0;
        for (const auto& les : lesions)
          if (inside(les, 0.0)) {
            label = 1;
            break;
          }
        if (!label)
          for (const auto& les : lesions)
            if (inside(les, cfg.rim_thickness)) {
              label = 3;
              break;
            }
        if (!label)
          for (const auto& les : lesions)
            if (inside(les, cfg.rim_thickness + cfg.edema_thickness)) {
              label = 2;
              break;
            }
        mask.data[idx] = std::uint8_t(label);

        // smooth radial falloff keeps healthy tissue non-constant
        const double falloff = 1.0 - 0.3 * brho2;
        for (int ch = 0; ch < kNumModalities; ++ch) {
          double v = kPhantomProfile[label][ch];
          if (label == 0) v *= falloff;
          vol.data.data[std::size_t(std::int64_t(ch) * sp) + idx] = float(v);
        }
      }

  if (cfg.noise_std > 0.0) {
    for (int ch = 0; ch < kNumModalities; ++ch)
      for (std::int64_t i = 0; i < sp; ++i)
        if (foreground[std::size_t(i)])
          vol.data.data[std::size_t(std::int64_t(ch) * sp + i)] +=
              float(rng.normal(0.0, cfg.noise_std));
  }
  return {std::move(vol), std::move(mask)};
}

// Writes n subjects (seeds base_seed + i) in the standard subject layout plus a
// manifest listing ids and seeds. Returns the subject directories.
inline std::vector<std::string> generate_cohort(int n, std::uint64_t base_seed,
                                                PhantomConfig cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  nlohmann::json manifest;
  manifest["subjects"] = nlohmann::json::array();
  std::vector<std::string> dirs;
  for (int i = 0; i < n; ++i) {
    cfg.seed = base_seed + std::uint64_t(i);
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "phantom_%03d", i);
    const std::string id = idbuf;
    const fs::path dir = fs::path(out_dir) / id;
    fs::create_directories(dir);
    auto [vol, mask] = generate_phantom(cfg);
    const std::int64_t sp = numel(cfg.shape);
    for (int ch = 0; ch < kNumModalities; ++ch)
      write_nifti_f32((dir / (id + "-" + kModalitySuffix[std::size_t(ch)] + ".nii.gz")).string(),
                      cfg.shape, vol.meta.affine,
                      vol.data.ptr() + std::size_t(std::int64_t(ch) * sp));
    write_mask(mask, (dir / (id + "-seg.nii.gz")).string());
    manifest["subjects"].push_back(
        {{"id", id}, {"seed", cfg.seed}, {"n_lesions_range", {cfg.n_lesions_min, cfg.n_lesions_max}}});
    dirs.push_back(dir.string());
  }
  manifest["shape"] = {cfg.shape[0], cfg.shape[1], cfg.shape[2]};
  manifest["base_seed"] = base_seed;
  std::ofstream mf(fs::path(out_dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
  return dirs;
}

}  // namespace voxseg
