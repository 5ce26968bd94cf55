#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

enum class Region { ET = 0, TC = 1, WT = 2 };
inline const char* to_string(Region r) {
  switch (r) {
    case Region::ET: return "ET";
    case Region::TC: return "TC";
    case Region::WT: return "WT";
  }
  return "?";
}

struct MetricConfig {
  int connectivity = 26;       // 6, 18 or 26
  int dilation_iters = 3;      // gt dilation before matching
  double hd95_penalty = 374.0; // per unmatched lesion
  int min_lesion_voxels = 50;  // components below are dropped from both masks
};

// ---------------------------------------------------------------------------
// connected components: two-pass scan with union-find
// ---------------------------------------------------------------------------

struct LesionField {
  std::vector<std::int32_t> labels;  // 0 = background, 1..n_lesions
  Shape3 shape{0, 0, 0};
  int n_lesions = 0;
  int connectivity = 26;

  std::int32_t at(int z, int y, int x) const {
    return labels[std::size_t((std::int64_t(z) * shape[1] + y) * shape[2] + x)];
  }
};

namespace detail {

inline std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
  std::vector<std::array<int, 3>> offs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manh = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manh == 0) continue;
        if (connectivity == 6 && manh > 1) continue;
        if (connectivity == 18 && manh > 2) continue;
        offs.push_back({dz, dy, dx});
      }
  return offs;
}

struct UnionFind {
  std::vector<std::int32_t> parent;
  std::int32_t make() {
    parent.push_back(std::int32_t(parent.size()));
    return std::int32_t(parent.size() - 1);
  }
  std::int32_t find(std::int32_t i) {
    while (parent[std::size_t(i)] != i) {
      parent[std::size_t(i)] = parent[std::size_t(parent[std::size_t(i)])];
      i = parent[std::size_t(i)];
    }
    return i;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::size_t(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace detail

inline LesionField connected_components(const std::vector<std::uint8_t>& binary,
                                        const Shape3& shape, int connectivity = 26) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("connectivity must be 6, 18 or 26");
  LesionField field;
  field.shape = shape;
  field.connectivity = connectivity;
  field.labels.assign(binary.size(), 0);

  // offsets pointing at already-scanned voxels
  std::vector<std::array<int, 3>> prev;
  for (const auto& o : detail::neighbor_offsets(connectivity))
    if (o[0] < 0 || (o[0] == 0 && o[1] < 0) || (o[0] == 0 && o[1] == 0 && o[2] < 0))
      prev.push_back(o);

  detail::UnionFind uf;
  uf.make();  // provisional label 0 = background, never united
  std::vector<std::int32_t> provisional(binary.size(), 0);
  const int D = shape[0], H = shape[1], W = shape[2];
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t idx = std::size_t((std::int64_t(z) * H + y) * W + x);
        if (!binary[idx]) continue;
        std::int32_t label = 0;
        for (const auto& o : prev) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (nz < 0 || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          const std::int32_t nl =
              provisional[std::size_t((std::int64_t(nz) * H + ny) * W + nx)];
          if (!nl) continue;
          if (!label)
            label = nl;
          else
            uf.unite(label, nl);
        }
        if (!label) label = uf.make();
        provisional[idx] = label;
      }

  // second pass: map roots to consecutive ids in scan order of first occurrence
  std::vector<std::int32_t> root_to_id(uf.parent.size(), 0);
  std::int32_t next_id = 0;
  for (std::size_t i = 0; i < binary.size(); ++i) {
    if (!provisional[i]) continue;
    const std::int32_t r = uf.find(provisional[i]);
    if (!root_to_id[std::size_t(r)]) root_to_id[std::size_t(r)] = ++next_id;
    field.labels[i] = root_to_id[std::size_t(r)];
  }
  field.n_lesions = next_id;
  return field;
}

// Removes components smaller than min_voxels and renumbers ids consecutively,
// keeping the first-voxel scan order.
inline LesionField filter_small_lesions(const LesionField& field, int min_voxels) {
  if (min_voxels <= 1) return field;
  std::vector<std::int64_t> counts(std::size_t(field.n_lesions + 1), 0);
  for (auto l : field.labels) ++counts[std::size_t(l)];
  std::vector<std::int32_t> remap(std::size_t(field.n_lesions + 1), 0);
  std::int32_t next_id = 0;
  for (int i = 1; i <= field.n_lesions; ++i)
    if (counts[std::size_t(i)] >= min_voxels) remap[std::size_t(i)] = ++next_id;
  LesionField out;
  out.shape = field.shape;
  out.connectivity = field.connectivity;
  out.n_lesions = next_id;
  out.labels.resize(field.labels.size());
  for (std::size_t i = 0; i < field.labels.size(); ++i)
    out.labels[i] = remap[std::size_t(field.labels[i])];
  return out;
}

// ---------------------------------------------------------------------------
// lesion matching: BFS dilation of each gt lesion, overlap assignment
// ---------------------------------------------------------------------------

struct LesionMatching {
  // assigned[g] holds the pred ids matched to gt lesion g+1
  std::vector<std::vector<std::int32_t>> assigned;
  std::vector<std::int32_t> fp_pred_ids;
  std::vector<std::int32_t> fn_gt_ids;
};

namespace detail {

// Voxels within Chebyshev distance `iters` of the lesion, i.e. `iters`
// applications of 26-neighborhood dilation.
inline std::vector<std::int64_t> dilated_voxels(const LesionField& field, std::int32_t id,
                                                int iters) {
  const int D = field.shape[0], H = field.shape[1], W = field.shape[2];
  std::vector<std::int64_t> frontier, result;
  std::vector<std::uint8_t> seen(field.labels.size(), 0);
  for (std::size_t i = 0; i < field.labels.size(); ++i)
    if (field.labels[i] == id) {
      seen[i] = 1;
      frontier.push_back(std::int64_t(i));
      result.push_back(std::int64_t(i));
    }
  for (int it = 0; it < iters; ++it) {
    std::vector<std::int64_t> next;
    for (std::int64_t idx : frontier) {
      const int z = int(idx / (std::int64_t(H) * W));
      const int y = int((idx / W) % H);
      const int x = int(idx % W);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nz = z + dz, ny = y + dy, nx = x + dx;
            if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            const std::int64_t nidx = (std::int64_t(nz) * H + ny) * W + nx;
            if (seen[std::size_t(nidx)]) continue;
            seen[std::size_t(nidx)] = 1;
            next.push_back(nidx);
            result.push_back(nidx);
          }
    }
    frontier = std::move(next);
  }
  return result;
}

}  // namespace detail

inline LesionMatching match_lesions(const LesionField& gt, const LesionField& pred,
                                    int dilation_iters = 3) {
  if (gt.shape != pred.shape) throw GridMismatch("lesion fields are on different grids");
  LesionMatching m;
  m.assigned.resize(std::size_t(gt.n_lesions));

  // overlap[g][p] = |dilate(gt_g) ∩ pred_p|; raw overlap breaks ties so that
  // identical masks always match each lesion to itself
  std::vector<std::vector<std::int64_t>> overlap(
      std::size_t(gt.n_lesions), std::vector<std::int64_t>(std::size_t(pred.n_lesions + 1), 0));
  std::vector<std::vector<std::int64_t>> raw(
      std::size_t(gt.n_lesions), std::vector<std::int64_t>(std::size_t(pred.n_lesions + 1), 0));
  for (std::int32_t g = 1; g <= gt.n_lesions; ++g)
    for (std::int64_t idx : detail::dilated_voxels(gt, g, dilation_iters)) {
      const std::int32_t p = pred.labels[std::size_t(idx)];
      if (p > 0) {
        ++overlap[std::size_t(g - 1)][std::size_t(p)];
        if (gt.labels[std::size_t(idx)] == g) ++raw[std::size_t(g - 1)][std::size_t(p)];
      }
    }

  for (std::int32_t p = 1; p <= pred.n_lesions; ++p) {
    std::int32_t best_g = 0;
    std::int64_t best_ov = 0, best_raw = 0;
    for (std::int32_t g = 1; g <= gt.n_lesions; ++g) {
      const std::int64_t ov = overlap[std::size_t(g - 1)][std::size_t(p)];
      const std::int64_t rv = raw[std::size_t(g - 1)][std::size_t(p)];
      if (ov > best_ov || (ov == best_ov && rv > best_raw)) {  // final ties: lower gt id
        best_ov = ov;
        best_raw = rv;
        best_g = g;
      }
    }
    if (best_g)
      m.assigned[std::size_t(best_g - 1)].push_back(p);
    else
      m.fp_pred_ids.push_back(p);
  }
  for (std::int32_t g = 1; g <= gt.n_lesions; ++g)
    if (m.assigned[std::size_t(g - 1)].empty()) m.fn_gt_ids.push_back(g);
  return m;
}

// ---------------------------------------------------------------------------
// exact Euclidean distance transform (squared), separable lower-envelope scan
// ---------------------------------------------------------------------------

namespace detail {

inline void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                   std::vector<double>& zbuf, int n, double h) {
  // lower envelope of parabolas y = f[i] + (x - i*h)^2
  int k = 0;
  v[0] = 0;
  zbuf[0] = -std::numeric_limits<double>::infinity();
  zbuf[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    if (f[std::size_t(q)] == std::numeric_limits<double>::infinity()) continue;
    double s;
    while (true) {
      const int p = v[std::size_t(k)];
      if (f[std::size_t(p)] == std::numeric_limits<double>::infinity()) {
        // no finite parabola yet
        if (k == 0) {
          v[0] = q;
          zbuf[0] = -std::numeric_limits<double>::infinity();
          zbuf[1] = std::numeric_limits<double>::infinity();
          s = -std::numeric_limits<double>::infinity();
          break;
        }
        --k;
        continue;
      }
      const double pq = q * h, pp = p * h;
      s = ((f[std::size_t(q)] + pq * pq) - (f[std::size_t(p)] + pp * pp)) / (2 * pq - 2 * pp);
      if (s <= zbuf[std::size_t(k)]) {
        --k;
        continue;
      }
      ++k;
      v[std::size_t(k)] = q;
      zbuf[std::size_t(k)] = s;
      zbuf[std::size_t(k + 1)] = std::numeric_limits<double>::infinity();
      break;
    }
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const double x = q * h;
    while (zbuf[std::size_t(k + 1)] < x) ++k;
    const int p = v[std::size_t(k)];
    if (f[std::size_t(p)] == std::numeric_limits<double>::infinity())
      d[std::size_t(q)] = std::numeric_limits<double>::infinity();
    else
      d[std::size_t(q)] = (x - p * h) * (x - p * h) + f[std::size_t(p)];
  }
}

// squared EDT over a grid; feature voxels have value 0, others +inf
inline void edt_3d(std::vector<double>& grid, const Shape3& shape,
                   const std::array<double, 3>& spacing) {
  const int D = shape[0], H = shape[1], W = shape[2];
  const int nmax = std::max({D, H, W});
  std::vector<double> f(static_cast<std::size_t>(nmax)), d(static_cast<std::size_t>(nmax));
  std::vector<int> v(static_cast<std::size_t>(nmax));
  std::vector<double> z(static_cast<std::size_t>(nmax + 1));

  // along axis 2 (x)
  for (int zz = 0; zz < D; ++zz)
    for (int y = 0; y < H; ++y) {
      double* row = grid.data() + (std::int64_t(zz) * H + y) * W;
      for (int x = 0; x < W; ++x) f[std::size_t(x)] = row[x];
      edt_1d(f, d, v, z, W, spacing[2]);
      for (int x = 0; x < W; ++x) row[x] = d[std::size_t(x)];
    }
  // along axis 1 (y)
  for (int zz = 0; zz < D; ++zz)
    for (int x = 0; x < W; ++x) {
      for (int y = 0; y < H; ++y)
        f[std::size_t(y)] = grid[std::size_t((std::int64_t(zz) * H + y) * W + x)];
      edt_1d(f, d, v, z, H, spacing[1]);
      for (int y = 0; y < H; ++y)
        grid[std::size_t((std::int64_t(zz) * H + y) * W + x)] = d[std::size_t(y)];
    }
  // along axis 0 (z)
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int zz = 0; zz < D; ++zz)
        f[std::size_t(zz)] = grid[std::size_t((std::int64_t(zz) * H + y) * W + x)];
      edt_1d(f, d, v, z, D, spacing[0]);
      for (int zz = 0; zz < D; ++zz)
        grid[std::size_t((std::int64_t(zz) * H + y) * W + x)] = d[std::size_t(zz)];
    }
}

}  // namespace detail

// Linear-interpolation percentile of a sorted sample.
inline double percentile_sorted(std::vector<double>& v, double p) {
  std::sort(v.begin(), v.end());
  const double rank = p * double(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(rank));
  if (lo + 1 >= v.size()) return v.back();
  const double frac = rank - double(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// 95th percentile of pooled symmetric directed nearest-neighbor distances (mm)
// between two voxel coordinate sets.
inline double hd95(const std::vector<std::array<int, 3>>& a,
                   const std::vector<std::array<int, 3>>& b,
                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0}) {
  if (a.empty() || b.empty()) throw EmptySurface("hd95 requires nonempty surfaces");

  // common bounding box; the EDT restricted to it is exact for queries inside
  std::array<int, 3> lo{INT32_MAX, INT32_MAX, INT32_MAX}, hi{INT32_MIN, INT32_MIN, INT32_MIN};
  for (const auto* set : {&a, &b})
    for (const auto& c : *set)
      for (int i = 0; i < 3; ++i) {
        lo[std::size_t(i)] = std::min(lo[std::size_t(i)], c[std::size_t(i)]);
        hi[std::size_t(i)] = std::max(hi[std::size_t(i)], c[std::size_t(i)]);
      }
  const Shape3 dims{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  const std::size_t n = std::size_t(numel(dims));
  auto flat = [&](const std::array<int, 3>& c) {
    return std::size_t((std::int64_t(c[0] - lo[0]) * dims[1] + (c[1] - lo[1])) * dims[2] +
                       (c[2] - lo[2]));
  };

  std::vector<double> dists;
  dists.reserve(a.size() + b.size());
  const double inf = std::numeric_limits<double>::infinity();
  {
    std::vector<double> grid(n, inf);
    for (const auto& c : b) grid[flat(c)] = 0.0;
    detail::edt_3d(grid, dims, spacing);
    for (const auto& c : a) dists.push_back(std::sqrt(grid[flat(c)]));
  }
  {
    std::vector<double> grid(n, inf);
    for (const auto& c : a) grid[flat(c)] = 0.0;
    detail::edt_3d(grid, dims, spacing);
    for (const auto& c : b) dists.push_back(std::sqrt(grid[flat(c)]));
  }
  return percentile_sorted(dists, 0.95);
}

// Boundary voxels: lesion voxels with a 6-neighbor outside the lesion
// (the array edge counts as outside).
inline std::vector<std::array<int, 3>> boundary_voxels(const std::vector<std::uint8_t>& in_set,
                                                       const Shape3& shape) {
  std::vector<std::array<int, 3>> out;
  const int D = shape[0], H = shape[1], W = shape[2];
  auto at = [&](int z, int y, int x) {
    return in_set[std::size_t((std::int64_t(z) * H + y) * W + x)];
  };
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!at(z, y, x)) continue;
        const bool border = z == 0 || z == D - 1 || y == 0 || y == H - 1 || x == 0 ||
                            x == W - 1 || !at(z - 1, y, x) || !at(z + 1, y, x) ||
                            !at(z, y - 1, x) || !at(z, y + 1, x) || !at(z, y, x - 1) ||
                            !at(z, y, x + 1);
        if (border) out.push_back({z, y, x});
      }
  return out;
}

// ---------------------------------------------------------------------------
// lesion-wise scores
// ---------------------------------------------------------------------------

struct MatchedPair {
  std::int32_t gt_id;
  std::vector<std::int32_t> pred_ids;
  double dice;
  double hd95;
};

struct LesionScore {
  Region region = Region::WT;
  std::vector<MatchedPair> matched;
  std::vector<std::int32_t> false_positive_ids;
  std::vector<std::int32_t> false_negative_ids;
  double lesion_wise_dice = 1.0;
  double lesion_wise_hd95 = 0.0;
};

inline LesionScore score_region(const std::vector<std::uint8_t>& gt_region,
                                const std::vector<std::uint8_t>& pred_region,
                                const Shape3& shape, const MetricConfig& cfg = {},
                                const std::array<double, 3>& spacing = {1.0, 1.0, 1.0}) {
  if (gt_region.size() != pred_region.size())
    throw GridMismatch("region masks differ in size");
  LesionScore score;
  const LesionField gt =
      filter_small_lesions(connected_components(gt_region, shape, cfg.connectivity),
                           cfg.min_lesion_voxels);
  const LesionField pred =
      filter_small_lesions(connected_components(pred_region, shape, cfg.connectivity),
                           cfg.min_lesion_voxels);

  if (gt.n_lesions == 0 && pred.n_lesions == 0) {
    score.lesion_wise_dice = 1.0;  // perfect agreement on absence
    score.lesion_wise_hd95 = 0.0;
    return score;
  }

  const LesionMatching m = match_lesions(gt, pred, cfg.dilation_iters);
  score.false_positive_ids = m.fp_pred_ids;
  score.false_negative_ids = m.fn_gt_ids;

  std::vector<double> dices, hds;
  for (std::int32_t g = 1; g <= gt.n_lesions; ++g) {
    const auto& preds = m.assigned[std::size_t(g - 1)];
    if (preds.empty()) continue;
    std::vector<std::uint8_t> gt_set(gt.labels.size(), 0), pred_set(gt.labels.size(), 0);
    std::int64_t gt_n = 0, pred_n = 0, inter = 0;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const bool in_gt = gt.labels[i] == g;
      bool in_pred = false;
      for (std::int32_t p : preds)
        if (pred.labels[i] == p) {
          in_pred = true;
          break;
        }
      gt_set[i] = in_gt;
      pred_set[i] = in_pred;
      gt_n += in_gt;
      pred_n += in_pred;
      inter += (in_gt && in_pred);
    }
    MatchedPair pair;
    pair.gt_id = g;
    pair.pred_ids = preds;
    pair.dice = gt_n + pred_n > 0 ? 2.0 * double(inter) / double(gt_n + pred_n) : 1.0;
    pair.hd95 = hd95(boundary_voxels(gt_set, shape), boundary_voxels(pred_set, shape), spacing);
    dices.push_back(pair.dice);
    hds.push_back(pair.hd95);
    score.matched.push_back(std::move(pair));
  }
  const std::size_t n_unmatched = m.fp_pred_ids.size() + m.fn_gt_ids.size();
  for (std::size_t i = 0; i < n_unmatched; ++i) {
    dices.push_back(0.0);
    hds.push_back(cfg.hd95_penalty);
  }
  score.lesion_wise_dice =
      dices.empty() ? 1.0 : std::accumulate(dices.begin(), dices.end(), 0.0) / double(dices.size());
  score.lesion_wise_hd95 =
      hds.empty() ? 0.0 : std::accumulate(hds.begin(), hds.end(), 0.0) / double(hds.size());
  return score;
}

// ---------------------------------------------------------------------------
// cohort evaluation: Tables 1-2 column structure
// ---------------------------------------------------------------------------

struct SubjectScores {
  std::string id;
  std::array<double, 3> dice{};  // indexed by Region: ET, TC, WT
  std::array<double, 3> hd95{};
};

struct CohortReport {
  std::vector<SubjectScores> subjects;
  SubjectScores mean;
  SubjectScores median;
};

inline SubjectScores evaluate_pair(const LabelMask& pred, const LabelMask& gt,
                                   const MetricConfig& cfg = {}, const std::string& id = "") {
  if (pred.shape != gt.shape) throw GridMismatch("pred/gt grids differ for subject " + id);
  const RegionMasks pr = aggregate_regions(pred);
  const RegionMasks gr = aggregate_regions(gt);
  const auto spacing = affine_spacing(gt.meta.affine);
  SubjectScores s;
  s.id = id;
  const std::array<const std::vector<std::uint8_t>*, 3> gt_regions{&gr.et, &gr.tc, &gr.wt};
  const std::array<const std::vector<std::uint8_t>*, 3> pr_regions{&pr.et, &pr.tc, &pr.wt};
  for (int r = 0; r < 3; ++r) {
    LesionScore sc = score_region(*gt_regions[std::size_t(r)], *pr_regions[std::size_t(r)],
                                  gt.shape, cfg, spacing);
    s.dice[std::size_t(r)] = sc.lesion_wise_dice;
    s.hd95[std::size_t(r)] = sc.lesion_wise_hd95;
  }
  return s;
}

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

inline CohortReport evaluate_cohort(const std::vector<std::pair<LabelMask, LabelMask>>& pairs,
                                    const MetricConfig& cfg = {},
                                    const std::vector<std::string>& ids = {}) {
  CohortReport report;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string id = i < ids.size() ? ids[i] : "subject" + std::to_string(i);
    report.subjects.push_back(evaluate_pair(pairs[i].first, pairs[i].second, cfg, id));
  }
  report.mean.id = "mean";
  report.median.id = "median";
  for (int r = 0; r < 3; ++r) {
    std::vector<double> d, h;
    for (const auto& s : report.subjects) {
      d.push_back(s.dice[std::size_t(r)]);
      h.push_back(s.hd95[std::size_t(r)]);
    }
    if (!d.empty()) {
      report.mean.dice[std::size_t(r)] = std::accumulate(d.begin(), d.end(), 0.0) / double(d.size());
      report.mean.hd95[std::size_t(r)] = std::accumulate(h.begin(), h.end(), 0.0) / double(h.size());
      report.median.dice[std::size_t(r)] = detail::median_of(d);
      report.median.hd95[std::size_t(r)] = detail::median_of(h);
    }
  }
  return report;
}

inline std::string report_csv(const CohortReport& report) {
  std::string out = "subject,dice_et,dice_tc,dice_wt,hd95_et,hd95_tc,hd95_wt\n";
  char buf[256];
  auto row = [&](const SubjectScores& s) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", s.id.c_str(),
                  s.dice[0], s.dice[1], s.dice[2], s.hd95[0], s.hd95[1], s.hd95[2]);
    out += buf;
  };
  for (const auto& s : report.subjects) row(s);
  row(report.mean);
  row(report.median);
  return out;
}

// plain volumetric dice over a whole region; debugging aid, not the primary metric
inline double volumetric_dice(const std::vector<std::uint8_t>& a,
                              const std::vector<std::uint8_t>& b) {
  std::int64_t inter = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]);
    total += (a[i] != 0) + (b[i] != 0);
  }
  return total == 0 ? 1.0 : 2.0 * double(inter) / double(total);
}

}  // namespace voxseg
