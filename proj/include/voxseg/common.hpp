#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace voxseg {

// ---------------------------------------------------------------------------
// Error hierarchy. The CLI maps categories to exit codes:
//   ConfigError -> 1, DataError -> 2, NumericError -> 3.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

#define VOXSEG_DATA_ERROR(NAME)     \
  struct NAME : DataError {         \
    explicit NAME(const std::string& m) : DataError(#NAME ": " + m) {} \
  }
#define VOXSEG_NUMERIC_ERROR(NAME)  \
  struct NAME : NumericError {      \
    explicit NAME(const std::string& m) : NumericError(#NAME ": " + m) {} \
  }

VOXSEG_DATA_ERROR(ShapeMismatch);
VOXSEG_DATA_ERROR(BadLabel);
VOXSEG_DATA_ERROR(UnreadableFile);
VOXSEG_DATA_ERROR(TargetTooLarge);
VOXSEG_DATA_ERROR(MissingMeta);
VOXSEG_DATA_ERROR(IoError);
VOXSEG_DATA_ERROR(CroppedMaskNotRestored);
VOXSEG_DATA_ERROR(GridMismatch);
VOXSEG_DATA_ERROR(WrongMemberCount);
VOXSEG_DATA_ERROR(CorruptFile);
VOXSEG_DATA_ERROR(SpecHashMismatch);
VOXSEG_DATA_ERROR(EmptySurface);
VOXSEG_DATA_ERROR(PlacementFailure);
VOXSEG_DATA_ERROR(EmptyDataset);
VOXSEG_DATA_ERROR(IndivisibleShape);
VOXSEG_DATA_ERROR(DegenerateChannel);

VOXSEG_NUMERIC_ERROR(NonFinite);
VOXSEG_NUMERIC_ERROR(NotNormalized);
VOXSEG_NUMERIC_ERROR(NonFiniteLoss);
VOXSEG_NUMERIC_ERROR(NonFiniteActivation);

#undef VOXSEG_DATA_ERROR
#undef VOXSEG_NUMERIC_ERROR

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

using Shape3 = std::array<int, 3>;

inline std::string to_string(const Shape3& s) {
  return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
         std::to_string(s[2]) + ")";
}

inline std::int64_t numel(const Shape3& s) {
  return std::int64_t(s[0]) * s[1] * s[2];
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 with hand-rolled distributions so results
// do not depend on the standard library implementation.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    // splitmix-expanded state, as recommended for seeding mt19937_64
    s_[0] = splitmix64(seed);
    s_[1] = splitmix64(s_[0]);
    s_[2] = splitmix64(s_[1]);
    s_[3] = splitmix64(s_[2]);
  }

  // xoshiro256**
  std::uint64_t next() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  double uniform01() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + int(next() % std::uint64_t(hi - lo + 1));
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller; u1 kept away from 0
    double u1 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925287 * u2);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Deterministic stream derivation for stage/sample fan-out.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
  }
  static std::uint64_t tag(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  std::uint64_t s_[4];
};

inline std::uint64_t fnv1a64(const std::string& s) { return Rng::tag(s); }

}  // namespace voxseg
