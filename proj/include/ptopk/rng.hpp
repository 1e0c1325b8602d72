#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "ptopk/tensor.hpp"

namespace ptopk {

// splitmix64 output function.
inline uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Sequential uniform u64 source keyed by a single 64-bit state.
class Uniform64 {
 public:
  explicit Uniform64(uint64_t key) : state_(key) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in (0, 1], safe as a log() argument.
  double next_open01() { return (static_cast<double>(next() >> 11) + 1.0) * 0x1.0p-53; }

 private:
  uint64_t state_;
};

namespace detail {

// Ziggurat tables for the standard normal (Marsaglia & Tsang, 128 layers).
struct ZigguratTables {
  std::array<uint32_t, 128> kn;
  std::array<double, 128> wn;
  std::array<double, 128> fn;

  ZigguratTables() {
    const double m1 = 2147483648.0;
    double dn = 3.442619855899, tn = dn;
    const double vn = 9.91256303526217e-3;
    double q = vn / std::exp(-0.5 * dn * dn);
    kn[0] = static_cast<uint32_t>((dn / q) * m1);
    kn[1] = 0;
    wn[0] = q / m1;
    wn[127] = dn / m1;
    fn[0] = 1.0;
    fn[127] = std::exp(-0.5 * dn * dn);
    for (int i = 126; i >= 1; i--) {
      dn = std::sqrt(-2.0 * std::log(vn / dn + std::exp(-0.5 * dn * dn)));
      kn[i + 1] = static_cast<uint32_t>((dn / tn) * m1);
      tn = dn;
      fn[i] = std::exp(-0.5 * dn * dn);
      wn[i] = dn / m1;
    }
  }
};

inline const ZigguratTables& ziggurat() {
  static const ZigguratTables t;
  return t;
}

}  // namespace detail

// One standard-normal draw via the ziggurat method.
inline double normal_draw(Uniform64& u) {
  const auto& z = detail::ziggurat();
  const double r = 3.442619855899;
  for (;;) {
    int32_t hz = static_cast<int32_t>(u.next());
    uint32_t iz = static_cast<uint32_t>(hz) & 127u;
    uint64_t ahz = static_cast<uint64_t>(hz < 0 ? -static_cast<int64_t>(hz) : static_cast<int64_t>(hz));
    if (ahz < z.kn[iz]) return hz * z.wn[iz];
    if (iz == 0) {
      // tail beyond |x| = r
      double x, y;
      do {
        x = -std::log(u.next_open01()) / r;
        y = -std::log(u.next_open01());
      } while (y + y < x * x);
      return hz > 0 ? r + x : -r - x;
    }
    double x = hz * z.wn[iz];
    double uf = static_cast<double>(u.next() >> 11) * 0x1.0p-53;
    if (z.fn[iz] + uf * (z.fn[iz - 1] - z.fn[iz]) < std::exp(-0.5 * x * x)) return x;
  }
}

/// Counter-based stream of Gaussian blocks: the block drawn at a given
/// (base_seed, counter) is a pure function of that pair, and each
/// gaussian_sample call advances the counter by one. Parallel consumers
/// derive independent child streams by picking distinct counters.
struct RngStream {
  uint64_t base_seed = 0;
  uint64_t counter = 0;

  RngStream() = default;
  RngStream(uint64_t seed, uint64_t ctr = 0) : base_seed(seed), counter(ctr) {}

  RngStream child(uint64_t j) const { return RngStream(base_seed, j); }

  uint64_t block_key() const { return mix64(mix64(base_seed) ^ (counter * 0xD1342543DE82EF95ULL + 0x2545F4914F6CDD1DULL)); }
};

/// i.i.d. standard-normal tensor, deterministic in (base_seed, counter, shape).
/// Advances rng.counter.
inline Tensor gaussian_sample(RngStream& rng, const Shape& shape) {
  Tensor out(shape);
  Uniform64 u(rng.block_key());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(normal_draw(u));
  rng.counter += 1;
  return out;
}

/// Uniform u64 stream helper for non-Gaussian needs (shuffles, placements).
inline Uniform64 uniform_stream(const RngStream& rng) { return Uniform64(rng.block_key()); }

}  // namespace ptopk
