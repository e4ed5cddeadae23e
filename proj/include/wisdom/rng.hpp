#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace wisdom {

// splitmix64 finalizer; used to derive independent stream seeds from
// (run seed, stream tag, counter) so that consuming one stream never
// shifts another. The trainer relies on this for bitwise reproducibility
// and for checkpoint resume.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t counter = 0) {
  return mix64(mix64(mix64(seed) ^ stream) ^ counter);
}

// mt19937_64 wrapper with fully specified derived draws. std::shuffle and
// the std distributions are implementation-defined, so everything here is
// spelled out to keep outputs identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  // 53-bit mantissa uniform in [0, 1)
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Lemire multiply-shift; bias is negligible for our range sizes
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

  // Box-Muller with a cached spare
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates, back to front
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// stream tags
inline constexpr std::uint64_t kStreamInit = 0x01;
inline constexpr std::uint64_t kStreamSampleS = 0x02;
inline constexpr std::uint64_t kStreamSampleU = 0x03;
inline constexpr std::uint64_t kStreamMaskInner = 0x04;
inline constexpr std::uint64_t kStreamMaskCommit = 0x05;
inline constexpr std::uint64_t kStreamSplit = 0x06;
inline constexpr std::uint64_t kStreamSynthetic = 0x07;
inline constexpr std::uint64_t kStreamWInit = 0x08;

}  // namespace wisdom
