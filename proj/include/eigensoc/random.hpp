#pragma once

#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

namespace eigensoc {

// SplitMix64 bit generator. Eight bytes of state, so one can be kept per
// chain or per path; streams are derived by hashing (seed, index).
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t state = 0) : state_(state) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  SplitMix64 g(a ^ (b * 0xD1B54A32D192ED03ULL));
  g();
  return g() ^ b;
}

inline SplitMix64 substream(std::uint64_t seed, std::uint64_t index, std::uint64_t salt = 0) {
  return SplitMix64(mix64(mix64(seed, salt), index));
}

// Fills p[0..n) with independent standard normals drawn from g.
inline void fill_normal(SplitMix64& g, double* p, long n) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (long i = 0; i < n; ++i) p[i] = n01(g);
}

inline Eigen::VectorXd normal_vec(SplitMix64& g, long n) {
  Eigen::VectorXd v(n);
  fill_normal(g, v.data(), n);
  return v;
}

inline double uniform01(SplitMix64& g) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(g);
}

}  // namespace eigensoc
