#pragma once

// Deterministic seeded randomness.
//
// Every random decision in the pipeline draws from an RngStream that is
// derived from the global seed plus a purpose tag (and usually an index such
// as an example id). Derivation is pure hashing, so streams are independent
// of the order in which work is scheduled: example #17 sees the same draws
// whether it is generated first or last, alone or in a batch.
//
// All sampling is done by explicit inverse-CDF / arithmetic transforms on raw
// 64-bit engine output; none of the distribution adapters from <random> are
// used, since their draw sequences are implementation-defined.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "rllr/common.hpp"

namespace rllr {

// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Order-sensitive combination of a seed with one more word.
inline uint64_t seed_combine(uint64_t seed, uint64_t value) {
  return mix64(seed ^ mix64(value));
}

// Hash a whole tag list into a child seed.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> tags) {
  uint64_t s = mix64(base);
  for (uint64_t t : tags) s = seed_combine(s, t);
  return s;
}

// Purpose tags for stream derivation. Values are arbitrary but frozen:
// changing one silently changes every artifact downstream of it.
namespace stream_tag {
inline constexpr uint64_t data_gen = 0x01;
inline constexpr uint64_t rationale = 0x02;
inline constexpr uint64_t model_init = 0x03;
inline constexpr uint64_t sft_shuffle = 0x04;
inline constexpr uint64_t pair_sampling = 0x05;
inline constexpr uint64_t label_pairs = 0x06;
inline constexpr uint64_t rm_train = 0x07;
inline constexpr uint64_t ppo_rollout = 0x08;
inline constexpr uint64_t ppo_update = 0x09;
inline constexpr uint64_t lambda_probe = 0x0a;
inline constexpr uint64_t grad_check = 0x0b;
inline constexpr uint64_t eval_decode = 0x0c;
}  // namespace stream_tag

class RngStream {
 public:
  explicit RngStream(uint64_t seed) : engine_(seed), seed_(seed) {}

  // Child stream derived by hashing; independent of this stream's draw state.
  RngStream child(std::initializer_list<uint64_t> tags) const {
    return RngStream(derive_seed(seed_, tags));
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision; one engine draw.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi] inclusive; one engine draw.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const double span = static_cast<double>(hi - lo + 1);
    int64_t off = static_cast<int64_t>(next_double() * span);
    if (off > hi - lo) off = hi - lo;  // guard against the impossible edge
    return lo + off;
  }

  // Uniform index in [0, n); one engine draw.
  size_t choice(size_t n) {
    return static_cast<size_t>(uniform_int(0, static_cast<int64_t>(n) - 1));
  }

  // Uniform in [lo, hi); one engine draw.
  double uniform_real(double lo, double hi) { return lo + next_double() * (hi - lo); }

  // Standard normal via Box-Muller; two engine draws per call.
  double next_gaussian() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // In-place Fisher-Yates shuffle; n-1 engine draws.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = choice(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_ = 0;
};

// Convenience: stream for (global_seed, tag, index...).
inline RngStream make_stream(uint64_t global_seed, uint64_t tag) {
  return RngStream(derive_seed(global_seed, {tag}));
}
inline RngStream make_stream(uint64_t global_seed, uint64_t tag, uint64_t index) {
  return RngStream(derive_seed(global_seed, {tag, index}));
}
inline RngStream make_stream(uint64_t global_seed, uint64_t tag, uint64_t a, uint64_t b) {
  return RngStream(derive_seed(global_seed, {tag, a, b}));
}

}  // namespace rllr
