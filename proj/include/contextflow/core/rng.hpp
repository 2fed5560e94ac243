#pragma once

#include <cstdint>
#include <string_view>

namespace contextflow {

// The single PRNG used by every stochastic operation in the library.
//
// A SplitMix64 stream that can be split into independent child streams.
// Identical seed => identical run; each concurrent caller gets its own
// stream via split(). Splitting is stateless with respect to the parent's
// position: split(tag) derives the child from (seed, tag) only, so the
// order of draws interleaved with splits does not change child streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(mix_(seed)), state_(seed_) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix_(state_);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer on {0, ..., n-1}.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection-free modulo is fine at our scales (n << 2^64).
    return next_u64() % n;
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal();

  // Independent child stream derived from (seed, tag).
  Rng split(std::uint64_t tag) const {
    return Rng(mix_(seed_ ^ mix_(tag + 0x632be59bd9b4e019ULL)));
  }

  // Convenience: tag from a label string (FNV-1a).
  Rng split(std::string_view label) const;

 private:
  static std::uint64_t mix_(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace contextflow
