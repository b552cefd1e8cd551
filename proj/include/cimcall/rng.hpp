#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace cimcall {

inline constexpr uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline constexpr uint64_t hash_combine(uint64_t a, uint64_t b) {
  return mix64(a ^ (mix64(b) + 0x632BE59BD9B4E019ull + (a << 6) + (a >> 2)));
}

struct StreamId {
  uint64_t tile = 0;
  uint64_t invocation = 0;
};

// Counter-based generator: the k-th output is a pure function of
// (seed, stream id, k), so streams can be handed to any thread and replayed.
class RngStream {
 public:
  using result_type = uint64_t;

  RngStream() : RngStream(0, {}) {}
  RngStream(uint64_t seed, StreamId id) : seed_(seed), id_(id) {
    key_ = hash_combine(hash_combine(mix64(seed), id.tile), id.invocation);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(key_ + 0x9E3779B97F4A7C15ull * counter_++); }

  uint64_t seed() const { return seed_; }
  StreamId id() const { return id_; }
  uint64_t counter() const { return counter_; }

  // Independent child stream; does not advance this one.
  RngStream split(uint64_t tile, uint64_t invocation) const {
    return RngStream(hash_combine(key_, 0xA5A5A5A5ull), {tile, invocation});
  }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(*this);
  }

  // Uniform integer in [lo, hi].
  int64_t uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(*this);
  }

 private:
  uint64_t seed_;
  StreamId id_;
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace cimcall
