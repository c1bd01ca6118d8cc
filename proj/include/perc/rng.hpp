#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace perc {

// Philox4x32-10 counter-based generator with explicit state. The same
// (seed, stream) pair yields the same draw sequence on every platform;
// independent streams come from split(), never from shared mutable state.
//
// Normal variates use the trigonometric Box-Muller transform on
// consecutive uniform pairs; the second value of each pair is cached.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0);

  uint32_t next_u32();
  uint64_t next_u64();

  // uniform in [0, 1), 53-bit mantissa
  double next_double();
  // uniform in (0, 1]; safe as a log() argument
  double next_double_pos();

  double next_normal();
  float next_normal_f() { return static_cast<float>(next_normal()); }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n);

  // Child generator on an independent stream. Deterministic in
  // (seed, this->stream, id); children of distinct ids never collide.
  Rng split(uint64_t id) const;

  void fill_normal(float* dst, size_t n, float stddev = 1.0f);
  void fill_normal(double* dst, size_t n, double stddev = 1.0);

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

 private:
  void refill();

  uint64_t seed_ = 0;
  uint64_t stream_ = 0;
  std::array<uint32_t, 2> key_{};
  std::array<uint32_t, 4> counter_{};
  std::array<uint32_t, 4> block_{};
  int block_pos_ = 4;  // 4 == empty
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace perc
