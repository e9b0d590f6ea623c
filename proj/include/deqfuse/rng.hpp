#ifndef DEQFUSE_RNG_HPP
#define DEQFUSE_RNG_HPP

#include <cstdint>

#include "deqfuse/tensor.hpp"

namespace deqfuse {

/// xoshiro256** seeded through splitmix64. The generator is pinned by name so
/// the draw stream is reproducible across builds and bindings:
///   - seeding: four splitmix64 outputs of the user seed
///   - uniforms: (next() >> 11) * 2^-53 in [0, 1)
///   - gaussians: Marsaglia polar method, spare value cached
/// Identical seeds yield identical streams; state advances only through the
/// next_* calls.
class RngState {
 public:
  explicit RngState(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64();
  double next_uniform();
  double next_gaussian();

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// rows x cols tensor of i.i.d. N(0, scale^2) draws; advances rng.
Tensor2 randn(RngState& rng, std::size_t rows, std::size_t cols, double scale);

}  // namespace deqfuse

#endif  // DEQFUSE_RNG_HPP
