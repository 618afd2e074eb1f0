// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "fslr/tensor.hpp"

namespace fslr {

/// Seeded random source. Identical (seed, stream) pairs and identical call
/// sequences give identical outputs; `derive` spawns statistically
/// independent child streams keyed by (run, step, purpose) style tags.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  Rng derive(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const;

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// IID N(0, 1) entries.
Tensor standard_normal(Rng& rng, Shape shape);

// Purpose tags for derived streams.
enum class StreamPurpose : std::uint64_t {
  kInit = 1,
  kData = 2,
  kTrainOrder = 3,
  kProbeOrder = 4,
  kProbeOmega = 5,
  kSampler = 6,
};

}  // namespace fslr
