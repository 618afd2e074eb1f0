// SPDX-License-Identifier: Apache-2.0
#include "fslr/rng.hpp"

namespace fslr {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(mix(seed, stream)) {}

Rng Rng::derive(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
  std::uint64_t s = splitmix64(stream_ ^ splitmix64(a));
  s = splitmix64(s ^ splitmix64(b + 0x1234567ull));
  s = splitmix64(s ^ splitmix64(c + 0x89ABCDEFull));
  return Rng(seed_, s);
}

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

Tensor standard_normal(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace fslr
