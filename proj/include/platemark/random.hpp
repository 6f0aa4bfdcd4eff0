// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace platemark {

/// SplitMix64 finalizer; used to derive independent seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return mix_seed(mix_seed(master) ^ mix_seed(stream + 0x51ed2701ULL));
}

using Rng = std::mt19937_64;

/// Uniform draw on [0, 1) that does not depend on the standard library's
/// distribution implementation.
inline double uniform01(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

}  // namespace platemark
