#pragma once

#include <cstdint>
#include <random>

namespace attnlab {

using Rng = std::mt19937_64;

// SplitMix64 step; used to derive well-separated stream seeds from one root seed.
inline std::uint64_t splitMix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Independent generator for (seed, stream): same seed + same stream id => same sequence.
inline Rng makeRng(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  std::uint64_t a = splitMix64(s);
  std::uint64_t b = splitMix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return Rng(seq);
}

// Named streams so subsystems never share a generator.
enum class Stream : std::uint64_t {
  Partition = 1,
  Sampling = 2,
  Masking = 3,
  Noise = 4,
  Negatives = 5,
  Evaluation = 6,
  OracleProbe = 7,
};

inline Rng makeRng(std::uint64_t seed, Stream stream) {
  return makeRng(seed, static_cast<std::uint64_t>(stream));
}

}  // namespace attnlab
