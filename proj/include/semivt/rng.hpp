#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace semivt {

/// SplitMix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Order-sensitive hash of a tuple of integers; used to derive stream ids.
inline std::uint64_t hash_ids(std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = 0x243F6A8885A308D3ull;
  for (auto v : ids) h = mix64(h ^ mix64(v));
  return h;
}

/// Deterministic random stream identified by (seed, stream). Two streams with
/// the same identity produce the same draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream), engine_(mix64(seed) ^ mix64(stream + 0x632BE59BD9B4E019ull)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  /// Child stream; independent of the draws already taken from this one.
  RngStream child(std::uint64_t id) const { return {seed_, hash_ids({stream_, id})}; }

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  /// Integer in [lo, hi].
  long uniform_int(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(engine_); }
  double normal(double mean, double sd) { return std::normal_distribution<double>(mean, sd)(engine_); }
  bool coin() { return uniform_int(0, 1) == 1; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

}  // namespace semivt
