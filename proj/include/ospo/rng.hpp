#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace ospo {

/// Counter-based deterministic RNG (splitmix64 core).
///
/// Every consumer derives its own stream with substream(); derivation reads
/// the parent seed without consuming state, so the draw order of sibling
/// streams can never change each other's output. No std:: distributions are
/// used anywhere: their output is implementation-defined, and manifests must
/// be byte-identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Child stream keyed by a label (stage names, pool names, ...).
  Rng substream(std::string_view label) const {
    return Rng(mix(state_ ^ hash_label(label)));
  }

  /// Child stream keyed by an index (sample ids, attempt counters, ...).
  Rng substream(std::uint64_t index) const {
    return Rng(mix(state_ ^ mix(index + 0x9e3779b97f4a7c15ull)));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  /// Uniform in [0, bound). bound = 0 is a caller bug; returns 0.
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    // Reject the tail so small bounds stay exactly uniform.
    const std::uint64_t limit = bound * (UINT64_MAX / bound);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % bound;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool next_bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return next_double() < p;
  }

  std::size_t pick_index(std::size_t n) { return static_cast<std::size_t>(next_below(n)); }

  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items[pick_index(items.size())];
  }

  /// Fisher-Yates with this stream's draws.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = pick_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t state() const { return state_; }

  /// FNV-1a, used for label-keyed substreams and prompt bucketing.
  static std::uint64_t hash_label(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace ospo
