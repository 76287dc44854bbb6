#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace trajmae {

/// SplitMix64 finalizer. Every draw of RngStream is mix(key + counter * golden).
std::uint64_t mix64(std::uint64_t x) noexcept;

/// FNV-1a over a purpose tag, used to derive substreams.
std::uint64_t hash_tag(std::string_view tag) noexcept;

/// Counter-based random stream. A stream is fully described by (key, counter),
/// so its state can be checkpointed and restored exactly, and two streams
/// derived from the same seed with different tags never interact.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed) : key_(mix64(seed ^ 0x5851f42d4c957f2dULL)) {}
  RngStream(std::uint64_t seed, std::string_view tag)
      : key_(mix64(mix64(seed) ^ hash_tag(tag))) {}

  static RngStream from_state(std::uint64_t key, std::uint64_t counter) {
    RngStream r;
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  /// Independent child stream; does not advance this stream.
  RngStream derive(std::string_view tag) const { return derive_raw(hash_tag(tag)); }
  RngStream derive(std::uint64_t index) const { return derive_raw(mix64(index + 0x632be59bd9b4e019ULL)); }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n) noexcept;
  double normal() noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices from [0, n), in the order drawn (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  RngStream derive_raw(std::uint64_t salt) const {
    RngStream r;
    r.key_ = mix64(key_ ^ salt);
    return r;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace trajmae
