#pragma once

#include <cstdint>
#include <limits>

namespace ugcem {

/// SplitMix64 finalizer; a bijective avalanche mix of a 64-bit word.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Small UniformRandomBitGenerator used for short keyed streams.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t state) noexcept : state_(state) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

 private:
  std::uint64_t state_;
};

/// Counter-based random source.
///
/// A key plus up to four counters names an independent stream, so the draws
/// for a (candidate, particle, step) triple do not depend on the order in
/// which triples are evaluated or on how work is split between threads.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key = 0) noexcept : key_(mix64(key ^ 0x5bd1e9955bd1e995ULL)) {}

  constexpr std::uint64_t key() const noexcept { return key_; }

  /// Child source whose streams are disjoint from this one's for distinct `tag`.
  constexpr CounterRng derive(std::uint64_t tag) const noexcept {
    CounterRng child;
    child.key_ = combine(key_, tag);
    return child;
  }

  constexpr SplitMix64 stream(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                              std::uint64_t d = 0) const noexcept {
    std::uint64_t h = combine(key_, a);
    h = combine(h, b);
    h = combine(h, c);
    h = combine(h, d);
    return SplitMix64(h);
  }

 private:
  static constexpr std::uint64_t combine(std::uint64_t h, std::uint64_t v) noexcept {
    return mix64(h ^ mix64(v + 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t key_;
};

}  // namespace ugcem
