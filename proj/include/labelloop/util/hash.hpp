// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace labelloop::util {

/// FNV-1a, 64 bit. Stable across platforms; used wherever a "hash of
/// inputs" must be reproducible (mock backends, blinding coins, handles).
class Fnv1a {
 public:
  Fnv1a& add(std::string_view bytes) noexcept {
    for (unsigned char ch : bytes) {
      state_ ^= ch;
      state_ *= 0x100000001b3ULL;
    }
    // length separator so ("ab","c") != ("a","bc")
    return add_raw(bytes.size());
  }

  Fnv1a& add(std::uint64_t value) noexcept { return add_raw(value ^ 0x9e3779b97f4a7c15ULL); }
  Fnv1a& add(std::int64_t value) noexcept { return add(static_cast<std::uint64_t>(value)); }
  Fnv1a& add(int value) noexcept { return add(static_cast<std::uint64_t>(static_cast<std::int64_t>(value))); }

  Fnv1a& add(double value) noexcept {
    return add(std::bit_cast<std::uint64_t>(value == 0.0 ? 0.0 : value));
  }

  std::uint64_t digest() const noexcept { return state_; }

 private:
  Fnv1a& add_raw(std::uint64_t value) noexcept {
    for (int i = 0; i < 8; ++i) {
      state_ ^= (value >> (8 * i)) & 0xffU;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based stream: draw i is a pure function of (key, i).
class HashStream {
 public:
  explicit HashStream(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ splitmix64(++counter_)); }

  /// Uniform in [0, 1).
  double next_unit() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) noexcept { return p > 0.0 && next_unit() < p; }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept { return next_u64() % n; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline std::string to_hex(std::uint64_t value, int digits = 16) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(static_cast<std::size_t>(digits), '0');
  for (int i = digits - 1; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xfU];
    value >>= 4;
  }
  return out;
}

}  // namespace labelloop::util
