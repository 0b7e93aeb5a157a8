// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

namespace labelloop::util {

/// A percentage held as an integer number of hundredths, so that
/// reported values are exact and round-half-up is unambiguous.
struct Percent {
  std::int64_t hundredths = 0;

  double value() const noexcept { return static_cast<double>(hundredths) / 100.0; }

  std::string str() const {
    const std::int64_t whole = hundredths / 100;
    const std::int64_t frac = hundredths % 100;
    char buf[48];
    std::snprintf(buf, sizeof buf, "%lld.%02lld", static_cast<long long>(whole),
                  static_cast<long long>(frac));
    return buf;
  }

  friend bool operator==(const Percent&, const Percent&) = default;
};

/// 100 * num / den rounded half-up to two decimals, in exact integer math.
/// den must be > 0 and 0 <= num.
inline Percent percent_of(std::uint64_t num, std::uint64_t den) noexcept {
  // round(num * 10000 / den) with ties up: floor((2 * num * 10000 + den) / (2 * den))
  const unsigned __int128 scaled = static_cast<unsigned __int128>(num) * 20000U + den;
  return Percent{static_cast<std::int64_t>(scaled / (static_cast<unsigned __int128>(den) * 2U))};
}

/// Round-half-up of a real-valued percentage to two decimals. The relative
/// nudge absorbs binary representation error at exact ties (e.g. 91.765).
inline Percent round_percent(double value) noexcept {
  const double scaled = value * 100.0;
  const double nudged = scaled + std::abs(scaled) * 1e-12;
  return Percent{static_cast<std::int64_t>(std::floor(nudged + 0.5))};
}

inline std::string fixed2(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", value);
  return buf;
}

}  // namespace labelloop::util
