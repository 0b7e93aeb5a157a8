// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace labelloop::util {

/// Logical CPU count capped at 16.
inline std::size_t default_workers() noexcept {
  const unsigned hw = std::thread::hardware_concurrency();
  return std::clamp<std::size_t>(hw == 0 ? 1 : hw, 1, 16);
}

/// Runs fn(i) for i in [0, count) on at most `width` threads. Work is
/// claimed in index order. The first exception stops further claims and
/// is rethrown after all in-flight calls return.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t width, Fn&& fn) {
  if (count == 0) return;
  width = std::clamp<std::size_t>(width, 1, count);
  if (width == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto worker = [&] {
    while (!stop.load(std::memory_order_relaxed)) {
      const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        stop.store(true, std::memory_order_relaxed);
      }
    }
  };

  {
    std::vector<std::jthread> threads;
    threads.reserve(width);
    for (std::size_t t = 0; t < width; ++t) threads.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace labelloop::util
