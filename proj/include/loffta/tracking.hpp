// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

namespace loffta::mem {

// Process-wide registry of live numeric buffer bytes. Every tensor, feature
// grid and optimizer buffer in the library allocates through
// TrackingAllocator, so peak_bytes() is the high-water mark of numeric state.
namespace detail {
inline std::atomic<int64_t> g_live{0};
inline std::atomic<int64_t> g_peak{0};

inline void on_alloc(int64_t n) noexcept {
    const int64_t now = g_live.fetch_add(n, std::memory_order_relaxed) + n;
    int64_t prev = g_peak.load(std::memory_order_relaxed);
    while (now > prev && !g_peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

inline void on_free(int64_t n) noexcept { g_live.fetch_sub(n, std::memory_order_relaxed); }
}  // namespace detail

inline std::size_t live_bytes() noexcept {
    return static_cast<std::size_t>(detail::g_live.load(std::memory_order_relaxed));
}

inline std::size_t peak_bytes() noexcept {
    return static_cast<std::size_t>(detail::g_peak.load(std::memory_order_relaxed));
}

/// Resets the high-water mark to the current live byte count.
inline void reset_peak() noexcept {
    detail::g_peak.store(detail::g_live.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        T* p = std::allocator<T>{}.allocate(n);
        detail::on_alloc(static_cast<int64_t>(n * sizeof(T)));
        return p;
    }

    void deallocate(T* p, std::size_t n) noexcept {
        detail::on_free(static_cast<int64_t>(n * sizeof(T)));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

}  // namespace loffta::mem

namespace loffta {
template <class T>
using tracked_vector = std::vector<T, mem::TrackingAllocator<T>>;
}  // namespace loffta
