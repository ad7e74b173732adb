#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace liouville {

/// Number of worker threads used by the chunked helpers below. Results never
/// depend on this value: work is split into fixed chunks and reduced in chunk
/// order.
inline std::size_t worker_count() {
    static const std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    return n;
}

/// Keeps large temporaries on the heap instead of mapping and unmapping them
/// on every loss evaluation. Affects the whole process; call once from main.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

/// Runs fn(i) for i in [0, count) across worker threads. The first exception
/// thrown by any task is rethrown on the calling thread.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const std::size_t threads = std::min(worker_count(), count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(count);
                return;
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(threads - 1);
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    pool.clear();
    if (error) std::rethrow_exception(error);
}

struct ChunkRange {
    std::size_t begin;
    std::size_t end;
    std::size_t size() const { return end - begin; }
};

inline std::vector<ChunkRange> make_chunks(std::size_t n, std::size_t chunk) {
    std::vector<ChunkRange> out;
    for (std::size_t b = 0; b < n; b += chunk) out.push_back({b, std::min(n, b + chunk)});
    return out;
}

} // namespace liouville
