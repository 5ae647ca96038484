#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace unetsharp {

/// Worker count: UNETSHARP_THREADS when set, else the hardware concurrency.
inline int thread_count()
{
    static const int count = [] {
        int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
        if (const char* env = std::getenv("UNETSHARP_THREADS")) {
            try {
                const int requested = std::stoi(env);
                if (requested >= 1) return std::min(requested, hw);
            } catch (const std::exception&) {
            }
        }
        return hw;
    }();
    return count;
}

/// Runs fn(i) for i in [0, n). Every index is processed by exactly one
/// worker; callers keep results schedule-independent by writing to
/// per-index slots and reducing them in index order afterwards.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn)
{
    const int workers = static_cast<int>(std::min<std::int64_t>(thread_count(), n));
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            for (std::int64_t i = t; i < n; i += workers) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace unetsharp
