#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace finv {

/// Runs fn(i, worker) for i in [0, n). Work is claimed from a shared atomic
/// counter; every result must be written to a slot indexed by i so the
/// outcome does not depend on the thread count or interleaving. `worker` is
/// a stable index in [0, threads) for per-worker scratch (e.g. graph
/// workspaces). The first exception thrown by any item is rethrown.
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t, int)>& fn) {
    threads = std::max<int>(1, static_cast<int>(std::min<int64_t>(threads, n)));
    if (threads == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (;;) {
                int64_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i, w);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace finv
