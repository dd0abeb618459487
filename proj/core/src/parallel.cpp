#include "lidia/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace lidia {

void parallel_chunks(std::int64_t n, std::int64_t chunk, int threads,
                     const std::function<void(int, std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (chunk <= 0) chunk = 1;
    const std::int64_t nchunks = chunk_count(n, chunk);

    auto run_chunk = [&](std::int64_t c) {
        const std::int64_t begin = c * chunk;
        const std::int64_t end = std::min(n, begin + chunk);
        fn(static_cast<int>(c), begin, end);
    };

    if (threads <= 1 || nchunks == 1) {
        for (std::int64_t c = 0; c < nchunks; ++c) run_chunk(c);
        return;
    }

    const int nworkers = static_cast<int>(std::min<std::int64_t>(threads, nchunks));
    std::atomic<std::int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(nworkers);
    for (int t = 0; t < nworkers; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const std::int64_t c = next.fetch_add(1, std::memory_order_relaxed);
                if (c >= nchunks) break;
                run_chunk(c);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace lidia
