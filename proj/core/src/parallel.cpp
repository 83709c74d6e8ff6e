#include "coattn/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace coattn {

int worker_threads() {
    static const int n = [] {
        if (const char* env = std::getenv("COATTN_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return std::min(v, 64);
        }
        unsigned hc = std::thread::hardware_concurrency();
        return static_cast<int>(std::clamp(hc, 1u, 4u));
    }();
    return n;
}

int parallel_chunk_count(int64_t n, int64_t total_work) {
    if (n <= 0) return 0;
    int workers = worker_threads();
    if (workers <= 1 || n < 2 || total_work < kMinParallelWork) return 1;
    workers = static_cast<int>(std::min<int64_t>(workers, n));
    int64_t chunk = (n + workers - 1) / workers;
    return static_cast<int>((n + chunk - 1) / chunk);
}

void parallel_for_indexed(int64_t n, int64_t total_work,
                          const std::function<void(int, int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int chunks = parallel_chunk_count(n, total_work);
    if (chunks <= 1) {
        fn(0, 0, n);
        return;
    }
    int64_t chunk = (n + chunks - 1) / chunks;
    std::vector<std::thread> threads;
    threads.reserve(chunks - 1);
    for (int c = 1; c < chunks; ++c) {
        int64_t b = c * chunk;
        int64_t e = std::min(n, b + chunk);
        if (b >= e) break;
        threads.emplace_back(fn, c, b, e);
    }
    fn(0, 0, std::min(n, chunk));
    for (auto& t : threads) t.join();
}

void parallel_for(int64_t n, int64_t total_work,
                  const std::function<void(int64_t, int64_t)>& fn) {
    parallel_for_indexed(n, total_work, [&fn](int, int64_t b, int64_t e) { fn(b, e); });
}

} // namespace coattn
