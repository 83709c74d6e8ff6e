#pragma once

#include <cstdint>
#include <functional>

namespace coattn {

// Number of worker threads used by the heavy kernels (matmul, conv3d).
// Defaults to min(hardware_concurrency, 4); override with COATTN_THREADS.
int worker_threads();

// Workloads below this many scalar ops run serially; thread spawn cost
// dominates under it.
inline constexpr int64_t kMinParallelWork = 1 << 16;

// Chunk count the loop below will use for (n, total_work).
int parallel_chunk_count(int64_t n, int64_t total_work);

// Splits [0, n) into one contiguous chunk per worker and runs fn(chunk, begin,
// end) on each, serially when total_work is small. Chunking is a pure function
// of (n, total_work, worker_threads()), so results are bit-reproducible across
// runs on the same machine. fn must only write to locations derived from its
// own index range; the chunk index addresses per-worker scratch for
// deterministic reductions.
void parallel_for_indexed(int64_t n, int64_t total_work,
                          const std::function<void(int, int64_t, int64_t)>& fn);

void parallel_for(int64_t n, int64_t total_work,
                  const std::function<void(int64_t, int64_t)>& fn);

} // namespace coattn
