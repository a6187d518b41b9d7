#pragma once

#include <cstdint>
#include <functional>

namespace voxalign {

// Number of workers used by parallel_for. Defaults to VOXALIGN_THREADS if set,
// otherwise std::thread::hardware_concurrency().
int worker_count();
void set_worker_count(int n);

// Runs body(begin, end) over a static partition of [0, n). Every index is
// handled by exactly one worker and the per-index work must only write outputs
// owned by that index, so results do not depend on the worker count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace voxalign
