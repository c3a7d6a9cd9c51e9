#pragma once

#include <cstdint>
#include <functional>

namespace nlmdef {

/// 0 or negative -> hardware concurrency (at least 1).
int resolve_threads(int requested);

/// Runs fn over [0, n) split into contiguous chunks, one per worker.
/// Callers are responsible for making chunk results independent of the split.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace nlmdef
