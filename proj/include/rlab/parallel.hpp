#pragma once

#include <cstddef>
#include <functional>

namespace rlab {

// Runs fn(i) for i in [0, n) on up to `workers` threads with contiguous
// static chunks. Results must be written to per-index slots so that the
// outcome does not depend on the worker count. The first exception (lowest
// chunk) is rethrown after all threads join.
void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn);

}  // namespace rlab
