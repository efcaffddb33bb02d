#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace pano {

// Worker count for parallel loops: min(hardware, PANO_THREADS). At least 1.
int worker_threads();

// Runs fn(i) for i in [0, n). Tasks must be write-disjoint so the result is
// bitwise independent of the thread count. Falls back to a plain loop when
// n is small or only one worker is configured. Not reentrant: nested calls
// run sequentially.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

std::string shape_str(const std::vector<int>& shape);

}  // namespace pano
