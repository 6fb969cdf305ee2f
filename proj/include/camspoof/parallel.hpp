#pragma once

#include <cstdint>
#include <functional>

namespace camspoof {

// Worker cap: CAMSPOOF_THREADS if set, else hardware concurrency.
int worker_count();

// Runs fn(i) for i in [0, n). Each index must write only its own output
// slot; chunk boundaries never affect results, so outputs are identical
// to the sequential loop for any worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace camspoof
