#pragma once

#include <cstddef>
#include <functional>

namespace tresnet {

/// Run fn(0..count-1) across up to `jobs` worker threads. Exceptions thrown by
/// a job are rethrown on the calling thread after all workers finish. Results
/// must be written to pre-sized slots indexed by the job id, which keeps the
/// output independent of scheduling.
void parallel_for(std::size_t jobs, std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace tresnet
