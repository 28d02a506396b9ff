#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mfg {

/// Worker-thread cap, read from MFG_JOBS. Unset or invalid means 1 (serial).
inline int job_count() {
    const char* env = std::getenv("MFG_JOBS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

/// Chunked parallel loop over [0, n). Each index writes only its own output
/// slot, so results are identical for any thread count; reductions are done
/// serially by the caller afterwards, in index order.
template <typename Fn>
void parallel_for(long n, Fn&& fn, int jobs = -1) {
    if (jobs < 1) jobs = job_count();
    if (jobs == 1 || n <= 1) {
        for (long i = 0; i < n; ++i) fn(i);
        return;
    }
    jobs = static_cast<int>(std::min<long>(jobs, n));
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    long chunk = (n + jobs - 1) / jobs;
    for (int t = 0; t < jobs; ++t) {
        long begin = t * chunk;
        long end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn] {
            for (long i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace mfg
