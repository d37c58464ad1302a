#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace vardeblur {

/// Worker count: VARDEBLUR_THREADS when set (>= 1), otherwise hardware concurrency.
inline int worker_count() {
    if (const char* env = std::getenv("VARDEBLUR_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (...) {
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(row) for every row in [0, rows). Each row must write only its own
/// outputs, so results do not depend on the worker count.
template <typename Fn>
void parallel_rows(int rows, Fn&& fn) {
    const int workers = std::min(worker_count(), rows / 16);
    if (workers <= 1) {
        for (int r = 0; r < rows; ++r) fn(r);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        const int begin = rows * w / workers;
        const int end = rows * (w + 1) / workers;
        pool.emplace_back([begin, end, &fn] {
            for (int r = begin; r < end; ++r) fn(r);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace vardeblur
