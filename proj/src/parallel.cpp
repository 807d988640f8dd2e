// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace sparsedet3d {

int worker_count() {
    const char* env = std::getenv("SPARSEDET3D_THREADS");
    if (env == nullptr) return 1;
    try {
        return std::max(1, std::stoi(env));
    } catch (...) {
        return 1;
    }
}

size_t chunk_count(size_t n) {
    constexpr size_t min_chunk = 256;
    const size_t workers = static_cast<size_t>(worker_count());
    if (n == 0) return 0;
    return std::max<size_t>(1, std::min(workers, (n + min_chunk - 1) / min_chunk));
}

void parallel_chunks(size_t n, const std::function<void(size_t, size_t, size_t)>& fn) {
    const size_t chunks = chunk_count(n);
    if (chunks <= 1) {
        if (n > 0) fn(0, n, 0);
        return;
    }
    const size_t per = (n + chunks - 1) / chunks;
    std::vector<std::thread> threads;
    threads.reserve(chunks);
    for (size_t c = 0; c < chunks; ++c) {
        const size_t b = c * per;
        const size_t e = std::min(n, b + per);
        if (b >= e) break;
        threads.emplace_back([&fn, b, e, c] { fn(b, e, c); });
    }
    for (auto& t : threads) t.join();
}

}  // namespace sparsedet3d
