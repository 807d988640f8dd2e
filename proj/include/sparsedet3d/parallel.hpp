// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace sparsedet3d {

/// Worker bound from SPARSEDET3D_THREADS (default 1, minimum 1).
int worker_count();

/// Splits [0, n) into contiguous chunks, one per worker, and runs
/// fn(begin, end, chunk) on each. Chunk boundaries depend only on n and the
/// worker count, so callers that merge per-chunk results in chunk order are
/// deterministic.
void parallel_chunks(size_t n, const std::function<void(size_t, size_t, size_t)>& fn);

/// Number of chunks parallel_chunks will use for n items.
size_t chunk_count(size_t n);

}  // namespace sparsedet3d
