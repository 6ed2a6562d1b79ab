#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace rotir {

// Global worker count for parallel loops. 1 disables threading entirely.
void set_num_threads(int n);
int num_threads();

// Splits [0, n) into fixed-size chunks whose boundaries depend only on n, never
// on the worker count. Callers accumulate into per-chunk buffers and merge them
// serially in chunk order, which keeps results bitwise identical whether the
// chunks ran on one thread or many.
struct ChunkRange {
  size_t begin;
  size_t end;
  size_t index;  // chunk ordinal, usable as a reduction slot
};

std::vector<ChunkRange> make_chunks(size_t n, size_t chunk_size = 4096);

// Runs fn over every chunk; chunk order of execution is unspecified but the
// chunk decomposition itself is deterministic.
void parallel_chunks(size_t n, const std::function<void(const ChunkRange&)>& fn,
                     size_t chunk_size = 4096);

// Convenience: parallel loop over individual indices (no reduction).
void parallel_for(size_t n, const std::function<void(size_t)>& fn, size_t chunk_size = 4096);

}  // namespace rotir
