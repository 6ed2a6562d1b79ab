#include "rotir/parallel.h"

#include <atomic>
#include <stdexcept>

namespace rotir {

namespace {
int g_num_threads = 1;
}

void set_num_threads(int n) {
  if (n < 1) throw std::invalid_argument("set_num_threads: n must be >= 1");
  g_num_threads = n;
}

int num_threads() { return g_num_threads; }

std::vector<ChunkRange> make_chunks(size_t n, size_t chunk_size) {
  std::vector<ChunkRange> chunks;
  if (chunk_size == 0) chunk_size = 1;
  for (size_t begin = 0, idx = 0; begin < n; begin += chunk_size, ++idx) {
    chunks.push_back({begin, std::min(begin + chunk_size, n), idx});
  }
  return chunks;
}

void parallel_chunks(size_t n, const std::function<void(const ChunkRange&)>& fn,
                     size_t chunk_size) {
  const auto chunks = make_chunks(n, chunk_size);
  const int workers = std::min<int>(g_num_threads, static_cast<int>(chunks.size()));
  if (workers <= 1) {
    for (const auto& c : chunks) fn(c);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= chunks.size() || failed.load()) return;
        try {
          fn(chunks[i]);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn, size_t chunk_size) {
  parallel_chunks(
      n,
      [&](const ChunkRange& c) {
        for (size_t i = c.begin; i < c.end; ++i) fn(i);
      },
      chunk_size);
}

}  // namespace rotir
