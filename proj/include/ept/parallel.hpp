#pragma once

// Fixed-size chunking with optional worker threads. Chunk boundaries depend
// only on the problem size, never on the thread count, so results are the
// same whether the work runs serially or not.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace ept {

inline constexpr std::size_t kRowChunk = 1024;

// Worker cap from EPT_THREADS (default 1).
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("EPT_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

// Calls body(begin, end) for consecutive row ranges of at most `chunk` rows.
template <class Body>
void for_each_chunk(std::size_t rows, Body&& body, std::size_t chunk = kRowChunk,
                    std::size_t threads = worker_threads()) {
  const std::size_t chunks = (rows + chunk - 1) / chunk;
  if (chunks == 0) return;
  threads = std::min(threads, chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) body(c * chunk, std::min(rows, (c + 1) * chunk));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t c; (c = next.fetch_add(1)) < chunks;) {
      try {
        body(c * chunk, std::min(rows, (c + 1) * chunk));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ept
