#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace pbrl {

/// Persistent worker pool for member-parallel kernels.
///
/// parallel_for splits [0, count) into contiguous chunks, one per lane; the
/// calling thread executes the first chunk itself, so a pool with W threads
/// provides W+1 lanes.  Each index is processed by exactly one lane with a
/// fixed inner loop order, so results are independent of the chunking and of
/// thread scheduling.
///
/// Calls issued from inside a worker, and calls that arrive while another
/// parallel_for is in flight, run entirely on the calling thread.  Both cases
/// produce identical results; only the scheduling differs.
class ThreadPool {
 public:
  explicit ThreadPool(unsigned workers);
  ~ThreadPool();

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  unsigned lanes() const { return static_cast<unsigned>(threads_.size()) + 1; }

  using ChunkFn = std::function<void(std::size_t, std::size_t)>;
  void parallel_for(std::size_t count, const ChunkFn& fn);

  /// Process-wide pool sized to the hardware thread count.
  static ThreadPool& global();

 private:
  void worker_main();

  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const ChunkFn* job_ = nullptr;
  std::vector<std::pair<std::size_t, std::size_t>> chunks_;
  std::size_t next_chunk_ = 0;
  std::atomic<std::size_t> pending_{0};
  std::atomic<std::uint64_t> generation_{0};
  std::atomic<bool> stop_{false};

  std::mutex issue_mu_;  // one parallel_for in flight at a time
  std::vector<std::thread> threads_;
};

}  // namespace pbrl
