#include "pbrl/thread_pool.hpp"

#include <algorithm>

namespace pbrl {

namespace {
thread_local bool tls_inside_pool = false;

#if defined(__x86_64__) || defined(_M_X64)
inline void cpu_relax() { __builtin_ia32_pause(); }
#else
inline void cpu_relax() {}
#endif

// Kernels arrive back to back, so a short spin before sleeping keeps the
// condvar wake latency out of the per-launch cost.
constexpr int kSpinRounds = 8192;

// Chunks per lane: the caller steals unstarted chunks, so a descheduled
// worker can stall the join by at most one chunk.
constexpr std::size_t kChunksPerLane = 4;
}  // namespace

ThreadPool::ThreadPool(unsigned workers) {
  threads_.reserve(workers);
  for (unsigned i = 0; i < workers; ++i) {
    threads_.emplace_back([this] { worker_main(); });
  }
}

ThreadPool::~ThreadPool() {
  stop_.store(true);
  {
    std::lock_guard<std::mutex> lk(mu_);
  }
  wake_.notify_all();
  for (auto& t : threads_) {
    if (t.joinable()) t.join();
  }
}

void ThreadPool::worker_main() {
  tls_inside_pool = true;
  std::uint64_t seen = 0;
  for (;;) {
    bool ready = false;
    for (int spin = 0; spin < kSpinRounds; ++spin) {
      if (stop_.load(std::memory_order_relaxed)) return;
      if (generation_.load(std::memory_order_acquire) != seen) {
        ready = true;
        break;
      }
      cpu_relax();
    }
    std::unique_lock<std::mutex> lk(mu_);
    if (!ready) {
      wake_.wait(lk, [&] {
        return stop_.load(std::memory_order_relaxed) ||
               generation_.load(std::memory_order_relaxed) != seen;
      });
    }
    if (stop_.load(std::memory_order_relaxed)) return;
    seen = generation_.load(std::memory_order_relaxed);
    for (;;) {
      if (next_chunk_ >= chunks_.size()) break;
      const auto [begin, end] = chunks_[next_chunk_++];
      const ChunkFn* fn = job_;
      lk.unlock();
      (*fn)(begin, end);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        { std::lock_guard<std::mutex> fence(mu_); }  // pair with the waiter's predicate check
        done_.notify_all();
      }
      lk.lock();
    }
  }
}

void ThreadPool::parallel_for(std::size_t count, const ChunkFn& fn) {
  if (count == 0) return;
  if (count == 1 || threads_.empty() || tls_inside_pool) {
    fn(0, count);
    return;
  }
  std::unique_lock<std::mutex> issue(issue_mu_, std::try_to_lock);
  if (!issue.owns_lock()) {
    // Another thread is driving the pool; run inline rather than queueing.
    fn(0, count);
    return;
  }

  const std::size_t nchunks = std::min<std::size_t>(count, lanes() * kChunksPerLane);
  const std::size_t base = count / nchunks;
  const std::size_t extra = count % nchunks;

  {
    std::lock_guard<std::mutex> lk(mu_);
    chunks_.clear();
    std::size_t at = 0;
    for (std::size_t c = 0; c < nchunks; ++c) {
      const std::size_t len = base + (c < extra ? 1 : 0);
      chunks_.emplace_back(at, at + len);
      at += len;
    }
    job_ = &fn;
    next_chunk_ = 0;
    pending_.store(nchunks, std::memory_order_relaxed);
    generation_.fetch_add(1, std::memory_order_release);
  }
  wake_.notify_all();

  // the caller works the same chunk queue as the pool threads
  for (;;) {
    std::size_t begin, end;
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (next_chunk_ >= chunks_.size()) break;
      std::tie(begin, end) = chunks_[next_chunk_++];
    }
    fn(begin, end);
    pending_.fetch_sub(1, std::memory_order_acq_rel);
  }

  // at most the in-flight chunks of stalled workers remain
  for (int spin = 0; spin < kSpinRounds; ++spin) {
    if (pending_.load(std::memory_order_acquire) == 0) {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = nullptr;
      return;
    }
    cpu_relax();
  }
  std::unique_lock<std::mutex> lk(mu_);
  done_.wait(lk, [&] { return pending_.load(std::memory_order_relaxed) == 0; });
  job_ = nullptr;
}

ThreadPool& ThreadPool::global() {
  static ThreadPool pool(std::max(1u, std::thread::hardware_concurrency()) - 1u);
  return pool;
}

}  // namespace pbrl
