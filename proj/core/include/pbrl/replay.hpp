#pragma once

#include <chrono>
#include <condition_variable>
#include <memory>
#include <cstring>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>

#include "pbrl/algos.hpp"
#include "pbrl/pop_tensor.hpp"

namespace pbrl {

template <typename T>
struct Transition {
  std::vector<T> s, a, s2;
  T r = 0;
  T done = 0;
  std::uint32_t member = 0;
  std::uint64_t seq = 0;  // per-producer sequence number
};

/// Bounded FIFO transition store with uniform sampling.  Multiple producers
/// and one sampling consumer may operate concurrently; all entry points lock.
template <typename T>
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t act_dim)
      : cap_(capacity), ds_(obs_dim), da_(act_dim) {
    if (capacity < 1) throw ConfigError("ReplayBuffer: capacity must be >= 1");
    s_.resize(cap_ * ds_);
    a_.resize(cap_ * da_);
    s2_.resize(cap_ * ds_);
    r_.resize(cap_);
    done_.resize(cap_);
    member_.resize(cap_);
  }

  std::size_t capacity() const { return cap_; }
  std::size_t obs_dim() const { return ds_; }
  std::size_t act_dim() const { return da_; }

  std::size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return std::min<std::size_t>(inserts_, cap_);
  }

  std::uint64_t insert_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return inserts_;
  }

  void push(const Transition<T>& t) {
    if (t.s.size() != ds_ || t.s2.size() != ds_ || t.a.size() != da_) {
      throw UsageError("ReplayBuffer::push: transition dims do not match buffer dims");
    }
    std::lock_guard<std::mutex> lk(mu_);
    const std::size_t slot = inserts_ % cap_;
    std::copy(t.s.begin(), t.s.end(), s_.begin() + slot * ds_);
    std::copy(t.a.begin(), t.a.end(), a_.begin() + slot * da_);
    std::copy(t.s2.begin(), t.s2.end(), s2_.begin() + slot * ds_);
    r_[slot] = t.r;
    done_[slot] = t.done;
    member_[slot] = t.member;
    ++inserts_;
  }

  /// Retained transition i in FIFO order (0 = oldest still stored).
  Transition<T> peek(std::size_t i) const {
    std::lock_guard<std::mutex> lk(mu_);
    const std::size_t n = std::min<std::size_t>(inserts_, cap_);
    if (i >= n) throw UsageError("ReplayBuffer::peek: index out of range");
    const std::size_t oldest = (inserts_ > cap_) ? inserts_ % cap_ : 0;
    const std::size_t slot = (oldest + i) % cap_;
    Transition<T> t;
    t.s.assign(s_.begin() + slot * ds_, s_.begin() + (slot + 1) * ds_);
    t.a.assign(a_.begin() + slot * da_, a_.begin() + (slot + 1) * da_);
    t.s2.assign(s2_.begin() + slot * ds_, s2_.begin() + (slot + 1) * ds_);
    t.r = r_[slot];
    t.done = done_[slot];
    t.member = member_[slot];
    return t;
  }

  /// Uniform-with-replacement rows into a member slice of a population batch.
  /// Returns false without touching the outputs when fewer than min_size
  /// transitions are stored.
  bool fill_member_rows(std::size_t member_row, std::size_t rows, const RngStream& stream,
                        TransitionBatch<T>& out, std::size_t min_size) const {
    std::lock_guard<std::mutex> lk(mu_);
    const std::size_t n = std::min<std::size_t>(inserts_, cap_);
    if (n < std::max<std::size_t>(min_size, 1)) return false;
    T* sm = out.s.member_ptr(member_row);
    T* am = out.a.member_ptr(member_row);
    T* rm = out.r.member_ptr(member_row);
    T* s2m = out.s2.member_ptr(member_row);
    T* dm = out.done.member_ptr(member_row);
    for (std::size_t b = 0; b < rows; ++b) {
      // when full, every slot is live, so a plain modulo draw stays uniform
      const std::size_t slot = stream.bits(b) % n;
      std::copy(s_.begin() + slot * ds_, s_.begin() + (slot + 1) * ds_, sm + b * ds_);
      std::copy(a_.begin() + slot * da_, a_.begin() + (slot + 1) * da_, am + b * da_);
      std::copy(s2_.begin() + slot * ds_, s2_.begin() + (slot + 1) * ds_, s2m + b * ds_);
      rm[b] = r_[slot];
      dm[b] = done_[slot];
    }
    return true;
  }

  void save_snapshot(std::ostream& os) const {
    std::lock_guard<std::mutex> lk(mu_);
    const char magic[8] = {'P', 'B', 'R', 'L', 'B', 'U', 'F', '1'};
    os.write(magic, sizeof(magic));
    const std::uint32_t prec = sizeof(T);
    const std::uint64_t cap = cap_, ds = ds_, da = da_, ins = inserts_;
    os.write(reinterpret_cast<const char*>(&prec), sizeof(prec));
    os.write(reinterpret_cast<const char*>(&cap), sizeof(cap));
    os.write(reinterpret_cast<const char*>(&ds), sizeof(ds));
    os.write(reinterpret_cast<const char*>(&da), sizeof(da));
    os.write(reinterpret_cast<const char*>(&ins), sizeof(ins));
    auto dump = [&](const std::vector<T>& v) {
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(T)));
    };
    dump(s_);
    dump(a_);
    dump(s2_);
    dump(r_);
    dump(done_);
    os.write(reinterpret_cast<const char*>(member_.data()),
             static_cast<std::streamsize>(member_.size() * sizeof(std::uint32_t)));
  }

  static std::unique_ptr<ReplayBuffer> load_snapshot(std::istream& is) {
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, "PBRLBUF1", 8) != 0) {
      throw ConfigError("ReplayBuffer::load_snapshot: bad magic");
    }
    std::uint32_t prec = 0;
    is.read(reinterpret_cast<char*>(&prec), sizeof(prec));
    if (prec != sizeof(T)) throw ConfigError("ReplayBuffer::load_snapshot: precision mismatch");
    std::uint64_t cap = 0, ds = 0, da = 0, ins = 0;
    is.read(reinterpret_cast<char*>(&cap), sizeof(cap));
    is.read(reinterpret_cast<char*>(&ds), sizeof(ds));
    is.read(reinterpret_cast<char*>(&da), sizeof(da));
    is.read(reinterpret_cast<char*>(&ins), sizeof(ins));
    auto buf = std::make_unique<ReplayBuffer>(cap, ds, da);
    auto slurp = [&](std::vector<T>& v) {
      is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    };
    slurp(buf->s_);
    slurp(buf->a_);
    slurp(buf->s2_);
    slurp(buf->r_);
    slurp(buf->done_);
    is.read(reinterpret_cast<char*>(buf->member_.data()),
            static_cast<std::streamsize>(buf->member_.size() * sizeof(std::uint32_t)));
    if (!is) throw ConfigError("ReplayBuffer::load_snapshot: truncated file");
    buf->inserts_ = ins;
    return buf;
  }

 private:
  mutable std::mutex mu_;
  std::size_t cap_, ds_, da_;
  std::vector<T> s_, a_, s2_, r_, done_;
  std::vector<std::uint32_t> member_;
  std::uint64_t inserts_ = 0;
};

enum class BufferMode { kPerAgent, kShared };

/// Draws a population batch.  Per-agent mode reads member n's slice only from
/// buffer n; shared mode draws every slice independently from the one buffer.
/// Returns nullopt (not ready) when any source holds fewer than min_size
/// transitions; callers block or retry.
template <typename T>
std::optional<TransitionBatch<T>> sample_batch(const std::vector<ReplayBuffer<T>*>& buffers,
                                               std::size_t batch_size, BufferMode mode,
                                               std::size_t members, std::uint64_t seed,
                                               const std::vector<std::uint64_t>& streams,
                                               std::uint64_t draw_id, std::size_t min_size = 1) {
  if (buffers.empty()) throw ConfigError("sample_batch: no buffers");
  if (mode == BufferMode::kPerAgent && buffers.size() != members) {
    throw ConfigError("sample_batch: per-agent mode needs one buffer per member");
  }
  const std::size_t ds = buffers[0]->obs_dim(), da = buffers[0]->act_dim();
  TransitionBatch<T> batch;
  batch.s = PopTensor<T>::zeros({members, batch_size, ds});
  batch.a = PopTensor<T>::zeros({members, batch_size, da});
  batch.r = PopTensor<T>::zeros({members, batch_size, 1});
  batch.s2 = PopTensor<T>::zeros({members, batch_size, ds});
  batch.done = PopTensor<T>::zeros({members, batch_size, 1});
  for (std::size_t m = 0; m < members; ++m) {
    const ReplayBuffer<T>* src = (mode == BufferMode::kPerAgent) ? buffers[m] : buffers[0];
    const RngStream stream = RngStream::of(seed, streams[m], RngUse::kSample, draw_id);
    if (!src->fill_member_rows(m, batch_size, stream, batch, min_size)) return std::nullopt;
  }
  return batch;
}

enum class RatioSide { kSample, kInsert };
enum class RatioDecision { kProceed, kBlock };

/// Keeps update steps per environment step near the target by blocking
/// whichever side runs ahead.  Blocking is a signal, not an error; await()
/// bounds the wait with a caller-supplied timeout.
class RatioController {
 public:
  RatioController(double target, double slack, std::uint64_t warmup_env_steps)
      : target_(target), slack_(slack), warmup_(warmup_env_steps) {
    if (!(target > 0)) throw ConfigError("RatioController: target must be positive");
    if (slack < 0) throw ConfigError("RatioController: slack must be >= 0");
  }

  void on_env_steps(std::uint64_t k) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      env_ += k;
    }
    cv_.notify_all();
  }

  void on_update_steps(std::uint64_t k) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      upd_ += k;
    }
    cv_.notify_all();
  }

  std::uint64_t env_steps() const {
    std::lock_guard<std::mutex> lk(mu_);
    return env_;
  }

  std::uint64_t update_steps() const {
    std::lock_guard<std::mutex> lk(mu_);
    return upd_;
  }

  std::uint64_t warmup_env_steps() const { return warmup_; }

  RatioDecision check(RatioSide side) const {
    std::lock_guard<std::mutex> lk(mu_);
    return check_locked(side, 1);
  }

  /// Would `pending` more steps on this side still respect the ratio?
  RatioDecision check(RatioSide side, std::uint64_t pending) const {
    std::lock_guard<std::mutex> lk(mu_);
    return check_locked(side, pending);
  }

  /// Bounded wait until this side may proceed; false means still blocked at
  /// timeout.  A closed controller always proceeds so shutdown can drain.
  bool await(RatioSide side, std::chrono::milliseconds timeout, std::uint64_t pending = 1) {
    std::unique_lock<std::mutex> lk(mu_);
    return cv_.wait_for(lk, timeout, [&] {
      return closed_ || check_locked(side, pending) == RatioDecision::kProceed;
    });
  }

  void close() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  RatioDecision check_locked(RatioSide side, std::uint64_t pending) const {
    if (side == RatioSide::kSample) {
      if (env_ < std::max<std::uint64_t>(warmup_, 1)) return RatioDecision::kBlock;
      const double lhs = static_cast<double>(upd_ + pending);
      const double rhs = target_ * (1.0 + slack_) * static_cast<double>(std::max<std::uint64_t>(env_, 1));
      return lhs > rhs ? RatioDecision::kBlock : RatioDecision::kProceed;
    }
    const double lhs = static_cast<double>(env_ + pending);
    const double rhs =
        (static_cast<double>(upd_) / target_) * (1.0 + slack_) + static_cast<double>(warmup_);
    return lhs > rhs ? RatioDecision::kBlock : RatioDecision::kProceed;
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  double target_, slack_;
  std::uint64_t warmup_;
  std::uint64_t env_ = 0, upd_ = 0;
  bool closed_ = false;
};

}  // namespace pbrl
