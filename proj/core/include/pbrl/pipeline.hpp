#pragma once

#include <atomic>
#include <chrono>
#include <deque>
#include <memory>
#include <thread>

#include "pbrl/algos.hpp"
#include "pbrl/envs.hpp"
#include "pbrl/evolve.hpp"
#include "pbrl/metrics.hpp"
#include "pbrl/replay.hpp"

namespace pbrl {

// ---------------------------------------------------------------------------
// Snapshot mailbox
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

/// What actors need to pick actions: the policy population plus the
/// per-member exploration scales that evolve alongside it.
template <typename T>
struct ActorSnapshot {
  PopMLPParams<T> policy;
  std::vector<double> explore_std;
  std::uint64_t version = 0;
  std::uint64_t checksum = 0;

  std::uint64_t compute_checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& l : policy.layers) {
      h = fnv1a(l.w.data.data(), l.w.data.size() * sizeof(T), h);
      h = fnv1a(l.b.data.data(), l.b.data.size() * sizeof(T), h);
    }
    h = fnv1a(explore_std.data(), explore_std.size() * sizeof(double), h);
    return h;
  }
};

/// Latest-value slot.  publish() swaps in a freshly built immutable snapshot
/// and bumps the version; fetch() hands back a shared reference, so readers
/// never observe a half-written mix of two versions and publishers never wait
/// on readers.
template <typename T>
class SnapshotMailbox {
 public:
  std::uint64_t publish(const PopMLPParams<T>& policy, const std::vector<double>& explore_std) {
    auto snap = std::make_shared<ActorSnapshot<T>>();
    snap->policy = policy;
    snap->explore_std = explore_std;
    snap->checksum = snap->compute_checksum();
    std::lock_guard<std::mutex> lk(mu_);
    snap->version = ++version_;
    latest_ = std::move(snap);
    return version_;
  }

  /// Newest complete snapshot, or nullptr before the first publish.
  std::shared_ptr<const ActorSnapshot<T>> fetch() const {
    std::lock_guard<std::mutex> lk(mu_);
    return latest_;
  }

  std::uint64_t version() const {
    std::lock_guard<std::mutex> lk(mu_);
    return version_;
  }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const ActorSnapshot<T>> latest_;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Bounded queue
// ---------------------------------------------------------------------------

template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : cap_(std::max<std::size_t>(capacity, 1)) {}

  /// False when the queue stayed full past the timeout or was closed.
  bool push(Item item, std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lk(mu_);
    if (!not_full_.wait_for(lk, timeout, [&] { return closed_ || q_.size() < cap_; })) {
      return false;
    }
    if (closed_) return false;
    q_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  bool pop(Item& out, std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lk(mu_);
    if (!not_empty_.wait_for(lk, timeout, [&] { return closed_ || !q_.empty(); })) return false;
    if (q_.empty()) return false;
    out = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return true;
  }

  void close() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      closed_ = true;
    }
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  bool closed() const {
    std::lock_guard<std::mutex> lk(mu_);
    return closed_;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return q_.size();
  }

  std::size_t capacity() const { return cap_; }

 private:
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<Item> q_;
  std::size_t cap_;
  bool closed_ = false;
};

struct EpisodeReport {
  std::size_t member = 0;
  double ep_return = 0;
  bool deterministic_eval = false;
};

class ReportSink {
 public:
  void push(EpisodeReport r) {
    std::lock_guard<std::mutex> lk(mu_);
    reports_.push_back(r);
  }
  std::vector<EpisodeReport> drain() {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<EpisodeReport> out;
    out.swap(reports_);
    return out;
  }

 private:
  std::mutex mu_;
  std::vector<EpisodeReport> reports_;
};

// ---------------------------------------------------------------------------
// Run configuration and summary
// ---------------------------------------------------------------------------

enum class Algo { kTd3, kSac };
enum class Strategy { kNone, kPbt, kCem, kDvd };

struct RunConfig {
  Algo algo = Algo::kTd3;
  PopMode mode = PopMode::kIndependent;
  Strategy strategy = Strategy::kNone;
  std::size_t population = 1;
  std::size_t updates_per_burst = 50;  // K
  std::size_t actor_workers = 1;
  EnvSpec env = EnvSpec::point_mass();
  BufferMode buffer_mode = BufferMode::kPerAgent;
  std::uint64_t seed = 0;
  std::size_t total_updates = 10000;
  std::size_t batch_size = 64;
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t buffer_capacity = 10000;
  std::size_t warmup_per_buffer = 1000;
  double learning_rate = 3e-4;  // applied to every optimizer unless a strategy overrides it
  double discount = 0.99;
  double explore_std = 0.1;
  double target_noise_std = 0.2;
  double env_steps_per_member_per_update = 1.0;  // the ratio target
  double ratio_slack = 0.05;
  std::size_t eval_every_episodes = 3;  // 0 disables deterministic eval episodes
  double success_threshold = 0;
  bool bootstrap_timeouts = true;  // horizon endings bootstrap (timeouts are not terminal)
  bool track_success = false;
  bool stop_on_success = false;
  std::size_t success_window = 3;  // eval episodes averaged for the threshold
  std::chrono::milliseconds starvation_timeout{30000};
  std::string metrics_path;
  std::string checkpoint_path;
  std::size_t checkpoint_interval = 0;  // update steps; 0 = only final

  // strategy knobs
  std::uint64_t pbt_interval = 2000;  // update steps between evolutions
  Td3Prior td3_prior;
  SacPrior sac_prior;
  bool pbt_sample_initial_hypers = true;
  std::size_t cem_generation_updates = 500;  // update steps per generation
  double cem_init_var = 0.0;
  DvDConfig dvd;
  bool dvd_auto_probe = true;  // fill probe states from early observations
  std::size_t dvd_probe_count = 16;

  void validate() const {
    if (population < 1) throw ConfigError("RunConfig: population must be >= 1");
    if (updates_per_burst < 1) throw ConfigError("RunConfig: updates_per_burst must be >= 1");
    if (actor_workers < 1) throw ConfigError("RunConfig: actor_workers must be >= 1");
    if (batch_size < 1) throw ConfigError("RunConfig: batch_size must be >= 1");
    if (total_updates < 1) throw ConfigError("RunConfig: total_updates must be >= 1");
    if (!(env_steps_per_member_per_update > 0)) {
      throw ConfigError("RunConfig: env_steps_per_member_per_update must be positive");
    }
    env.validate();
    if (strategy == Strategy::kCem || strategy == Strategy::kDvd) {
      if (mode != PopMode::kSharedCritic) {
        throw ConfigError("RunConfig: CEM and DvD strategies require shared-critic mode");
      }
      if (buffer_mode != BufferMode::kShared) {
        throw ConfigError("RunConfig: CEM and DvD strategies require a shared buffer");
      }
      if (strategy == Strategy::kCem && population % 2 != 0) {
        throw ConfigError("RunConfig: CEM needs an even population");
      }
    }
    if (strategy == Strategy::kPbt && buffer_mode != BufferMode::kPerAgent) {
      throw ConfigError("RunConfig: PBT tunes hyperparameters, so buffers must not be mixed");
    }
  }
};

struct RunSummary {
  std::uint64_t env_steps = 0;
  std::uint64_t update_steps = 0;
  std::uint64_t dropped_transitions = 0;
  std::uint64_t evolve_events = 0;
  double wall_seconds = 0;
  double updates_per_member_env_step = 0;  // after warmup
  std::vector<double> final_mean_returns;  // per member, last recorded window
  double best_return = 0;
  std::size_t best_member = 0;
  std::uint64_t eval_episodes = 0;  // deterministic eval episodes (not stored in buffers)
  // first update step at which the windowed eval return crossed the threshold
  std::vector<std::uint64_t> success_update_step;  // per member, 0 = never
  std::uint64_t first_success_update_step = 0;     // best member, 0 = never
  // training plus eval interactions at the moment of first success, per member
  std::vector<std::uint64_t> success_total_env_steps;
};

/// cores = ceil(n * ratio * t_env / t_update): every update step of duration
/// t_update must host n*ratio environment interactions of duration t_env.
inline std::size_t plan_actor_cores(std::size_t n, double t_env_ms, double t_update_ms,
                                    double ratio) {
  if (n < 1 || !(t_env_ms > 0) || !(t_update_ms > 0) || !(ratio > 0)) {
    throw ConfigError("plan_actor_cores: all inputs must be positive");
  }
  const double cores = static_cast<double>(n) * ratio * t_env_ms / t_update_ms;
  return static_cast<std::size_t>(std::ceil(cores));
}

// ---------------------------------------------------------------------------
// Actor worker
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
PopMLPParams<T> gather_members(const PopMLPParams<T>& p, const std::vector<std::size_t>& idx) {
  PopMLPParams<T> out;
  out.output = p.output;
  out.output_scale = p.output_scale;
  for (const auto& l : p.layers) {
    PopTensor<T> w = PopTensor<T>::zeros({idx.size(), l.w.shape[1], l.w.shape[2]});
    PopTensor<T> b = PopTensor<T>::zeros({idx.size(), 1, l.b.shape[2]});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy(l.w.member_ptr(idx[i]), l.w.member_ptr(idx[i]) + l.w.member_stride(),
                w.member_ptr(i));
      std::copy(l.b.member_ptr(idx[i]), l.b.member_ptr(idx[i]) + l.b.member_stride(),
                b.member_ptr(i));
    }
    out.layers.push_back({std::move(w), std::move(b)});
  }
  return out;
}

}  // namespace detail

/// Collects interactions for its assigned members: act, step, tag, push.
/// Parameters refresh from the mailbox on every version bump and at episode
/// boundaries; the worker blocks when its queue is full and exits cleanly
/// when the queue closes.
template <typename T>
void actor_loop(const std::vector<std::size_t>& members, const EnvSpec& spec, Algo algo,
                const SnapshotMailbox<T>& mailbox, BoundedQueue<Transition<T>>& queue,
                ReportSink& reports, std::uint64_t run_seed, std::size_t eval_every,
                const std::atomic<bool>& stop, bool bootstrap_timeouts = true) {
  const std::size_t k = members.size();
  if (k == 0) return;
  struct Slot {
    EnvState state;
    std::vector<double> obs;
    double ep_return = 0;
    std::uint64_t env_steps = 0;  // keys the exploration noise stream
    std::uint64_t episodes = 0;
    std::uint64_t seq = 0;
    bool eval_episode = false;
  };
  std::vector<Slot> slots(k);
  for (std::size_t i = 0; i < k; ++i) {
    auto [st, obs] = env_reset(spec, mix64(run_seed ^ (members[i] * 2654435761ull)));
    slots[i].state = std::move(st);
    slots[i].obs = std::move(obs);
  }

  std::shared_ptr<const ActorSnapshot<T>> snap;
  PopMLPParams<T> local;  // gathered copies of the assigned members
  std::vector<std::uint64_t> streams(members.begin(), members.end());
  std::uint64_t local_version = 0;

  auto refresh = [&]() -> bool {
    auto s = mailbox.fetch();
    if (!s) return false;
    if (!snap || s->version != local_version) {
      snap = std::move(s);
      local = detail::gather_members(snap->policy, members);
      local_version = snap->version;
    }
    return true;
  };

  while (!refresh()) {
    if (stop.load() || queue.closed()) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }

  PopTensor<T> obs_batch = PopTensor<T>::zeros({k, 1, spec.observation_dim});
  while (!stop.load() && !queue.closed()) {
    refresh();  // version-change check each step
    for (std::size_t i = 0; i < k; ++i) {
      const double* src = slots[i].obs.data();
      T* dst = obs_batch.member_ptr(i);
      for (std::size_t d = 0; d < spec.observation_dim; ++d) dst[d] = static_cast<T>(src[d]);
    }
    std::vector<std::uint64_t> steps(k);
    std::vector<double> noise(k);
    bool any_eval = false;
    for (std::size_t i = 0; i < k; ++i) {
      steps[i] = slots[i].env_steps;
      noise[i] = slots[i].eval_episode ? 0.0 : snap->explore_std[members[i]];
      any_eval = any_eval || slots[i].eval_episode;
    }
    PopTensor<T> actions;
    if (algo == Algo::kTd3) {
      actions = act(local, obs_batch, noise, run_seed, streams, steps, /*deterministic=*/false);
    } else {
      actions = sac_act(local, obs_batch, static_cast<T>(spec.action_bound), run_seed, streams,
                        steps, /*deterministic=*/false);
      if (any_eval) {
        PopTensor<T> det = sac_act(local, obs_batch, static_cast<T>(spec.action_bound), run_seed,
                                   streams, steps, /*deterministic=*/true);
        for (std::size_t i = 0; i < k; ++i) {
          if (!slots[i].eval_episode) continue;
          std::copy(det.member_ptr(i), det.member_ptr(i) + det.member_stride(),
                    actions.member_ptr(i));
        }
      }
    }

    for (std::size_t i = 0; i < k; ++i) {
      Slot& slot = slots[i];
      std::vector<double> action(spec.action_dim);
      const T* am = actions.member_ptr(i);
      for (std::size_t d = 0; d < spec.action_dim; ++d) action[d] = static_cast<double>(am[d]);

      Transition<T> tr;
      tr.member = static_cast<std::uint32_t>(members[i]);
      tr.seq = slot.seq++;
      tr.s.resize(spec.observation_dim);
      for (std::size_t d = 0; d < spec.observation_dim; ++d) {
        tr.s[d] = static_cast<T>(slot.obs[d]);
      }
      tr.a.resize(spec.action_dim);
      for (std::size_t d = 0; d < spec.action_dim; ++d) tr.a[d] = static_cast<T>(action[d]);

      StepResult res = env_step(spec, slot.state, action);
      slot.ep_return += res.reward;
      slot.env_steps += 1;
      tr.r = static_cast<T>(res.reward);
      // horizon endings are timeouts, not terminal states; by default the
      // value bootstraps through them
      tr.done = (res.done && !bootstrap_timeouts) ? T(1) : T(0);
      tr.s2.resize(spec.observation_dim);
      for (std::size_t d = 0; d < spec.observation_dim; ++d) {
        tr.s2[d] = static_cast<T>(res.obs[d]);
      }
      slot.obs = std::move(res.obs);

      // Only training data enters the buffers; eval episodes are score-only.
      if (!slot.eval_episode) {
        while (!queue.push(tr, std::chrono::milliseconds(50))) {
          if (stop.load() || queue.closed()) return;
        }
      }

      if (res.done) {
        reports.push({members[i], slot.ep_return, slot.eval_episode});
        slot.episodes += 1;
        slot.ep_return = 0;
        slot.eval_episode =
            eval_every > 0 && slot.episodes % eval_every == eval_every - 1;
        auto [st2, obs2] = env_reset(
            spec, mix64(run_seed ^ (members[i] * 2654435761ull) ^ (slot.episodes * 1099511628211ull)));
        slot.state = std::move(st2);
        slot.obs = std::move(obs2);
        refresh();  // episode-boundary refresh
      }
    }
  }
}

/// Drains worker queues into the buffers that match the buffer mode, keeping
/// per-queue order, counting environment steps for the ratio guard, and
/// dropping malformed transitions.  Until every buffer holds its warmup
/// quota the ratio gate is bypassed: actors may be unevenly scheduled, so the
/// aggregate allowance alone cannot guarantee each buffer fills.
template <typename T>
void ingest(std::vector<std::unique_ptr<BoundedQueue<Transition<T>>>>& queues,
            std::vector<std::unique_ptr<ReplayBuffer<T>>>& buffers, BufferMode mode,
            RatioController& ctrl, std::size_t warmup_per_buffer,
            std::atomic<std::uint64_t>& dropped, const std::atomic<bool>& stop) {
  bool warming = warmup_per_buffer > 0;
  bool all_closed = false;
  while (!all_closed) {
    all_closed = true;
    bool drained_any = false;
    for (auto& q : queues) {
      Transition<T> tr;
      while (q->pop(tr, std::chrono::milliseconds(0))) {
        drained_any = true;
        bool ok = tr.s.size() == buffers[0]->obs_dim() && tr.a.size() == buffers[0]->act_dim() &&
                  tr.s2.size() == buffers[0]->obs_dim();
        if (ok) {
          auto finite = [](const std::vector<T>& v) {
            for (T x : v) {
              if (!std::isfinite(static_cast<double>(x))) return false;
            }
            return true;
          };
          ok = finite(tr.s) && finite(tr.a) && finite(tr.s2) &&
               std::isfinite(static_cast<double>(tr.r)) &&
               (tr.done == T(0) || tr.done == T(1));
        }
        if (!ok) {
          dropped.fetch_add(1);
          continue;
        }
        if (warming) {
          std::size_t min_size = buffers[0]->size();
          for (auto& b : buffers) min_size = std::min(min_size, b->size());
          warming = min_size < warmup_per_buffer;
        }
        if (!warming) {
          while (!stop.load() && !ctrl.await(RatioSide::kInsert, std::chrono::milliseconds(50))) {
          }
        }
        const std::size_t target = (mode == BufferMode::kPerAgent) ? tr.member : 0;
        buffers[target]->push(tr);
        // the shutdown drain keeps the data but no longer moves the ratio
        if (!stop.load()) ctrl.on_env_steps(1);
      }
      if (!q->closed() || q->size() > 0) all_closed = false;
    }
    if (stop.load() && !drained_any) break;
    if (!drained_any) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
}

// run_training lives in pipeline_run.hpp (it pulls the strategies together).

}  // namespace pbrl

#include "pbrl/pipeline_run.hpp"
