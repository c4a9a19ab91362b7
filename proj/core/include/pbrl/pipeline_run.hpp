#pragma once

// Training orchestration: one learner thread (this call), W actor threads, an
// ingestion thread, and a prefetch thread.  The mailbox and queues are the
// only shared structures; every blocking wait is bounded so stalls surface as
// starvation diagnostics instead of hangs.

#include <fstream>
#include <limits>

#include "pbrl/pipeline.hpp"
#include "pbrl/runtime.hpp"

namespace pbrl {

namespace detail {

/// Hands bursts of sampled batches from the prefetch thread to the learner;
/// capacity one, so the next burst is prepared while the current one computes.
template <typename T>
class StagedBatches {
 public:
  /// Moves from burst only on success, so a timed-out put can be retried.
  bool put(std::vector<TransitionBatch<T>>& burst, std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lk(mu_);
    if (!empty_cv_.wait_for(lk, timeout, [&] { return closed_ || !full_; })) return false;
    if (closed_) return false;
    burst_ = std::move(burst);
    full_ = true;
    full_cv_.notify_one();
    return true;
  }

  bool take(std::vector<TransitionBatch<T>>& out, std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lk(mu_);
    if (!full_cv_.wait_for(lk, timeout, [&] { return closed_ || full_; })) return false;
    if (!full_) return false;
    out = std::move(burst_);
    full_ = false;
    empty_cv_.notify_one();
    return true;
  }

  void close() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      closed_ = true;
    }
    full_cv_.notify_all();
    empty_cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard<std::mutex> lk(mu_);
    return closed_;
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable full_cv_, empty_cv_;
  std::vector<TransitionBatch<T>> burst_;
  bool full_ = false;
  bool closed_ = false;
};

inline std::string join_indices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += '|';
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace detail

template <typename T>
RunSummary run_training(const RunConfig& cfg) {
  tune_allocator_for_tensors();
  cfg.validate();
  if ((cfg.strategy == Strategy::kCem || cfg.strategy == Strategy::kDvd) && cfg.algo != Algo::kTd3) {
    throw ConfigError("run_training: CEM and DvD strategies drive TD3 updates");
  }
  const std::size_t n = cfg.population;
  const std::size_t ds = cfg.env.observation_dim;
  const std::size_t da = cfg.env.action_dim;
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  MetricsLog metrics(cfg.metrics_path);

  // --- trainer state -------------------------------------------------------
  Td3State<T> td3;
  SacState<T> sac;
  Td3Hyper td3_hyper;
  SacHyper sac_hyper;
  if (cfg.algo == Algo::kTd3) {
    td3 = make_td3_state<T>(n, ds, da, cfg.hidden, static_cast<T>(cfg.env.action_bound), cfg.seed,
                            cfg.mode);
    td3_hyper = Td3Hyper::defaults(n);
    td3_hyper.critic_lr.assign(n, cfg.learning_rate);
    td3_hyper.policy_lr.assign(n, cfg.learning_rate);
    td3_hyper.gamma.assign(n, cfg.discount);
    td3_hyper.explore_std.assign(n, cfg.explore_std);
    td3_hyper.target_std.assign(n, cfg.target_noise_std);
  } else {
    sac = make_sac_state<T>(n, ds, da, cfg.hidden, static_cast<T>(cfg.env.action_bound), cfg.seed,
                            cfg.mode);
    sac_hyper = SacHyper::defaults(n, da);
    sac_hyper.critic_lr.assign(n, cfg.learning_rate);
    sac_hyper.policy_lr.assign(n, cfg.learning_rate);
    sac_hyper.alpha_lr.assign(n, cfg.learning_rate);
    sac_hyper.gamma.assign(n, cfg.discount);
  }
  if (cfg.strategy == Strategy::kPbt && cfg.pbt_sample_initial_hypers) {
    for (std::size_t m = 0; m < n; ++m) {
      RngSequence rng(cfg.seed, m, RngUse::kHyperDraw, 0);
      if (cfg.algo == Algo::kTd3) {
        td3_hyper.set_member(m, cfg.td3_prior.sample_member(rng));
      } else {
        SacPrior prior = cfg.sac_prior;
        prior.default_target_entropy = -static_cast<double>(da);
        sac_hyper.set_member(m, prior.sample_member(rng));
      }
    }
  }

  auto explore_vec = [&]() -> std::vector<double> {
    if (cfg.algo == Algo::kTd3) return td3_hyper.explore_std;
    return std::vector<double>(n, 0.0);  // SAC samples from its own policy
  };
  auto policy_ref = [&]() -> const PopMLPParams<T>& {
    return cfg.algo == Algo::kTd3 ? td3.policy : sac.policy;
  };

  // --- strategies ----------------------------------------------------------
  PBTState pbt(n);
  pbt.evolve_interval = cfg.pbt_interval;
  RngSequence pbt_rng(cfg.seed, 0, RngUse::kDonorChoice, 0);
  RngSequence hyper_rng(cfg.seed, 1, RngUse::kHyperDraw, 1);

  CEMState cem;
  std::vector<std::vector<double>> cem_candidates;
  std::vector<std::vector<double>> cem_gen_returns(n);
  std::size_t cem_gen_done = 0;   // update steps consumed by the current generation
  std::uint64_t cem_generation = 0;  // keys each generation's draws
  auto cem_resample = [&](bool) {
    RngSequence rng(cfg.seed, 2, RngUse::kCemDraw, cem_generation++);
    cem_candidates = cem_sample(cem, n, rng);
    for (std::size_t m = 0; m < n; ++m) {
      std::vector<T> flat(cem_candidates[m].begin(), cem_candidates[m].end());
      unflatten_member(td3.policy, m, std::span<const T>(flat));
    }
    td3.policy_target = td3.policy;
    td3.opt_policy = MlpAdam<T>::like(td3.policy);
    for (auto& r : cem_gen_returns) r.clear();
  };
  if (cfg.strategy == Strategy::kCem) {
    std::vector<T> mean0 = flatten_member(td3.policy, 0);
    cem = cem_init(std::vector<double>(mean0.begin(), mean0.end()), cfg.cem_init_var);
  }

  DvDConfig dvd = cfg.dvd;
  if (cfg.strategy == Strategy::kDvd) {
    if (cfg.dvd_auto_probe) {
      dvd.m_states = std::max(cfg.dvd_probe_count, n);
      dvd.probe_states.clear();
      for (std::size_t i = 0; i < dvd.m_states; ++i) {
        auto [st, obs] = env_reset(cfg.env, mix64(cfg.seed ^ 0x9E0B0E5ull) + i);
        dvd.probe_states.insert(dvd.probe_states.end(), obs.begin(), obs.end());
      }
    }
    std::vector<T> probe(dvd.probe_states.begin(), dvd.probe_states.end());
    PopTensor<T> emb = dvd_embed(td3.policy, probe, dvd.m_states);
    PopTensor<double> emb_d;
    emb_d.shape = emb.shape;
    emb_d.data.assign(emb.data.begin(), emb.data.end());
    dvd.length_scale = median_pairwise_distance(emb_d);  // frozen for the run
    dvd.validate(n);
  }

  // --- shared structures ---------------------------------------------------
  const std::size_t nbuf = (cfg.buffer_mode == BufferMode::kPerAgent) ? n : 1;
  std::vector<std::unique_ptr<ReplayBuffer<T>>> buffers;
  for (std::size_t b = 0; b < nbuf; ++b) {
    buffers.push_back(std::make_unique<ReplayBuffer<T>>(cfg.buffer_capacity, ds, da));
  }
  const std::size_t workers = std::min(cfg.actor_workers, n);
  const std::size_t queue_cap =
      (4 * cfg.updates_per_burst * n + workers - 1) / workers;
  std::vector<std::unique_ptr<BoundedQueue<Transition<T>>>> queues;
  for (std::size_t w = 0; w < workers; ++w) {
    queues.push_back(std::make_unique<BoundedQueue<Transition<T>>>(queue_cap));
  }
  const double per_member_ratio = cfg.env_steps_per_member_per_update;
  RatioController ctrl(1.0 / (static_cast<double>(n) * per_member_ratio), cfg.ratio_slack,
                       cfg.warmup_per_buffer * nbuf);
  SnapshotMailbox<T> mailbox;
  ReportSink reports;
  std::atomic<bool> stop{false};
  std::atomic<std::uint64_t> dropped{0};
  detail::StagedBatches<T> staged;
  std::atomic<bool> prefetch_starved{false};

  mailbox.publish(policy_ref(), explore_vec());

  // --- threads -------------------------------------------------------------
  std::vector<std::thread> actor_threads;
  for (std::size_t w = 0; w < workers; ++w) {
    std::vector<std::size_t> assigned;
    for (std::size_t m = w; m < n; m += workers) assigned.push_back(m);
    actor_threads.emplace_back([&, w, assigned] {
      actor_loop<T>(assigned, cfg.env, cfg.algo, mailbox, *queues[w], reports, cfg.seed,
                    cfg.eval_every_episodes, stop, cfg.bootstrap_timeouts);
    });
  }
  std::thread ingest_thread([&] {
    ingest<T>(queues, buffers, cfg.buffer_mode, ctrl, cfg.warmup_per_buffer, dropped, stop);
  });

  const std::vector<std::uint64_t> member_streams = [&] {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = i;
    return s;
  }();
  std::vector<ReplayBuffer<T>*> buffer_ptrs;
  for (auto& b : buffers) buffer_ptrs.push_back(b.get());

  std::thread prefetch_thread([&] {
    std::uint64_t draw_id = 0;
    std::size_t planned = 0;
    const auto deadline_budget = cfg.starvation_timeout;
    while (!stop.load() && planned < cfg.total_updates) {
      const std::size_t k_next = std::min(cfg.updates_per_burst, cfg.total_updates - planned);
      auto waited = std::chrono::milliseconds(0);
      while (!stop.load() &&
             !ctrl.await(RatioSide::kSample, std::chrono::milliseconds(100), k_next)) {
        waited += std::chrono::milliseconds(100);
        if (waited >= deadline_budget) {
          prefetch_starved.store(true);
          stop.store(true);
          staged.close();
          return;
        }
      }
      if (stop.load()) return;
      std::vector<TransitionBatch<T>> burst;
      burst.reserve(k_next);
      bool ready = true;
      for (std::size_t i = 0; i < k_next; ++i) {
        auto b = sample_batch<T>(buffer_ptrs, cfg.batch_size, cfg.buffer_mode, n, cfg.seed,
                                 member_streams, draw_id + i, cfg.warmup_per_buffer);
        if (!b) {
          ready = false;
          break;
        }
        burst.push_back(std::move(*b));
      }
      if (!ready) {
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
        continue;
      }
      draw_id += k_next;
      bool handed_off = false;
      while (!stop.load() && !staged.closed()) {
        if (staged.put(burst, std::chrono::milliseconds(100))) {
          handed_off = true;
          break;
        }
      }
      if (!handed_off) return;
      planned += k_next;
    }
  });

  // --- success tracking ----------------------------------------------------
  std::vector<std::deque<double>> eval_window(n);
  RunSummary summary;
  summary.success_update_step.assign(n, 0);
  summary.success_total_env_steps.assign(n, 0);

  auto handle_reports = [&](std::uint64_t done_updates) {
    for (const EpisodeReport& r : reports.drain()) {
      metrics.episode(wall(), ctrl.env_steps(), done_updates, r.member, r.ep_return,
                      r.deterministic_eval);
      if (r.deterministic_eval) {
        summary.eval_episodes += 1;
        auto& win = eval_window[r.member];
        win.push_back(r.ep_return);
        while (win.size() > cfg.success_window) win.pop_front();
        if (cfg.track_success && summary.success_update_step[r.member] == 0 &&
            win.size() == cfg.success_window) {
          double mean = 0;
          for (double v : win) mean += v;
          mean /= static_cast<double>(win.size());
          if (mean >= cfg.success_threshold) {
            summary.success_update_step[r.member] = std::max<std::uint64_t>(done_updates, 1);
            summary.success_total_env_steps[r.member] =
                ctrl.env_steps() + summary.eval_episodes * cfg.env.horizon;
            metrics.event(wall(), ctrl.env_steps(), done_updates,
                          "success member=" + std::to_string(r.member));
          }
        }
      } else {
        pbt.record_return(r.member, r.ep_return);
        if (cfg.strategy == Strategy::kCem) cem_gen_returns[r.member].push_back(r.ep_return);
      }
    }
  };

  auto write_checkpoint = [&](const std::string& suffix) {
    if (cfg.checkpoint_path.empty()) return;
    std::ofstream os(cfg.checkpoint_path + suffix, std::ios::binary);
    if (!os) return;
    save_checkpoint(policy_ref(), os);
  };

  // --- learner loop --------------------------------------------------------
  std::uint64_t done_updates = 0;
  std::string abort_reason;
  std::vector<char> cem_train_mask;
  if (cfg.strategy == Strategy::kCem) {
    cem_train_mask.assign(n, 0);
    for (std::size_t m = 0; m < n / 2; ++m) cem_train_mask[m] = 1;
    cem_resample(true);
    mailbox.publish(policy_ref(), explore_vec());
  }

  while (done_updates < cfg.total_updates && !stop.load()) {
    std::vector<TransitionBatch<T>> burst;
    if (!staged.take(burst, cfg.starvation_timeout)) {
      if (prefetch_starved.load()) {
        abort_reason = "actors starved the learner: ratio guard held past timeout";
      } else if (!stop.load()) {
        abort_reason = "learner starved: no staged batches within timeout";
      }
      stop.store(true);
      break;
    }
    PolicyGradHook<T> hook;
    const PolicyGradHook<T>* hook_ptr = nullptr;
    if (cfg.strategy == Strategy::kDvd) {
      hook = dvd_policy_hook<T>(dvd, done_updates);
      hook_ptr = &hook;
    }
    const std::vector<char>* mask_ptr =
        cfg.strategy == Strategy::kCem ? &cem_train_mask : nullptr;
    for (const auto& batch : burst) {
      if (cfg.algo == Algo::kTd3) {
        td3_update_step(td3, batch, td3_hyper, hook_ptr, mask_ptr);
      } else {
        sac_update_step(sac, batch, sac_hyper);
      }
    }
    done_updates += burst.size();
    ctrl.on_update_steps(burst.size());
    mailbox.publish(policy_ref(), explore_vec());
    handle_reports(done_updates);

    if (cfg.strategy == Strategy::kPbt) {
      pbt.steps_since_evolve += burst.size();
      if (pbt.steps_since_evolve >= pbt.evolve_interval && pbt.every_member_scored()) {
        std::optional<EvolvePlan> plan;
        if (cfg.algo == Algo::kTd3) {
          plan = pbt_evolve_trainer(pbt, td3, td3_hyper, cfg.td3_prior, pbt_rng);
        } else {
          SacPrior prior = cfg.sac_prior;
          prior.default_target_entropy = -static_cast<double>(da);
          plan = pbt_evolve_trainer(pbt, sac, sac_hyper, prior, pbt_rng);
        }
        if (plan) {
          summary.evolve_events += 1;
          for (std::size_t m : plan->replaced) eval_window[m].clear();
          std::string note = "evolve replaced=" + detail::join_indices(plan->replaced) +
                             " donors=" + detail::join_indices(plan->donors);
          if (cfg.algo == Algo::kTd3) {
            for (std::size_t m : plan->replaced) {
              note += " lr" + std::to_string(m) + "=" + std::to_string(td3_hyper.policy_lr[m]);
            }
          }
          metrics.event(wall(), ctrl.env_steps(), done_updates, note);
          mailbox.publish(policy_ref(), explore_vec());
        }
      }
    }

    if (cfg.strategy == Strategy::kCem) {
      cem_gen_done += burst.size();
      if (cem_gen_done >= cfg.cem_generation_updates) {
        bool all_scored = true;
        for (const auto& r : cem_gen_returns) all_scored = all_scored && !r.empty();
        if (all_scored) {
          std::vector<double> scores(n);
          for (std::size_t m = 0; m < n; ++m) {
            double s = 0;
            for (double v : cem_gen_returns[m]) s += v;
            scores[m] = s / static_cast<double>(cem_gen_returns[m].size());
          }
          cem_update(cem, cem_candidates, scores);
          metrics.event(wall(), ctrl.env_steps(), done_updates,
                        "cem-generation noise=" + std::to_string(cem.noise));
          cem_resample(false);
          mailbox.publish(policy_ref(), explore_vec());
          cem_gen_done = 0;
        }
        // otherwise extend the generation by another burst until scores exist
      }
    }

    if (cfg.checkpoint_interval > 0 && done_updates % cfg.checkpoint_interval == 0) {
      write_checkpoint("." + std::to_string(done_updates));
    }
    if (cfg.track_success && cfg.stop_on_success) {
      bool any = false;
      for (std::uint64_t s : summary.success_update_step) any = any || s != 0;
      if (any) break;
    }
  }

  // --- shutdown ------------------------------------------------------------
  stop.store(true);
  staged.close();
  ctrl.close();
  for (auto& q : queues) q->close();
  for (auto& t : actor_threads) t.join();
  ingest_thread.join();
  prefetch_thread.join();
  handle_reports(done_updates);
  write_checkpoint("");
  metrics.event(wall(), ctrl.env_steps(), done_updates, "run-end");

  if (!abort_reason.empty()) throw DataStarvationError("run_training: " + abort_reason);

  summary.env_steps = ctrl.env_steps();
  summary.update_steps = done_updates;
  summary.dropped_transitions = dropped.load();
  summary.wall_seconds = wall();
  const double warm = static_cast<double>(ctrl.warmup_env_steps());
  if (static_cast<double>(summary.env_steps) > warm && n > 0) {
    const double per_member =
        (static_cast<double>(summary.env_steps) - warm) / static_cast<double>(n);
    summary.updates_per_member_env_step =
        per_member > 0 ? static_cast<double>(summary.update_steps) * per_member_ratio / per_member
                       : 0.0;
  }
  // members with no finished episode report -inf rather than shadowing real scores
  summary.final_mean_returns.assign(n, -std::numeric_limits<double>::infinity());
  for (std::size_t m = 0; m < n; ++m) {
    if (!pbt.returns[m].empty()) summary.final_mean_returns[m] = pbt.mean_return(m);
  }
  if (n > 0) {
    summary.best_member = 0;
    summary.best_return = summary.final_mean_returns[0];
    for (std::size_t m = 1; m < n; ++m) {
      if (summary.final_mean_returns[m] > summary.best_return) {
        summary.best_return = summary.final_mean_returns[m];
        summary.best_member = m;
      }
    }
  }
  std::uint64_t first = 0;
  for (std::uint64_t s : summary.success_update_step) {
    if (s != 0 && (first == 0 || s < first)) first = s;
  }
  summary.first_success_update_step = first;
  return summary;
}

}  // namespace pbrl
