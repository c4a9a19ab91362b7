#pragma once

#include <chrono>
#include <limits>
#include <sstream>
#include <string>

#include "pbrl/algos.hpp"
#include "pbrl/runtime.hpp"

namespace pbrl {

/// The three execution strategies for one population update step: a loop of
/// single-member updates, one population-tensor update, and one thread per
/// member running single-member updates concurrently.  All three perform
/// identical numerical work; only the execution strategy differs.
enum class BenchMode { kSequential, kVectorized, kParallelThreads };

std::string to_string(BenchMode mode);
BenchMode parse_bench_mode(const std::string& name);

enum class BenchAlgo { kTd3, kSac };

struct BenchConfig {
  BenchMode mode = BenchMode::kVectorized;
  BenchAlgo algo = BenchAlgo::kTd3;
  std::size_t n = 1;
  std::size_t k = 50;       // update steps per timed repetition
  std::size_t reps = 5;     // timed repetitions, after one discarded warmup
  std::size_t batch = 64;
  std::size_t obs_dim = 17;
  std::size_t act_dim = 6;
  std::vector<std::size_t> hidden = {32, 32};
  std::uint64_t seed = 7;
  std::size_t memory_budget_bytes = std::size_t(4) << 30;

  void validate() const {
    if (n < 1 || k < 1) throw ConfigError("BenchConfig: n and k must be >= 1");
    if (reps < 3) throw ConfigError("BenchConfig: need at least 3 repetitions");
  }
};

struct BenchResult {
  std::string mode;
  std::size_t n = 0, k = 0, reps = 0;
  std::vector<double> times_ms;  // per timed repetition, warmup excluded
  double median_ms = 0;
  double iqr_ms = 0;
  double warmup_ms = 0;  // first invocation, reported separately
  std::uint64_t kernel_launches = 0;  // during one timed repetition

  std::string csv_row() const {
    std::ostringstream os;
    os << mode << ',' << n << ',' << k << ',' << reps << ',' << median_ms << ',' << iqr_ms << ','
       << warmup_ms;
    return os.str();
  }
  static constexpr const char* kCsvHeader = "mode,n,k,reps,median_ms,iqr_ms,warmup_ms";
};

namespace detail {
void summarize_bench(BenchResult& r);
std::size_t bench_estimated_bytes(const BenchConfig& cfg, std::size_t scalar_bytes);
void run_member_threads(std::size_t n, const std::function<void(std::size_t)>& member_fn);
}  // namespace detail

/// Deterministic synthetic training data, generated once and reused across
/// repetitions so only the update work is timed.
template <typename T>
std::vector<TransitionBatch<T>> make_synthetic_batches(std::size_t count, std::size_t n,
                                                       std::size_t batch, std::size_t obs_dim,
                                                       std::size_t act_dim, std::uint64_t seed) {
  std::vector<TransitionBatch<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    TransitionBatch<T> b;
    b.s = PopTensor<T>::zeros({n, batch, obs_dim});
    b.a = PopTensor<T>::zeros({n, batch, act_dim});
    b.r = PopTensor<T>::zeros({n, batch, 1});
    b.s2 = PopTensor<T>::zeros({n, batch, obs_dim});
    b.done = PopTensor<T>::zeros({n, batch, 1});
    fill_uniform(b.s, RngStream::of(seed, i, RngUse::kGeneric, 1), -1.0, 1.0);
    fill_uniform(b.a, RngStream::of(seed, i, RngUse::kGeneric, 2), -1.0, 1.0);
    fill_uniform(b.r, RngStream::of(seed, i, RngUse::kGeneric, 3), -1.0, 1.0);
    fill_uniform(b.s2, RngStream::of(seed, i, RngUse::kGeneric, 4), -1.0, 1.0);
    const RngStream ds = RngStream::of(seed, i, RngUse::kGeneric, 5);
    for (std::size_t e = 0; e < b.done.data.size(); ++e) {
      b.done.data[e] = ds.uniform(e) < 0.02 ? T(1) : T(0);
    }
    out.push_back(std::move(b));
  }
  return out;
}

template <typename T>
TransitionBatch<T> slice_member(const TransitionBatch<T>& b, std::size_t i) {
  TransitionBatch<T> s;
  s.s = slice_member(b.s, i);
  s.a = slice_member(b.a, i);
  s.r = slice_member(b.r, i);
  s.s2 = slice_member(b.s2, i);
  s.done = slice_member(b.done, i);
  return s;
}

namespace detail {

/// One timed repetition.  The working state is prepared by the caller outside
/// the timed region; only the update work runs here.
template <typename T, typename State, typename Hyper, typename StepFn>
void bench_run_once(BenchMode mode, State& st, std::vector<State>& members, const Hyper& hyper,
                    const std::vector<Hyper>& hyper_slices,
                    const std::vector<TransitionBatch<T>>& batches,
                    const std::vector<std::vector<TransitionBatch<T>>>& batch_slices,
                    StepFn&& step) {
  if (mode == BenchMode::kVectorized) {
    for (const auto& b : batches) step(st, b, hyper);
    return;
  }
  const std::size_t n = members.size();
  if (mode == BenchMode::kSequential) {
    for (std::size_t m = 0; m < n; ++m) {
      for (const auto& b : batch_slices[m]) step(members[m], b, hyper_slices[m]);
    }
  } else {
    run_member_threads(n, [&](std::size_t m) {
      for (const auto& b : batch_slices[m]) step(members[m], b, hyper_slices[m]);
    });
  }
}

}  // namespace detail

/// Times `reps` repetitions of k update steps under the chosen execution
/// strategy.  Batches are preloaded; state resets between repetitions happen
/// outside the timed region; the first repetition is the reported warmup.
template <typename T>
BenchResult bench_update(const BenchConfig& cfg, PopMLPParams<T>* final_policy = nullptr) {
  tune_allocator_for_tensors();
  cfg.validate();
  if (detail::bench_estimated_bytes(cfg, sizeof(T)) > cfg.memory_budget_bytes) {
    throw ResourceError("bench_update: population of " + std::to_string(cfg.n) +
                        " needs an estimated " +
                        std::to_string(detail::bench_estimated_bytes(cfg, sizeof(T))) +
                        " bytes, over the budget of " +
                        std::to_string(cfg.memory_budget_bytes));
  }
  const auto batches = make_synthetic_batches<T>(cfg.k, cfg.n, cfg.batch, cfg.obs_dim,
                                                 cfg.act_dim, cfg.seed);

  BenchResult result;
  result.mode = to_string(cfg.mode);
  result.n = cfg.n;
  result.k = cfg.k;
  result.reps = cfg.reps;

  auto run_algo = [&](auto make_state, auto step_fn) {
    auto init = make_state();
    using State = decltype(init);
    std::vector<State> init_slices;
    std::vector<std::vector<TransitionBatch<T>>> batch_slices;
    if (cfg.mode != BenchMode::kVectorized) {
      for (std::size_t m = 0; m < cfg.n; ++m) {
        init_slices.push_back(slice_member(init, m));
        std::vector<TransitionBatch<T>> bs;
        bs.reserve(batches.size());
        for (const auto& b : batches) bs.push_back(slice_member(b, m));
        batch_slices.push_back(std::move(bs));
      }
    }
    const auto hyper = [&] {
      if constexpr (std::is_same_v<State, Td3State<T>>) {
        return Td3Hyper::defaults(cfg.n);
      } else {
        return SacHyper::defaults(cfg.n, cfg.act_dim);
      }
    }();
    std::vector<std::decay_t<decltype(hyper)>> hyper_slices;
    if (cfg.mode != BenchMode::kVectorized) {
      for (std::size_t m = 0; m < cfg.n; ++m) hyper_slices.push_back(hyper.slice(m));
    }
    State st = init;
    std::vector<State> members = init_slices;
    for (std::size_t rep = 0; rep <= cfg.reps; ++rep) {
      // state reset happens out here, off the clock
      st = init;
      members = init_slices;
      const std::uint64_t launches_before = kernel_invocations().load();
      const auto start = std::chrono::steady_clock::now();
      detail::bench_run_once<T>(cfg.mode, st, members, hyper, hyper_slices, batches, batch_slices,
                                step_fn);
      const auto stop = std::chrono::steady_clock::now();
      const double ms = std::chrono::duration<double, std::milli>(stop - start).count();
      if (rep == 0) {
        result.warmup_ms = ms;
      } else {
        result.times_ms.push_back(ms);
        result.kernel_launches = kernel_invocations().load() - launches_before;
      }
    }
    if (cfg.mode != BenchMode::kVectorized) {
      for (std::size_t m = 0; m < cfg.n; ++m) set_member(st, m, members[m]);
    }
    if (final_policy) *final_policy = st.policy;
  };

  if (cfg.algo == BenchAlgo::kTd3) {
    run_algo(
        [&] {
          return make_td3_state<T>(cfg.n, cfg.obs_dim, cfg.act_dim, cfg.hidden, T(1), cfg.seed);
        },
        [](Td3State<T>& st, const TransitionBatch<T>& b, const Td3Hyper& h) {
          td3_update_step(st, b, h);
        });
  } else {
    run_algo(
        [&] {
          return make_sac_state<T>(cfg.n, cfg.obs_dim, cfg.act_dim, cfg.hidden, T(1), cfg.seed);
        },
        [](SacState<T>& st, const TransitionBatch<T>& b, const SacHyper& h) {
          sac_update_step(st, b, h);
        });
  }

  detail::summarize_bench(result);
  return result;
}

/// Runs all three modes from the same initial state in the requested
/// precision and returns the maximum absolute difference between their final
/// policy parameters.  Timing differences must come from execution strategy
/// alone, so this should be ~0.
template <typename T>
double bench_cross_mode_audit(BenchConfig cfg) {
  cfg.reps = 3;
  std::vector<PopMLPParams<T>> finals;
  for (BenchMode mode :
       {BenchMode::kSequential, BenchMode::kVectorized, BenchMode::kParallelThreads}) {
    cfg.mode = mode;
    PopMLPParams<T> p;
    bench_update<T>(cfg, &p);
    finals.push_back(std::move(p));
  }
  double worst = 0;
  for (std::size_t i = 1; i < finals.size(); ++i) {
    for (std::size_t l = 0; l < finals[0].layers.size(); ++l) {
      worst = std::max(worst, max_abs_diff(finals[0].layers[l].w, finals[i].layers[l].w));
      worst = std::max(worst, max_abs_diff(finals[0].layers[l].b, finals[i].layers[l].b));
    }
  }
  return worst;
}

/// Wall-time comparison of one k-step call against k chained single-step
/// calls with a full state export (serialize) after every call.  Repetitions
/// of the two variants alternate and medians are compared, so drift on a
/// shared machine hits both sides evenly.
struct KStepTiming {
  double batched_ms = 0;  // one call carrying k steps + one export, median
  double loop_ms = 0;     // k calls, exporting after each, median
  bool bitwise_equal = false;
};

template <typename T>
KStepTiming time_k_step_batching(const BenchConfig& cfg, std::size_t reps = 5) {
  tune_allocator_for_tensors();
  const auto batches = make_synthetic_batches<T>(cfg.k, cfg.n, cfg.batch, cfg.obs_dim,
                                                 cfg.act_dim, cfg.seed);
  const auto hyper = Td3Hyper::defaults(cfg.n);
  const auto init =
      make_td3_state<T>(cfg.n, cfg.obs_dim, cfg.act_dim, cfg.hidden, T(1), cfg.seed);
  auto sampler_over = [&](std::size_t& at) {
    return [&batches, &at]() -> std::optional<TransitionBatch<T>> {
      if (at >= batches.size()) return std::nullopt;
      return batches[at++];
    };
  };

  auto run_batched = [&](std::string* blob) {
    Td3State<T> st = init;
    std::size_t at = 0;
    const auto start = std::chrono::steady_clock::now();
    update_k_steps<T>(st, sampler_over(at), cfg.k, hyper);
    std::ostringstream os;
    serialize_state(st, os);
    const auto stop = std::chrono::steady_clock::now();
    if (blob) *blob = os.str();
    return std::chrono::duration<double, std::milli>(stop - start).count();
  };
  auto run_loop = [&](std::string* blob) {
    Td3State<T> st = init;
    std::size_t at = 0;
    std::string last;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < cfg.k; ++i) {
      update_k_steps<T>(st, sampler_over(at), 1, hyper);
      std::ostringstream os;
      serialize_state(st, os);  // the per-call host export
      last = os.str();
    }
    const auto stop = std::chrono::steady_clock::now();
    if (blob) *blob = std::move(last);
    return std::chrono::duration<double, std::milli>(stop - start).count();
  };

  KStepTiming out;
  std::string blob_batched, blob_loop;
  run_batched(&blob_batched);  // warmup, also produces the reference blob
  run_loop(&blob_loop);
  out.bitwise_equal = blob_batched == blob_loop;

  // scheduler spikes dwarf the export cost, so compare the best of several
  // alternating repetitions: fixed work, the minimum is the clean run
  double tb = std::numeric_limits<double>::infinity();
  double tl = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < reps; ++r) {
    tb = std::min(tb, run_batched(nullptr));
    tl = std::min(tl, run_loop(nullptr));
  }
  out.batched_ms = tb;
  out.loop_ms = tl;
  return out;
}

// ---------------------------------------------------------------------------
// Cost estimation
// ---------------------------------------------------------------------------

/// Hardware name -> dollars per hour.
class PriceTable {
 public:
  static PriceTable builtin();
  static PriceTable load(const std::string& path);

  double price_per_hour(const std::string& hardware) const;
  const std::vector<std::pair<std::string, double>>& entries() const { return entries_; }
  void set(const std::string& name, double price);

 private:
  std::vector<std::pair<std::string, double>> entries_;
};

/// runtime_s / 3600 * hourly price.
double cost_estimate(double runtime_s, const std::string& hardware, const PriceTable& table);

}  // namespace pbrl
