#pragma once

#include <span>
#include <vector>

#include "pbrl/errors.hpp"
#include "pbrl/net_pop.hpp"
#include "pbrl/rng.hpp"

namespace pbrl {

/// Native fixed-horizon continuous-control tasks.  Environments are plain
/// values; each actor owns its copies outright, so there is no cross-instance
/// state to synchronize.
struct EnvSpec {
  enum class Kind { kPointMass, kPendulum };
  Kind kind = Kind::kPointMass;
  std::size_t observation_dim = 4;
  std::size_t action_dim = 2;
  double action_bound = 1.0;
  std::size_t horizon = 200;
  double dt = 0.05;

  static EnvSpec point_mass();
  static EnvSpec pendulum();
  void validate() const;
};

struct EnvState {
  std::vector<double> phys;  // kPointMass: [px, py, vx, vy]; kPendulum: [theta, omega]
  std::size_t step_index = 0;
  bool finished = false;
};

struct StepResult {
  std::vector<double> obs;
  double reward = 0;
  bool done = false;
};

std::vector<double> env_observe(const EnvSpec& spec, const EnvState& state);

/// Deterministic given the seed; step_index starts at 0.
std::pair<EnvState, std::vector<double>> env_reset(const EnvSpec& spec, std::uint64_t seed);

/// Advances one step.  Actions outside the bound are clipped.  The episode
/// finishes exactly when step_index reaches the horizon; stepping further is
/// a usage error.
StepResult env_step(const EnvSpec& spec, EnvState& state, std::span<const double> action);

struct ProbeStats {
  double median_ms = 0;
  double iqr_ms = 0;
  std::size_t trials = 0;
};

/// Times one interaction (policy forward + environment step) `trials` times
/// and reports the median and interquartile range in milliseconds.
template <typename T>
ProbeStats env_step_time_probe(const EnvSpec& spec, const PopMLPParams<T>& policy,
                               std::size_t trials);

namespace detail {
ProbeStats summarize_times_ms(std::vector<double> times);
}

template <typename T>
ProbeStats env_step_time_probe(const EnvSpec& spec, const PopMLPParams<T>& policy,
                               std::size_t trials) {
  if (trials < 1) throw ConfigError("env_step_time_probe: trials must be >= 1");
  if (policy.members() != 1 || policy.in_dim() != spec.observation_dim) {
    throw ConfigError("env_step_time_probe: expected a single-member policy for this env");
  }
  auto [state, obs] = env_reset(spec, 0);
  std::vector<double> times;
  times.reserve(trials);
  PopTensor<T> x = PopTensor<T>::zeros({1, 1, spec.observation_dim});
  std::vector<double> action(spec.action_dim);
  for (std::size_t t = 0; t < trials; ++t) {
    if (state.finished) {
      auto fresh = env_reset(spec, t + 1);
      state = std::move(fresh.first);
      obs = std::move(fresh.second);
    }
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < obs.size(); ++i) x.data[i] = static_cast<T>(obs[i]);
    PopTensor<T> a = pop_mlp_forward(policy, x).first;
    for (std::size_t i = 0; i < action.size(); ++i) action[i] = static_cast<double>(a.data[i]);
    StepResult r = env_step(spec, state, action);
    const auto stop = std::chrono::steady_clock::now();
    obs = std::move(r.obs);
    times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  return detail::summarize_times_ms(std::move(times));
}

}  // namespace pbrl
