#include <doctest.h>

#include "oracles.hpp"
#include "pbrl/envs.hpp"

using namespace pbrl;

TEST_CASE("env_reset: deterministic, step index zero, bounded initial observations") {
  for (const EnvSpec& spec : {EnvSpec::point_mass(), EnvSpec::pendulum()}) {
    auto [s1, o1] = env_reset(spec, 42);
    auto [s2, o2] = env_reset(spec, 42);
    CHECK(o1 == o2);
    CHECK(s1.step_index == 0);
    CHECK(!s1.finished);
  }
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto [st, obs] = env_reset(EnvSpec::point_mass(), seed);
    CHECK(std::abs(obs[0]) <= 0.25);
    CHECK(std::abs(obs[1]) <= 0.25);
    CHECK(obs[2] == 0.0);
    CHECK(obs[3] == 0.0);
    auto [pst, pobs] = env_reset(EnvSpec::pendulum(), seed);
    CHECK(std::abs(pobs[0]) <= 1.0);
    CHECK(std::abs(pobs[1]) <= 1.0);
    CHECK(std::abs(pobs[2]) <= 1.0);
  }
}

TEST_CASE("point mass: at the goal with zero velocity and zero action the reward is zero") {
  const EnvSpec spec = EnvSpec::point_mass();
  EnvState st;
  st.phys = {0.0, 0.0, 0.0, 0.0};
  const std::vector<double> action{0.0, 0.0};
  auto res = env_step(spec, st, action);
  CHECK(res.reward == 0.0);
}

TEST_CASE("point mass: hand-integrated step with pre-update velocity") {
  const EnvSpec spec = EnvSpec::point_mass();
  EnvState st;
  st.phys = {1.0, 0.0, 0.0, 0.0};
  const std::vector<double> action{-1.0, 0.0};
  auto res = env_step(spec, st, action);
  CHECK(st.phys[2] == doctest::Approx(-0.05).epsilon(1e-15));  // vel' = vel + a*dt
  CHECK(st.phys[0] == 1.0);                                    // pos' uses the old velocity
  CHECK(res.reward == -1.0);
}

TEST_CASE("point mass: actions clip to the bound") {
  const EnvSpec spec = EnvSpec::point_mass();
  EnvState st;
  st.phys = {0.0, 0.0, 0.0, 0.0};
  const std::vector<double> action{100.0, -100.0};
  env_step(spec, st, action);
  CHECK(st.phys[2] == doctest::Approx(0.05));
  CHECK(st.phys[3] == doctest::Approx(-0.05));
}

TEST_CASE("episodes end exactly at the horizon, never before") {
  for (const EnvSpec& spec : {EnvSpec::point_mass(), EnvSpec::pendulum()}) {
    auto [st, obs] = env_reset(spec, 7);
    std::vector<double> action(spec.action_dim, 0.1);
    for (std::size_t t = 1; t <= spec.horizon; ++t) {
      auto res = env_step(spec, st, action);
      CHECK(res.done == (t == spec.horizon));
    }
    CHECK_THROWS_AS(env_step(spec, st, action), UsageError);
  }
}

TEST_CASE("determinism: seed plus action sequence fixes the trajectory") {
  for (const EnvSpec& spec : {EnvSpec::point_mass(), EnvSpec::pendulum()}) {
    auto [s1, o1] = env_reset(spec, 3);
    auto [s2, o2] = env_reset(spec, 3);
    RngSequence rng(9, 0, RngUse::kGeneric);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> action(spec.action_dim);
      for (auto& a : action) a = rng.uniform(-spec.action_bound, spec.action_bound);
      auto r1 = env_step(spec, s1, action);
      auto r2 = env_step(spec, s2, action);
      CHECK(r1.obs == r2.obs);
      CHECK(r1.reward == r2.reward);
    }
  }
}

TEST_CASE("reward bounds: point-mass in [-arena_max, 0], pendulum nonpositive") {
  RngSequence rng(11, 0, RngUse::kGeneric);
  for (const EnvSpec& spec : {EnvSpec::point_mass(), EnvSpec::pendulum()}) {
    auto [st, obs] = env_reset(spec, 13);
    for (std::size_t t = 0; t < spec.horizon; ++t) {
      std::vector<double> action(spec.action_dim);
      for (auto& a : action) a = rng.uniform(-3.0, 3.0);
      auto res = env_step(spec, st, action);
      CHECK(res.reward <= 0.0);
      if (spec.kind == EnvSpec::Kind::kPointMass) {
        CHECK(res.reward >= -2.0 * std::sqrt(8.0));  // arena diameter bound
      }
    }
  }
}

TEST_CASE("env_step_time_probe: guards, headline latency, stability") {
  const EnvSpec spec = EnvSpec::point_mass();
  auto policy = init_pop_mlp<float>(1, {spec.observation_dim, 32, 32, spec.action_dim}, 1,
                                    Act::kTanh, static_cast<float>(spec.action_bound));
  CHECK_THROWS_AS(env_step_time_probe(spec, policy, 0), ConfigError);

  auto stats1 = env_step_time_probe(spec, policy, 400);
  CHECK(stats1.trials == 400);
  // native envs must be far cheaper than the ~0.94 ms simulator reference
  CHECK(stats1.median_ms < 0.94);

  auto stats2 = env_step_time_probe(spec, policy, 400);
  const double lo = std::min(stats1.median_ms, stats2.median_ms);
  const double hi = std::max(stats1.median_ms, stats2.median_ms);
  CHECK(hi <= 3.0 * std::max(lo, 1e-6));
}
