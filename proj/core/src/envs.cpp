#include "pbrl/envs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace pbrl {

namespace {
constexpr double kArenaHalf = 2.0;       // point-mass arena [-2, 2]^2, goal at origin
constexpr double kInitHalf = 0.25;       // initial positions drawn from [-0.25, 0.25]^2
constexpr double kMaxSpeed = 1.0;        // per-axis velocity bound
constexpr double kPendulumG = 10.0;
constexpr double kPendulumM = 1.0;
constexpr double kPendulumL = 1.0;
constexpr double kMaxAngVel = 8.0;
constexpr double kPi = 3.14159265358979323846;

double angle_normalize(double x) {
  double a = std::fmod(x + kPi, 2.0 * kPi);
  if (a < 0) a += 2.0 * kPi;
  return a - kPi;
}
}  // namespace

EnvSpec EnvSpec::point_mass() {
  EnvSpec s;
  s.kind = Kind::kPointMass;
  s.observation_dim = 4;
  s.action_dim = 2;
  s.action_bound = 1.0;
  s.horizon = 100;
  s.dt = 0.05;
  return s;
}

EnvSpec EnvSpec::pendulum() {
  EnvSpec s;
  s.kind = Kind::kPendulum;
  s.observation_dim = 3;
  s.action_dim = 1;
  s.action_bound = 2.0;
  s.horizon = 200;
  s.dt = 0.05;
  return s;
}

void EnvSpec::validate() const {
  if (observation_dim < 1 || action_dim < 1) throw ConfigError("EnvSpec: dims must be >= 1");
  if (horizon < 1) throw ConfigError("EnvSpec: horizon must be >= 1");
  if (!(dt > 0)) throw ConfigError("EnvSpec: dt must be positive");
}

std::vector<double> env_observe(const EnvSpec& spec, const EnvState& state) {
  if (spec.kind == EnvSpec::Kind::kPointMass) {
    return state.phys;
  }
  return {std::cos(state.phys[0]), std::sin(state.phys[0]), state.phys[1]};
}

std::pair<EnvState, std::vector<double>> env_reset(const EnvSpec& spec, std::uint64_t seed) {
  spec.validate();
  EnvState st;
  RngSequence rng(seed, 0, RngUse::kEnvReset);
  if (spec.kind == EnvSpec::Kind::kPointMass) {
    st.phys = {rng.uniform(-kInitHalf, kInitHalf), rng.uniform(-kInitHalf, kInitHalf), 0.0, 0.0};
  } else {
    st.phys = {rng.uniform(-kPi, kPi), rng.uniform(-1.0, 1.0)};
  }
  return {st, env_observe(spec, st)};
}

StepResult env_step(const EnvSpec& spec, EnvState& state, std::span<const double> action) {
  if (state.finished) throw UsageError("env_step: episode already finished; reset first");
  if (action.size() != spec.action_dim) throw UsageError("env_step: action dim mismatch");

  StepResult out;
  if (spec.kind == EnvSpec::Kind::kPointMass) {
    const double ax = std::clamp(action[0], -spec.action_bound, spec.action_bound);
    const double ay = std::clamp(action[1], -spec.action_bound, spec.action_bound);
    double px = state.phys[0], py = state.phys[1], vx = state.phys[2], vy = state.phys[3];
    // position advances with the pre-update velocity
    const double nx = px + vx * spec.dt;
    const double ny = py + vy * spec.dt;
    px = std::clamp(nx, -kArenaHalf, kArenaHalf);
    py = std::clamp(ny, -kArenaHalf, kArenaHalf);
    if (nx != px) vx = 0;  // walls absorb the normal velocity component
    if (ny != py) vy = 0;
    vx = std::clamp(vx + ax * spec.dt, -kMaxSpeed, kMaxSpeed);
    vy = std::clamp(vy + ay * spec.dt, -kMaxSpeed, kMaxSpeed);
    state.phys = {px, py, vx, vy};
    out.reward = -std::sqrt(px * px + py * py);
  } else {
    const double u = std::clamp(action[0], -spec.action_bound, spec.action_bound);
    const double th = state.phys[0], om = state.phys[1];
    const double an = angle_normalize(th);
    out.reward = -(an * an + 0.1 * om * om + 0.001 * u * u);
    double om2 = om + (3.0 * kPendulumG / (2.0 * kPendulumL) * std::sin(th) +
                       3.0 / (kPendulumM * kPendulumL * kPendulumL) * u) *
                          spec.dt;
    om2 = std::clamp(om2, -kMaxAngVel, kMaxAngVel);
    const double th2 = th + om2 * spec.dt;
    state.phys = {th2, om2};
  }
  state.step_index += 1;
  state.finished = state.step_index >= spec.horizon;
  out.done = state.finished;
  out.obs = env_observe(spec, state);
  return out;
}

namespace detail {
ProbeStats summarize_times_ms(std::vector<double> times) {
  std::sort(times.begin(), times.end());
  ProbeStats st;
  st.trials = times.size();
  st.median_ms = times[times.size() / 2];
  const double q1 = times[times.size() / 4];
  const double q3 = times[(3 * times.size()) / 4];
  st.iqr_ms = q3 - q1;
  return st;
}
}  // namespace detail

}  // namespace pbrl
