#pragma once

#include <functional>
#include <optional>

#include "pbrl/net_pop.hpp"
#include "pbrl/optim.hpp"
#include "pbrl/pop_tensor.hpp"

namespace pbrl {

/// Population-batched training data: axis 0 selects the member, axis 1 the
/// batch row.
template <typename T>
struct TransitionBatch {
  PopTensor<T> s;     // [N, B, ds]
  PopTensor<T> a;     // [N, B, da]
  PopTensor<T> r;     // [N, B, 1]
  PopTensor<T> s2;    // [N, B, ds]
  PopTensor<T> done;  // [N, B, 1], values in {0, 1}

  std::size_t members() const { return s.shape[0]; }
  std::size_t rows() const { return s.shape[1]; }
};

enum class PopMode { kIndependent, kSharedCritic };

/// Per-member TD3 hyperparameters.  The policy delay is a ratio in (0, 1]:
/// each critic update adds delay_ratio to an accumulator and the policy
/// updates whenever it crosses 1, which realizes non-integer update
/// frequencies.
struct Td3Hyper {
  std::vector<double> critic_lr;
  std::vector<double> policy_lr;
  std::vector<double> policy_delay_ratio;  // in (0, 1]
  std::vector<double> explore_std;         // exploration noise, in action-bound units
  std::vector<double> target_std;          // target smoothing noise
  std::vector<double> target_clip;
  std::vector<double> gamma;
  std::vector<double> tau;

  static Td3Hyper defaults(std::size_t n) {
    Td3Hyper h;
    h.critic_lr.assign(n, 3e-4);
    h.policy_lr.assign(n, 3e-4);
    h.policy_delay_ratio.assign(n, 0.5);
    h.explore_std.assign(n, 0.1);
    h.target_std.assign(n, 0.2);
    h.target_clip.assign(n, 0.5);
    h.gamma.assign(n, 0.99);
    h.tau.assign(n, 0.005);
    return h;
  }

  std::size_t members() const { return critic_lr.size(); }

  Td3Hyper slice(std::size_t i) const {
    Td3Hyper h;
    h.critic_lr = {critic_lr[i]};
    h.policy_lr = {policy_lr[i]};
    h.policy_delay_ratio = {policy_delay_ratio[i]};
    h.explore_std = {explore_std[i]};
    h.target_std = {target_std[i]};
    h.target_clip = {target_clip[i]};
    h.gamma = {gamma[i]};
    h.tau = {tau[i]};
    return h;
  }

  void set_member(std::size_t i, const Td3Hyper& one) {
    critic_lr[i] = one.critic_lr[0];
    policy_lr[i] = one.policy_lr[0];
    policy_delay_ratio[i] = one.policy_delay_ratio[0];
    explore_std[i] = one.explore_std[0];
    target_std[i] = one.target_std[0];
    target_clip[i] = one.target_clip[0];
    gamma[i] = one.gamma[0];
    tau[i] = one.tau[0];
  }

  void validate(std::size_t n) const {
    auto len = [&](const std::vector<double>& v, const char* name) {
      if (v.size() != n) throw ConfigError(std::string("Td3Hyper: ") + name + " length != N");
    };
    len(critic_lr, "critic_lr");
    len(policy_lr, "policy_lr");
    len(policy_delay_ratio, "policy_delay_ratio");
    len(explore_std, "explore_std");
    len(target_std, "target_std");
    len(target_clip, "target_clip");
    len(gamma, "gamma");
    len(tau, "tau");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(critic_lr[i] > 0) || !(policy_lr[i] > 0)) {
        throw ConfigError("Td3Hyper: learning rates must be positive");
      }
      if (!(policy_delay_ratio[i] > 0 && policy_delay_ratio[i] <= 1.0)) {
        throw ConfigError("Td3Hyper: policy_delay_ratio must be in (0, 1]");
      }
      if (explore_std[i] < 0 || target_std[i] < 0 || target_clip[i] < 0) {
        throw ConfigError("Td3Hyper: noise parameters must be >= 0");
      }
      if (!(gamma[i] >= 0.9 && gamma[i] <= 1.0) && gamma[i] != 0.0) {
        throw ConfigError("Td3Hyper: discount must be in [0.9, 1] (or 0 in tests)");
      }
      if (!(tau[i] > 0 && tau[i] <= 1.0)) throw ConfigError("Td3Hyper: tau must be in (0, 1]");
    }
  }
};

/// Per-member SAC hyperparameters.
struct SacHyper {
  std::vector<double> policy_lr;
  std::vector<double> critic_lr;
  std::vector<double> alpha_lr;
  std::vector<double> target_entropy;
  std::vector<double> reward_scale;
  std::vector<double> gamma;
  std::vector<double> tau;

  static SacHyper defaults(std::size_t n, std::size_t action_dim) {
    SacHyper h;
    h.policy_lr.assign(n, 3e-4);
    h.critic_lr.assign(n, 3e-4);
    h.alpha_lr.assign(n, 3e-4);
    h.target_entropy.assign(n, -static_cast<double>(action_dim));
    h.reward_scale.assign(n, 1.0);
    h.gamma.assign(n, 0.99);
    h.tau.assign(n, 0.005);
    return h;
  }

  std::size_t members() const { return policy_lr.size(); }

  SacHyper slice(std::size_t i) const {
    SacHyper h;
    h.policy_lr = {policy_lr[i]};
    h.critic_lr = {critic_lr[i]};
    h.alpha_lr = {alpha_lr[i]};
    h.target_entropy = {target_entropy[i]};
    h.reward_scale = {reward_scale[i]};
    h.gamma = {gamma[i]};
    h.tau = {tau[i]};
    return h;
  }

  void set_member(std::size_t i, const SacHyper& one) {
    policy_lr[i] = one.policy_lr[0];
    critic_lr[i] = one.critic_lr[0];
    alpha_lr[i] = one.alpha_lr[0];
    target_entropy[i] = one.target_entropy[0];
    reward_scale[i] = one.reward_scale[0];
    gamma[i] = one.gamma[0];
    tau[i] = one.tau[0];
  }
};

// ---------------------------------------------------------------------------
// TD3
// ---------------------------------------------------------------------------

/// Learner state for a population of TD3 agents.  In kSharedCritic mode the
/// critic tensors have a population extent of 1 and serve every policy; the
/// critic loss is then averaged over the population.
template <typename T>
struct Td3State {
  PopMLPParams<T> policy, policy_target;
  PopMLPParams<T> critic1, critic2, critic1_target, critic2_target;
  MlpAdam<T> opt_policy, opt_critic1, opt_critic2;
  std::vector<double> delay_acc;        // per member, fires a policy update at >= 1
  std::vector<std::uint64_t> steps;     // per-member update counter, keys noise draws
  std::vector<std::uint64_t> streams;   // per-member rng stream ids
  std::uint64_t seed = 0;
  PopMode mode = PopMode::kIndependent;
  std::size_t obs_dim = 0, act_dim = 0;

  std::size_t members() const { return policy.members(); }
  T action_bound() const { return policy.output_scale; }
};

template <typename T>
Td3State<T> make_td3_state(std::size_t n, std::size_t obs_dim, std::size_t act_dim,
                           const std::vector<std::size_t>& hidden, T action_bound,
                           std::uint64_t seed, PopMode mode = PopMode::kIndependent) {
  Td3State<T> st;
  st.seed = seed;
  st.mode = mode;
  st.obs_dim = obs_dim;
  st.act_dim = act_dim;
  std::vector<std::size_t> pol_dims{obs_dim};
  pol_dims.insert(pol_dims.end(), hidden.begin(), hidden.end());
  pol_dims.push_back(act_dim);
  std::vector<std::size_t> q_dims{obs_dim + act_dim};
  q_dims.insert(q_dims.end(), hidden.begin(), hidden.end());
  q_dims.push_back(1);

  const std::size_t critic_n = (mode == PopMode::kSharedCritic) ? 1 : n;
  st.policy = init_pop_mlp<T>(n, pol_dims, mix64(seed ^ 0xA1), Act::kTanh, action_bound);
  st.critic1 = init_pop_mlp<T>(critic_n, q_dims, mix64(seed ^ 0xB2));
  st.critic2 = init_pop_mlp<T>(critic_n, q_dims, mix64(seed ^ 0xC3));
  st.policy_target = st.policy;
  st.critic1_target = st.critic1;
  st.critic2_target = st.critic2;
  st.opt_policy = MlpAdam<T>::like(st.policy);
  st.opt_critic1 = MlpAdam<T>::like(st.critic1);
  st.opt_critic2 = MlpAdam<T>::like(st.critic2);
  st.delay_acc.assign(n, 0.0);
  st.steps.assign(n, 0);
  st.streams.resize(n);
  for (std::size_t i = 0; i < n; ++i) st.streams[i] = i;
  return st;
}

namespace detail {

/// Q(s,a) through a critic that may be shared (population extent 1): a shared
/// critic sees the population folded into its batch axis, which is a pure
/// reinterpretation of the same row-major buffer.
template <typename T>
std::pair<PopTensor<T>, ForwardCache<T>> critic_forward(const PopMLPParams<T>& critic,
                                                        PopTensor<T> input) {
  const std::size_t n = input.shape[0];
  if (critic.members() == 1 && n > 1) {
    input.set_shape({1, input.shape[1] * n, input.shape[2]});
  }
  return pop_mlp_forward(critic, std::move(input));
}

template <typename T>
PopTensor<T> unfold_members(PopTensor<T> x, std::size_t n, std::size_t rows) {
  if (x.shape[0] == 1 && n > 1) x.set_shape({n, rows, x.shape[2]});
  return x;
}

}  // namespace detail

/// Bootstrap target y = r + gamma * (1 - done) * min(Q1', Q2') evaluated at the
/// smoothed target action clip(pi'(s') + clip(eps, +-c), +-bound).  Noise for
/// member n at update step t comes from stream (seed, streams[n], t), so the
/// same member replayed alone sees identical noise.
template <typename T>
PopTensor<T> td3_critic_target(const TransitionBatch<T>& batch, const PopMLPParams<T>& policy_t,
                               const PopMLPParams<T>& critic1_t, const PopMLPParams<T>& critic2_t,
                               const Td3Hyper& hyper, std::uint64_t seed,
                               const std::vector<std::uint64_t>& streams,
                               const std::vector<std::uint64_t>& steps) {
  const std::size_t n = batch.members(), rows = batch.rows();
  const std::size_t da = batch.a.shape[2];
  const T bound = policy_t.output_scale;

  PopTensor<T> a2 = pop_mlp_forward(policy_t, batch.s2).first;
  for (std::size_t m = 0; m < n; ++m) {
    const RngStream rs = RngStream::of(seed, streams[m], RngUse::kTargetNoise, steps[m]);
    const T std_dev = static_cast<T>(hyper.target_std[m] * static_cast<double>(bound));
    const T clip = static_cast<T>(hyper.target_clip[m] * static_cast<double>(bound));
    T* am = a2.member_ptr(m);
    for (std::size_t e = 0; e < rows * da; ++e) {
      T eps = static_cast<T>(rs.normal_pair(2 * e)) * std_dev;
      eps = std::clamp(eps, -clip, clip);
      am[e] = std::clamp(am[e] + eps, -bound, bound);
    }
  }

  PopTensor<T> sa2 = concat_features(batch.s2, a2);
  PopTensor<T> q1 = detail::unfold_members(detail::critic_forward(critic1_t, sa2).first, n, rows);
  PopTensor<T> q2 = detail::unfold_members(detail::critic_forward(critic2_t, sa2).first, n, rows);

  PopTensor<T> y = PopTensor<T>::zeros({n, rows, 1});
  for (std::size_t m = 0; m < n; ++m) {
    const T g = static_cast<T>(hyper.gamma[m]);
    const T* rm = batch.r.member_ptr(m);
    const T* dm = batch.done.member_ptr(m);
    const T* q1m = q1.member_ptr(m);
    const T* q2m = q2.member_ptr(m);
    T* ym = y.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      const T qmin = std::min(q1m[b], q2m[b]);
      ym[b] = rm[b] + g * (T(1) - dm[b]) * qmin;
    }
  }
  return y;
}

/// Sum over members of the per-member mean-squared error, with gradients for
/// the network.  For a shared network the population is folded into the batch
/// and the loss is the mean over all rows (equivalently the population average
/// of per-member means).
template <typename T>
std::pair<double, MlpGrads<T>> mse_loss_grads(const PopMLPParams<T>& net,
                                              const PopTensor<T>& input,
                                              const PopTensor<T>& target) {
  auto [q, cache] = detail::critic_forward(net, input);
  PopTensor<T> flat_target = target;
  if (q.shape != flat_target.shape) flat_target.set_shape(q.shape);
  const std::size_t rows = q.shape[1];
  PopTensor<T> grad_q = PopTensor<T>::zeros(q.shape);
  double loss = 0;
  const T scale = T(2) / static_cast<T>(rows);
  for (std::size_t m = 0; m < q.shape[0]; ++m) {
    const T* qm = q.member_ptr(m);
    const T* tm = flat_target.member_ptr(m);
    T* gm = grad_q.member_ptr(m);
    double acc = 0;
    for (std::size_t b = 0; b < rows; ++b) {
      const T d = qm[b] - tm[b];
      acc += static_cast<double>(d) * static_cast<double>(d);
      gm[b] = scale * d;
    }
    loss += acc / static_cast<double>(rows);
  }
  auto [grads, gx] = pop_mlp_backward(net, cache, grad_q);
  (void)gx;
  return {loss, std::move(grads)};
}

/// Deterministic-policy-gradient loss sum_n mean_b [-Q1(s, pi_n(s))] with
/// gradients for the policy only; critic parameters are held fixed.
template <typename T>
std::pair<double, MlpGrads<T>> td3_policy_loss_grads(const PopMLPParams<T>& policy,
                                                     const PopMLPParams<T>& critic1,
                                                     const PopTensor<T>& s) {
  const std::size_t n = s.shape[0], rows = s.shape[1];
  auto [a, cache_p] = pop_mlp_forward(policy, s);
  PopTensor<T> sa = concat_features(s, a);
  auto [q, cache_q] = detail::critic_forward(critic1, sa);
  double loss = 0;
  for (std::size_t i = 0; i < q.data.size(); ++i) loss -= static_cast<double>(q.data[i]);
  loss /= static_cast<double>(rows);
  PopTensor<T> grad_q = PopTensor<T>::full(q.shape, -T(1) / static_cast<T>(rows));
  auto [cgrads, grad_sa] = pop_mlp_backward(critic1, cache_q, grad_q);
  (void)cgrads;
  grad_sa = detail::unfold_members(std::move(grad_sa), n, rows);
  auto [gs, ga] = split_features(grad_sa, s.shape[2]);
  (void)gs;
  auto [pgrads, gx] = pop_mlp_backward(policy, cache_p, ga);
  (void)gx;
  return {loss, std::move(pgrads)};
}

/// Extra additive term on the policy loss; receives the policy and accumulates
/// into the gradients (used for diversity regularization).
template <typename T>
using PolicyGradHook = std::function<void(const PopMLPParams<T>&, MlpGrads<T>&)>;

/// One vectorized TD3 update: critic step on the TD error, delayed policy and
/// target updates per member.  Independent mode updates each member with its
/// own loss; shared-critic mode averages the critic loss over the population
/// and updates every policy each step.  policy_member_mask, when given,
/// restricts policy updates to the marked members (the critic still trains on
/// the whole batch).
template <typename T>
void td3_update_step(Td3State<T>& st, const TransitionBatch<T>& batch, const Td3Hyper& hyper,
                     const PolicyGradHook<T>* hook = nullptr,
                     const std::vector<char>* policy_member_mask = nullptr) {
  const std::size_t n = st.members();
  hyper.validate(n);
  if (batch.members() != n) {
    throw ConfigError("td3_update_step: batch population " + std::to_string(batch.members()) +
                      " != state population " + std::to_string(n));
  }

  PopTensor<T> y = td3_critic_target(batch, st.policy_target, st.critic1_target,
                                     st.critic2_target, hyper, st.seed, st.streams, st.steps);

  const bool shared = st.mode == PopMode::kSharedCritic;
  const std::vector<double> critic_lr =
      shared ? std::vector<double>{hyper.critic_lr[0]} : hyper.critic_lr;

  PopTensor<T> sa = concat_features(batch.s, batch.a);
  {
    auto [l1, g1] = mse_loss_grads(st.critic1, sa, y);
    (void)l1;
    st.opt_critic1.step(st.critic1, g1, critic_lr);
    auto [l2, g2] = mse_loss_grads(st.critic2, sa, y);
    (void)l2;
    st.opt_critic2.step(st.critic2, g2, critic_lr);
  }

  std::vector<char> fire(n, 0);
  bool any_fire = false;
  for (std::size_t m = 0; m < n; ++m) {
    if (shared) {
      fire[m] = 1;  // one critic update per policy-population update
    } else {
      st.delay_acc[m] += hyper.policy_delay_ratio[m];
      if (st.delay_acc[m] >= 1.0 - 1e-12) {
        st.delay_acc[m] -= 1.0;
        fire[m] = 1;
      }
    }
    if (policy_member_mask && !(*policy_member_mask)[m]) fire[m] = 0;
    any_fire = any_fire || fire[m];
  }

  if (any_fire) {
    auto [loss, pgrads] = td3_policy_loss_grads(st.policy, st.critic1, batch.s);
    (void)loss;
    if (hook && *hook) (*hook)(st.policy, pgrads);
    st.opt_policy.step(st.policy, pgrads, hyper.policy_lr, &fire);

    for (std::size_t l = 0; l < st.policy.layers.size(); ++l) {
      soft_update_members_inplace(st.policy_target.layers[l].w, st.policy.layers[l].w, hyper.tau,
                                  fire);
      soft_update_members_inplace(st.policy_target.layers[l].b, st.policy.layers[l].b, hyper.tau,
                                  fire);
    }
    const std::vector<double> ctau = shared ? std::vector<double>{hyper.tau[0]} : hyper.tau;
    const std::vector<char> cmask = shared ? std::vector<char>{1} : fire;
    for (std::size_t l = 0; l < st.critic1.layers.size(); ++l) {
      soft_update_members_inplace(st.critic1_target.layers[l].w, st.critic1.layers[l].w, ctau,
                                  cmask);
      soft_update_members_inplace(st.critic1_target.layers[l].b, st.critic1.layers[l].b, ctau,
                                  cmask);
      soft_update_members_inplace(st.critic2_target.layers[l].w, st.critic2.layers[l].w, ctau,
                                  cmask);
      soft_update_members_inplace(st.critic2_target.layers[l].b, st.critic2.layers[l].b, ctau,
                                  cmask);
    }
  }

  for (std::size_t m = 0; m < n; ++m) st.steps[m] += 1;
}

/// Extracts member i as a population of one (independent mode only).
template <typename T>
Td3State<T> slice_member(const Td3State<T>& st, std::size_t i) {
  if (st.mode == PopMode::kSharedCritic) {
    throw UsageError("slice_member: shared-critic state cannot be split per member");
  }
  Td3State<T> s;
  s.policy = slice_member(st.policy, i);
  s.policy_target = slice_member(st.policy_target, i);
  s.critic1 = slice_member(st.critic1, i);
  s.critic2 = slice_member(st.critic2, i);
  s.critic1_target = slice_member(st.critic1_target, i);
  s.critic2_target = slice_member(st.critic2_target, i);
  s.opt_policy = st.opt_policy.slice(i);
  s.opt_critic1 = st.opt_critic1.slice(i);
  s.opt_critic2 = st.opt_critic2.slice(i);
  s.delay_acc = {st.delay_acc[i]};
  s.steps = {st.steps[i]};
  s.streams = {st.streams[i]};
  s.seed = st.seed;
  s.mode = st.mode;
  s.obs_dim = st.obs_dim;
  s.act_dim = st.act_dim;
  return s;
}

template <typename T>
void set_member(Td3State<T>& st, std::size_t i, const Td3State<T>& sub) {
  set_member(st.policy, i, sub.policy);
  set_member(st.policy_target, i, sub.policy_target);
  set_member(st.critic1, i, sub.critic1);
  set_member(st.critic2, i, sub.critic2);
  set_member(st.critic1_target, i, sub.critic1_target);
  set_member(st.critic2_target, i, sub.critic2_target);
  st.opt_policy.set_member(i, sub.opt_policy);
  st.opt_critic1.set_member(i, sub.opt_critic1);
  st.opt_critic2.set_member(i, sub.opt_critic2);
  st.delay_acc[i] = sub.delay_acc[0];
  st.steps[i] = sub.steps[0];
  st.streams[i] = sub.streams[0];
}

// ---------------------------------------------------------------------------
// SAC
// ---------------------------------------------------------------------------

constexpr double kLogStdMin = -20.0;
constexpr double kLogStdMax = 2.0;

template <typename T>
struct SacState {
  PopMLPParams<T> policy;  // outputs [mean | log_std], linear head
  PopMLPParams<T> critic1, critic2, critic1_target, critic2_target;
  MlpAdam<T> opt_policy, opt_critic1, opt_critic2;
  PopTensor<T> log_alpha;  // [N, 1, 1]
  AdamState<T> opt_alpha;
  std::vector<std::uint64_t> steps;
  std::vector<std::uint64_t> streams;
  std::uint64_t seed = 0;
  PopMode mode = PopMode::kIndependent;
  std::size_t obs_dim = 0, act_dim = 0;
  T action_bound = T(1);

  std::size_t members() const { return policy.members(); }
};

template <typename T>
SacState<T> make_sac_state(std::size_t n, std::size_t obs_dim, std::size_t act_dim,
                           const std::vector<std::size_t>& hidden, T action_bound,
                           std::uint64_t seed, PopMode mode = PopMode::kIndependent) {
  SacState<T> st;
  st.seed = seed;
  st.mode = mode;
  st.obs_dim = obs_dim;
  st.act_dim = act_dim;
  st.action_bound = action_bound;
  std::vector<std::size_t> pol_dims{obs_dim};
  pol_dims.insert(pol_dims.end(), hidden.begin(), hidden.end());
  pol_dims.push_back(2 * act_dim);
  std::vector<std::size_t> q_dims{obs_dim + act_dim};
  q_dims.insert(q_dims.end(), hidden.begin(), hidden.end());
  q_dims.push_back(1);
  const std::size_t critic_n = (mode == PopMode::kSharedCritic) ? 1 : n;
  st.policy = init_pop_mlp<T>(n, pol_dims, mix64(seed ^ 0xD4));
  st.critic1 = init_pop_mlp<T>(critic_n, q_dims, mix64(seed ^ 0xE5));
  st.critic2 = init_pop_mlp<T>(critic_n, q_dims, mix64(seed ^ 0xF6));
  st.critic1_target = st.critic1;
  st.critic2_target = st.critic2;
  st.opt_policy = MlpAdam<T>::like(st.policy);
  st.opt_critic1 = MlpAdam<T>::like(st.critic1);
  st.opt_critic2 = MlpAdam<T>::like(st.critic2);
  st.log_alpha = PopTensor<T>::zeros({n, 1, 1});
  st.opt_alpha = AdamState<T>::like(st.log_alpha);
  st.steps.assign(n, 0);
  st.streams.resize(n);
  for (std::size_t i = 0; i < n; ++i) st.streams[i] = i;
  return st;
}

/// log(1 - tanh(x)^2) evaluated without cancellation.
template <typename T>
T log_one_minus_tanh_sq(T x) {
  const T z = T(-2) * x;
  const T softplus = std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
  return static_cast<T>(1.3862943611198906) - T(2) * x - T(2) * softplus;  // log 4 - 2x - 2 sp(-2x)
}

/// Log-density of a = bound * tanh(mu + sigma * eps) under the squashed
/// Gaussian, as a function of (mu, log_std) with eps held fixed.
/// Returns per-sample log-probs [N, B, 1] plus the pre-squash values x.
template <typename T>
std::pair<PopTensor<T>, PopTensor<T>> tanh_gaussian_logprob(const PopTensor<T>& mu,
                                                            const PopTensor<T>& log_std,
                                                            const PopTensor<T>& eps, T bound) {
  require_same_shape(mu, log_std, "tanh_gaussian_logprob");
  require_same_shape(mu, eps, "tanh_gaussian_logprob");
  const std::size_t n = mu.shape[0], rows = mu.shape[1], da = mu.shape[2];
  PopTensor<T> x = PopTensor<T>::zeros(mu.shape);
  PopTensor<T> logp = PopTensor<T>::zeros({n, rows, 1});
  const T half_log_2pi = static_cast<T>(0.9189385332046727);
  const T log_bound = std::log(bound);
  for (std::size_t m = 0; m < n; ++m) {
    const T* mum = mu.member_ptr(m);
    const T* lsm = log_std.member_ptr(m);
    const T* em = eps.member_ptr(m);
    T* xm = x.member_ptr(m);
    T* lpm = logp.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      T acc = 0;
      for (std::size_t j = 0; j < da; ++j) {
        const std::size_t k = b * da + j;
        const T sig = std::exp(lsm[k]);
        const T xv = mum[k] + sig * em[k];
        xm[k] = xv;
        acc += -T(0.5) * em[k] * em[k] - lsm[k] - half_log_2pi;
        acc -= log_one_minus_tanh_sq(xv);
        acc -= log_bound;
      }
      lpm[b] = acc;
    }
  }
  return {std::move(logp), std::move(x)};
}

/// Gradients of sum over samples of w[n,b] * logp[n,b] with respect to mu and
/// log_std (eps fixed).  d logp / d x = 2 tanh(x); d x / d log_std = sigma*eps.
template <typename T>
std::pair<PopTensor<T>, PopTensor<T>> tanh_gaussian_logprob_backward(
    const PopTensor<T>& weights, const PopTensor<T>& x, const PopTensor<T>& log_std,
    const PopTensor<T>& eps) {
  const std::size_t n = x.shape[0], rows = x.shape[1], da = x.shape[2];
  PopTensor<T> gmu = PopTensor<T>::zeros(x.shape);
  PopTensor<T> gls = PopTensor<T>::zeros(x.shape);
  for (std::size_t m = 0; m < n; ++m) {
    const T* wm = weights.member_ptr(m);
    const T* xm = x.member_ptr(m);
    const T* lsm = log_std.member_ptr(m);
    const T* em = eps.member_ptr(m);
    T* gm = gmu.member_ptr(m);
    T* gl = gls.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      const T w = wm[b];
      for (std::size_t j = 0; j < da; ++j) {
        const std::size_t k = b * da + j;
        const T dlogp_dx = T(2) * std::tanh(xm[k]);
        gm[k] = w * dlogp_dx;
        gl[k] = w * (dlogp_dx * std::exp(lsm[k]) * em[k] - T(1));
      }
    }
  }
  return {std::move(gmu), std::move(gls)};
}

namespace detail {

template <typename T>
void split_policy_head(const PopTensor<T>& h, PopTensor<T>& mu, PopTensor<T>& log_std,
                       std::vector<char>& clamped) {
  const std::size_t da = h.shape[2] / 2;
  auto [m, l] = split_features(h, da);
  mu = std::move(m);
  log_std = std::move(l);
  clamped.assign(log_std.data.size(), 0);
  for (std::size_t i = 0; i < log_std.data.size(); ++i) {
    if (log_std.data[i] < static_cast<T>(kLogStdMin)) {
      log_std.data[i] = static_cast<T>(kLogStdMin);
      clamped[i] = 1;
    } else if (log_std.data[i] > static_cast<T>(kLogStdMax)) {
      log_std.data[i] = static_cast<T>(kLogStdMax);
      clamped[i] = 1;
    }
  }
}

template <typename T>
PopTensor<T> draw_eps(std::size_t n, std::size_t rows, std::size_t da, std::uint64_t seed,
                      const std::vector<std::uint64_t>& streams,
                      const std::vector<std::uint64_t>& steps, RngUse use) {
  PopTensor<T> eps = PopTensor<T>::zeros({n, rows, da});
  for (std::size_t m = 0; m < n; ++m) {
    const RngStream rs = RngStream::of(seed, streams[m], use, steps[m]);
    T* em = eps.member_ptr(m);
    for (std::size_t e = 0; e < rows * da; ++e) em[e] = static_cast<T>(rs.normal_pair(2 * e));
  }
  return eps;
}

}  // namespace detail

/// Policy loss sum_n mean_b [alpha_n * logp - min(Q1, Q2)(s, a)] with analytic
/// gradients for the policy head, eps fixed.  Exposed separately so the
/// gradient can be checked against finite differences.
template <typename T>
struct SacPolicyLossOut {
  double loss_sum = 0;
  MlpGrads<T> policy_grads;
  PopTensor<T> logp;  // [N, B, 1]
};

template <typename T>
SacPolicyLossOut<T> sac_policy_loss_grads(const PopMLPParams<T>& policy,
                                          const PopMLPParams<T>& critic1,
                                          const PopMLPParams<T>& critic2, const PopTensor<T>& s,
                                          const std::vector<double>& alpha,
                                          const PopTensor<T>& eps, T bound) {
  const std::size_t n = s.shape[0], rows = s.shape[1];
  auto [h, cache] = pop_mlp_forward(policy, s);
  PopTensor<T> mu, ls;
  std::vector<char> clamped;
  detail::split_policy_head(h, mu, ls, clamped);
  auto [logp, x] = tanh_gaussian_logprob(mu, ls, eps, bound);

  const std::size_t da = mu.shape[2];
  PopTensor<T> tanhx = activation(x, Act::kTanh);
  PopTensor<T> a = tanhx;
  for (T& v : a.data) v *= bound;

  PopTensor<T> sa = concat_features(s, a);
  auto [q1, c1] = detail::critic_forward(critic1, sa);
  auto [q2, c2] = detail::critic_forward(critic2, sa);

  // loss and cotangents
  double loss = 0;
  PopTensor<T> gq1 = PopTensor<T>::zeros(q1.shape);
  PopTensor<T> gq2 = PopTensor<T>::zeros(q2.shape);
  PopTensor<T> logp_w = PopTensor<T>::zeros(logp.shape);  // weight on logp per sample
  {
    PopTensor<T> q1v = detail::unfold_members(q1, n, rows);
    PopTensor<T> q2v = detail::unfold_members(q2, n, rows);
    const T inv_rows = T(1) / static_cast<T>(rows);
    std::size_t flat = 0;
    for (std::size_t m = 0; m < n; ++m) {
      const T am = static_cast<T>(alpha[m]);
      const T* q1m = q1v.member_ptr(m);
      const T* q2m = q2v.member_ptr(m);
      const T* lpm = logp.member_ptr(m);
      T* wm = logp_w.member_ptr(m);
      for (std::size_t b = 0; b < rows; ++b, ++flat) {
        const T qmin = std::min(q1m[b], q2m[b]);
        loss += static_cast<double>(am * lpm[b] - qmin) / static_cast<double>(rows);
        wm[b] = am * inv_rows;
        if (q1m[b] <= q2m[b]) {
          gq1.data[flat] = -inv_rows;
        } else {
          gq2.data[flat] = -inv_rows;
        }
      }
    }
  }

  // -Qmin path: through the critics into the action
  auto [cg1, gsa1] = pop_mlp_backward(critic1, c1, gq1);
  auto [cg2, gsa2] = pop_mlp_backward(critic2, c2, gq2);
  (void)cg1;
  (void)cg2;
  for (std::size_t i = 0; i < gsa1.data.size(); ++i) gsa1.data[i] += gsa2.data[i];
  gsa1 = detail::unfold_members(std::move(gsa1), n, rows);
  auto [gs, ga] = split_features(gsa1, s.shape[2]);
  (void)gs;

  // alpha * logp path
  auto [gmu, gls] = tanh_gaussian_logprob_backward(logp_w, x, ls, eps);

  // combine: grad wrt x from the action path, then into mu / log_std
  for (std::size_t m = 0; m < n; ++m) {
    const T* gam = ga.member_ptr(m);
    const T* tm = tanhx.member_ptr(m);
    const T* lsm = ls.member_ptr(m);
    const T* em = eps.member_ptr(m);
    T* gmum = gmu.member_ptr(m);
    T* glsm = gls.member_ptr(m);
    for (std::size_t k = 0; k < rows * da; ++k) {
      const T dadx = bound * (T(1) - tm[k] * tm[k]);
      const T gx = gam[k] * dadx;
      gmum[k] += gx;
      glsm[k] += gx * std::exp(lsm[k]) * em[k];
    }
  }
  for (std::size_t i = 0; i < gls.data.size(); ++i) {
    if (clamped[i]) gls.data[i] = T(0);
  }

  PopTensor<T> gh = concat_features(gmu, gls);
  auto [pgrads, gx0] = pop_mlp_backward(policy, cache, gh);
  (void)gx0;

  SacPolicyLossOut<T> out;
  out.loss_sum = loss;
  out.policy_grads = std::move(pgrads);
  out.logp = std::move(logp);
  return out;
}

/// Soft-Q target y = rs*r + gamma*(1-done)*(min(Q1',Q2')(s',a') - alpha*logp')
/// with a' freshly sampled from the current policy.
template <typename T>
PopTensor<T> sac_critic_target(const SacState<T>& st, const TransitionBatch<T>& batch,
                               const SacHyper& hyper) {
  const std::size_t n = batch.members(), rows = batch.rows();
  auto h2 = pop_mlp_forward(st.policy, batch.s2).first;
  PopTensor<T> mu2, ls2;
  std::vector<char> clamped;
  detail::split_policy_head(h2, mu2, ls2, clamped);
  PopTensor<T> eps2 = detail::draw_eps<T>(n, rows, st.act_dim, st.seed, st.streams, st.steps,
                                          RngUse::kSacEpsTarget);
  auto [logp2, x2] = tanh_gaussian_logprob(mu2, ls2, eps2, st.action_bound);
  PopTensor<T> a2 = activation(x2, Act::kTanh);
  for (T& v : a2.data) v *= st.action_bound;

  PopTensor<T> sa2 = concat_features(batch.s2, a2);
  PopTensor<T> q1 =
      detail::unfold_members(detail::critic_forward(st.critic1_target, sa2).first, n, rows);
  PopTensor<T> q2 =
      detail::unfold_members(detail::critic_forward(st.critic2_target, sa2).first, n, rows);

  PopTensor<T> y = PopTensor<T>::zeros({n, rows, 1});
  for (std::size_t m = 0; m < n; ++m) {
    const T g = static_cast<T>(hyper.gamma[m]);
    const T rs = static_cast<T>(hyper.reward_scale[m]);
    const T alpha = std::exp(st.log_alpha.data[m]);
    const T* rm = batch.r.member_ptr(m);
    const T* dm = batch.done.member_ptr(m);
    const T* q1m = q1.member_ptr(m);
    const T* q2m = q2.member_ptr(m);
    const T* lpm = logp2.member_ptr(m);
    T* ym = y.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      const T qmin = std::min(q1m[b], q2m[b]);
      ym[b] = rs * rm[b] + g * (T(1) - dm[b]) * (qmin - alpha * lpm[b]);
    }
  }
  return y;
}

/// One vectorized SAC update: twin-critic step toward the soft-Q target,
/// reparametrized policy step, per-member temperature step on the gradient of
/// -alpha * (logp + target_entropy), target tracking.
template <typename T>
void sac_update_step(SacState<T>& st, const TransitionBatch<T>& batch, const SacHyper& hyper) {
  const std::size_t n = st.members();
  if (batch.members() != n) {
    throw ConfigError("sac_update_step: batch population " + std::to_string(batch.members()) +
                      " != state population " + std::to_string(n));
  }
  const std::size_t rows = batch.rows();

  std::vector<double> alpha(n);
  for (std::size_t m = 0; m < n; ++m) alpha[m] = std::exp(static_cast<double>(st.log_alpha.data[m]));

  PopTensor<T> y = sac_critic_target(st, batch, hyper);

  const bool shared = st.mode == PopMode::kSharedCritic;
  const std::vector<double> critic_lr =
      shared ? std::vector<double>{hyper.critic_lr[0]} : hyper.critic_lr;
  PopTensor<T> sa = concat_features(batch.s, batch.a);
  {
    auto [l1, g1] = mse_loss_grads(st.critic1, sa, y);
    (void)l1;
    st.opt_critic1.step(st.critic1, g1, critic_lr);
    auto [l2, g2] = mse_loss_grads(st.critic2, sa, y);
    (void)l2;
    st.opt_critic2.step(st.critic2, g2, critic_lr);
  }

  PopTensor<T> eps =
      detail::draw_eps<T>(n, rows, st.act_dim, st.seed, st.streams, st.steps, RngUse::kSacEps);
  auto pol = sac_policy_loss_grads(st.policy, st.critic1, st.critic2, batch.s, alpha, eps,
                                   st.action_bound);
  st.opt_policy.step(st.policy, pol.policy_grads, hyper.policy_lr);

  // temperature: d/dlog_alpha of -alpha * mean_b(logp + target_entropy)
  PopTensor<T> galpha = PopTensor<T>::zeros({n, 1, 1});
  for (std::size_t m = 0; m < n; ++m) {
    double mean_term = 0;
    const T* lpm = pol.logp.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      mean_term += static_cast<double>(lpm[b]) + hyper.target_entropy[m];
    }
    mean_term /= static_cast<double>(rows);
    galpha.data[m] = static_cast<T>(-alpha[m] * mean_term);
  }
  adam_step_inplace(st.log_alpha, galpha, st.opt_alpha, hyper.alpha_lr);

  const std::vector<double> ctau = shared ? std::vector<double>{hyper.tau[0]} : hyper.tau;
  const std::vector<char> cmask(shared ? 1 : n, 1);
  for (std::size_t l = 0; l < st.critic1.layers.size(); ++l) {
    soft_update_members_inplace(st.critic1_target.layers[l].w, st.critic1.layers[l].w, ctau, cmask);
    soft_update_members_inplace(st.critic1_target.layers[l].b, st.critic1.layers[l].b, ctau, cmask);
    soft_update_members_inplace(st.critic2_target.layers[l].w, st.critic2.layers[l].w, ctau, cmask);
    soft_update_members_inplace(st.critic2_target.layers[l].b, st.critic2.layers[l].b, ctau, cmask);
  }

  for (std::size_t m = 0; m < n; ++m) st.steps[m] += 1;
}

template <typename T>
SacState<T> slice_member(const SacState<T>& st, std::size_t i) {
  if (st.mode == PopMode::kSharedCritic) {
    throw UsageError("slice_member: shared-critic state cannot be split per member");
  }
  SacState<T> s;
  s.policy = slice_member(st.policy, i);
  s.critic1 = slice_member(st.critic1, i);
  s.critic2 = slice_member(st.critic2, i);
  s.critic1_target = slice_member(st.critic1_target, i);
  s.critic2_target = slice_member(st.critic2_target, i);
  s.opt_policy = st.opt_policy.slice(i);
  s.opt_critic1 = st.opt_critic1.slice(i);
  s.opt_critic2 = st.opt_critic2.slice(i);
  s.log_alpha = slice_member(st.log_alpha, i);
  s.opt_alpha.m = slice_member(st.opt_alpha.m, i);
  s.opt_alpha.v = slice_member(st.opt_alpha.v, i);
  s.opt_alpha.t = {st.opt_alpha.t[i]};
  s.opt_alpha.beta1 = st.opt_alpha.beta1;
  s.opt_alpha.beta2 = st.opt_alpha.beta2;
  s.opt_alpha.eps = st.opt_alpha.eps;
  s.steps = {st.steps[i]};
  s.streams = {st.streams[i]};
  s.seed = st.seed;
  s.mode = st.mode;
  s.obs_dim = st.obs_dim;
  s.act_dim = st.act_dim;
  s.action_bound = st.action_bound;
  return s;
}

template <typename T>
void set_member(SacState<T>& st, std::size_t i, const SacState<T>& sub) {
  set_member(st.policy, i, sub.policy);
  set_member(st.critic1, i, sub.critic1);
  set_member(st.critic2, i, sub.critic2);
  set_member(st.critic1_target, i, sub.critic1_target);
  set_member(st.critic2_target, i, sub.critic2_target);
  st.opt_policy.set_member(i, sub.opt_policy);
  st.opt_critic1.set_member(i, sub.opt_critic1);
  st.opt_critic2.set_member(i, sub.opt_critic2);
  set_member(st.log_alpha, i, sub.log_alpha);
  set_member(st.opt_alpha.m, i, sub.opt_alpha.m);
  set_member(st.opt_alpha.v, i, sub.opt_alpha.v);
  st.opt_alpha.t[i] = sub.opt_alpha.t[0];
  st.steps[i] = sub.steps[0];
  st.streams[i] = sub.streams[0];
}

// ---------------------------------------------------------------------------
// Action selection
// ---------------------------------------------------------------------------

/// TD3-style action selection: tanh policy output plus clipped Gaussian
/// exploration noise.  noise_std is per member, in action-bound units; steps
/// key the per-member noise streams.
template <typename T>
PopTensor<T> act(const PopMLPParams<T>& policy, const PopTensor<T>& obs,
                 const std::vector<double>& noise_std, std::uint64_t seed,
                 const std::vector<std::uint64_t>& streams,
                 const std::vector<std::uint64_t>& steps, bool deterministic) {
  PopTensor<T> a = pop_mlp_forward(policy, obs).first;
  if (deterministic) return a;
  const T bound = policy.output_scale;
  const std::size_t n = a.shape[0];
  const std::size_t per = a.member_stride();
  for (std::size_t m = 0; m < n; ++m) {
    if (noise_std[m] == 0.0) continue;
    const RngStream rs = RngStream::of(seed, streams[m], RngUse::kExploreNoise, steps[m]);
    const T std_dev = static_cast<T>(noise_std[m] * static_cast<double>(bound));
    T* am = a.member_ptr(m);
    for (std::size_t e = 0; e < per; ++e) {
      am[e] = std::clamp(am[e] + static_cast<T>(rs.normal_pair(2 * e)) * std_dev, -bound, bound);
    }
  }
  return a;
}

/// SAC action selection: a = bound * tanh(mu + sigma*eps), or the mode when
/// deterministic.
template <typename T>
PopTensor<T> sac_act(const PopMLPParams<T>& policy, const PopTensor<T>& obs, T bound,
                     std::uint64_t seed, const std::vector<std::uint64_t>& streams,
                     const std::vector<std::uint64_t>& steps, bool deterministic) {
  PopTensor<T> h = pop_mlp_forward(policy, obs).first;
  PopTensor<T> mu, ls;
  std::vector<char> clamped;
  detail::split_policy_head(h, mu, ls, clamped);
  if (!deterministic) {
    const std::size_t n = mu.shape[0];
    const std::size_t per = mu.member_stride();
    for (std::size_t m = 0; m < n; ++m) {
      const RngStream rs = RngStream::of(seed, streams[m], RngUse::kExploreNoise, steps[m]);
      T* mum = mu.member_ptr(m);
      const T* lsm = ls.member_ptr(m);
      for (std::size_t e = 0; e < per; ++e) {
        mum[e] += std::exp(lsm[e]) * static_cast<T>(rs.normal_pair(2 * e));
      }
    }
  }
  PopTensor<T> a = activation(mu, Act::kTanh);
  for (T& v : a.data) v *= bound;
  return a;
}

// ---------------------------------------------------------------------------
// K-step batching
// ---------------------------------------------------------------------------

template <typename T>
using BatchSampler = std::function<std::optional<TransitionBatch<T>>()>;

/// Runs k update steps back to back with no intermediate state export; the
/// result is identical to k single calls.
template <typename T, typename State, typename Hyper, typename StepFn>
void update_k_steps_with(State& st, const BatchSampler<T>& sampler, std::size_t k,
                         const Hyper& hyper, StepFn&& step) {
  if (k < 1) throw ConfigError("update_k_steps: k must be >= 1");
  for (std::size_t i = 0; i < k; ++i) {
    auto batch = sampler();
    if (!batch) {
      throw DataStarvationError("update_k_steps: sampler exhausted after " + std::to_string(i) +
                                " of " + std::to_string(k) + " steps");
    }
    step(st, *batch, hyper);
  }
}

template <typename T>
void update_k_steps(Td3State<T>& st, const BatchSampler<T>& sampler, std::size_t k,
                    const Td3Hyper& hyper, const PolicyGradHook<T>* hook = nullptr) {
  update_k_steps_with<T>(st, sampler, k, hyper,
                         [hook](Td3State<T>& s, const TransitionBatch<T>& b, const Td3Hyper& h) {
                           td3_update_step(s, b, h, hook);
                         });
}

template <typename T>
void update_k_steps(SacState<T>& st, const BatchSampler<T>& sampler, std::size_t k,
                    const SacHyper& hyper) {
  update_k_steps_with<T>(st, sampler, k, hyper,
                         [](SacState<T>& s, const TransitionBatch<T>& b, const SacHyper& h) {
                           sac_update_step(s, b, h);
                         });
}

// ---------------------------------------------------------------------------
// Full-state serialization (host export / checkpointing)
// ---------------------------------------------------------------------------

template <typename T>
void serialize_state(const Td3State<T>& st, std::ostream& os) {
  save_checkpoint(st.policy, os);
  save_checkpoint(st.policy_target, os);
  save_checkpoint(st.critic1, os);
  save_checkpoint(st.critic2, os);
  save_checkpoint(st.critic1_target, os);
  save_checkpoint(st.critic2_target, os);
  auto dump_adam = [&](const MlpAdam<T>& a) {
    for (const auto& s : a.w) {
      os.write(reinterpret_cast<const char*>(s.m.data.data()), s.m.data.size() * sizeof(T));
      os.write(reinterpret_cast<const char*>(s.v.data.data()), s.v.data.size() * sizeof(T));
      os.write(reinterpret_cast<const char*>(s.t.data()), s.t.size() * sizeof(std::int64_t));
    }
    for (const auto& s : a.b) {
      os.write(reinterpret_cast<const char*>(s.m.data.data()), s.m.data.size() * sizeof(T));
      os.write(reinterpret_cast<const char*>(s.v.data.data()), s.v.data.size() * sizeof(T));
      os.write(reinterpret_cast<const char*>(s.t.data()), s.t.size() * sizeof(std::int64_t));
    }
  };
  dump_adam(st.opt_policy);
  dump_adam(st.opt_critic1);
  dump_adam(st.opt_critic2);
  os.write(reinterpret_cast<const char*>(st.delay_acc.data()),
           st.delay_acc.size() * sizeof(double));
  os.write(reinterpret_cast<const char*>(st.steps.data()), st.steps.size() * sizeof(std::uint64_t));
}

}  // namespace pbrl
