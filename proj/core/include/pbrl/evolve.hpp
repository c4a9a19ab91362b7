#pragma once

#include <deque>
#include <numeric>
#include <optional>

#include "pbrl/algos.hpp"
#include "pbrl/net_pop.hpp"
#include "pbrl/rng.hpp"

namespace pbrl {

// ---------------------------------------------------------------------------
// Hyperparameter priors
// ---------------------------------------------------------------------------

/// One sampling range, either uniform or log-uniform.
struct HyperRange {
  bool log_scale = false;
  double lo = 0, hi = 1;

  double sample(RngSequence& rng) const {
    return log_scale ? rng.log_uniform(lo, hi) : rng.uniform(lo, hi);
  }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// TD3 tuning prior: log-uniform learning rates in [3e-5, 3e-3], uniform
/// policy delay in [0.2, 1], uniform noise in [0, 1], uniform discount in
/// [0.9, 1].  Untuned fields keep their defaults.
struct Td3Prior {
  HyperRange critic_lr{true, 3e-5, 3e-3};
  HyperRange policy_lr{true, 3e-5, 3e-3};
  HyperRange policy_delay_ratio{false, 0.2, 1.0};
  HyperRange explore_std{false, 0.0, 1.0};
  HyperRange target_std{false, 0.0, 1.0};
  HyperRange discount{false, 0.9, 1.0};

  Td3Hyper sample_member(RngSequence& rng) const {
    Td3Hyper h = Td3Hyper::defaults(1);
    h.critic_lr[0] = critic_lr.sample(rng);
    h.policy_lr[0] = policy_lr.sample(rng);
    h.policy_delay_ratio[0] = policy_delay_ratio.sample(rng);
    h.explore_std[0] = explore_std.sample(rng);
    h.target_std[0] = target_std.sample(rng);
    h.gamma[0] = discount.sample(rng);
    return h;
  }
};

/// SAC tuning prior: log-uniform learning rates in [3e-5, 3e-3], target
/// entropy scaled uniformly in [0.2, 2] of the default, uniform reward scale
/// in [0.1, 10], uniform discount in [0.9, 1].
struct SacPrior {
  HyperRange policy_lr{true, 3e-5, 3e-3};
  HyperRange critic_lr{true, 3e-5, 3e-3};
  HyperRange alpha_lr{true, 3e-5, 3e-3};
  HyperRange entropy_scale{false, 0.2, 2.0};
  HyperRange reward_scale{false, 0.1, 10.0};
  HyperRange discount{false, 0.9, 1.0};
  double default_target_entropy = -1.0;

  SacHyper sample_member(RngSequence& rng) const {
    SacHyper h = SacHyper::defaults(1, 1);
    h.policy_lr[0] = policy_lr.sample(rng);
    h.critic_lr[0] = critic_lr.sample(rng);
    h.alpha_lr[0] = alpha_lr.sample(rng);
    h.target_entropy[0] = entropy_scale.sample(rng) * default_target_entropy;
    h.reward_scale[0] = reward_scale.sample(rng);
    h.gamma[0] = discount.sample(rng);
    return h;
  }
};

// ---------------------------------------------------------------------------
// PBT: periodic truncation selection
// ---------------------------------------------------------------------------

/// Rolling per-member returns plus the evolution cadence.
struct PBTState {
  std::vector<std::deque<double>> returns;  // last ring_capacity episode returns
  std::size_t ring_capacity = 10;
  std::uint64_t steps_since_evolve = 0;
  std::uint64_t evolve_interval = 100000;
  double truncation_fraction = 0.3;

  explicit PBTState(std::size_t n = 0) : returns(n) {}

  std::size_t members() const { return returns.size(); }

  void record_return(std::size_t member, double ep_return) {
    auto& ring = returns.at(member);
    ring.push_back(ep_return);
    while (ring.size() > ring_capacity) ring.pop_front();
  }

  bool every_member_scored() const {
    for (const auto& r : returns) {
      if (r.empty()) return false;
    }
    return !returns.empty();
  }

  double mean_return(std::size_t member) const {
    const auto& ring = returns[member];
    return std::accumulate(ring.begin(), ring.end(), 0.0) / static_cast<double>(ring.size());
  }
};

/// Member indices sorted by mean recorded return, best first; ties break
/// toward the lower index.
inline std::vector<std::size_t> pbt_rank(const PBTState& st) {
  if (!st.every_member_scored()) {
    throw NotReadyError("pbt_rank: every member needs at least one recorded return");
  }
  std::vector<std::size_t> order(st.members());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return st.mean_return(a) > st.mean_return(b);
  });
  return order;
}

/// Which members get replaced and by whom.  replaced[i] copies from donors[i].
struct EvolvePlan {
  std::vector<std::size_t> replaced;
  std::vector<std::size_t> donors;
};

/// Truncation selection: the bottom ceil(f*N) members are overwritten by
/// copies of uniformly sampled members from the top ceil(f*N).  Populations
/// smaller than 4 are left alone (the strata would overlap).
inline std::optional<EvolvePlan> pbt_plan(const PBTState& st, RngSequence& rng) {
  const std::size_t n = st.members();
  if (n < 4) return std::nullopt;
  const auto order = pbt_rank(st);
  const auto cut = static_cast<std::size_t>(
      std::ceil(st.truncation_fraction * static_cast<double>(n)));
  EvolvePlan plan;
  for (std::size_t i = 0; i < cut; ++i) {
    plan.replaced.push_back(order[n - 1 - i]);
    plan.donors.push_back(order[rng.index(cut)]);
  }
  return plan;
}

/// Applies a plan to a bare parameter population: losers get bitwise copies
/// of their donors and fresh hyperparameters; their return history clears.
inline void pbt_apply_returns_reset(PBTState& st, const EvolvePlan& plan) {
  for (std::size_t m : plan.replaced) st.returns[m].clear();
  st.steps_since_evolve = 0;
}

template <typename T>
std::optional<EvolvePlan> pbt_evolve(PBTState& st, PopMLPParams<T>& params, Td3Hyper& hyper,
                                     const Td3Prior& prior, RngSequence& rng) {
  auto plan = pbt_plan(st, rng);
  if (!plan) return std::nullopt;
  for (std::size_t i = 0; i < plan->replaced.size(); ++i) {
    copy_member(params, plan->donors[i], plan->replaced[i]);
    hyper.set_member(plan->replaced[i], prior.sample_member(rng));
  }
  pbt_apply_returns_reset(st, *plan);
  return plan;
}

/// Full-agent variant: copies every network and target, resets the loser's
/// optimizer moments and delay accumulator, and re-draws its hyperparameters.
template <typename T>
std::optional<EvolvePlan> pbt_evolve_trainer(PBTState& st, Td3State<T>& trainer, Td3Hyper& hyper,
                                             const Td3Prior& prior, RngSequence& rng) {
  auto plan = pbt_plan(st, rng);
  if (!plan) return std::nullopt;
  for (std::size_t i = 0; i < plan->replaced.size(); ++i) {
    const std::size_t dst = plan->replaced[i], src = plan->donors[i];
    copy_member(trainer.policy, src, dst);
    copy_member(trainer.policy_target, src, dst);
    copy_member(trainer.critic1, src, dst);
    copy_member(trainer.critic2, src, dst);
    copy_member(trainer.critic1_target, src, dst);
    copy_member(trainer.critic2_target, src, dst);
    trainer.opt_policy.reset_member(dst);
    trainer.opt_critic1.reset_member(dst);
    trainer.opt_critic2.reset_member(dst);
    trainer.delay_acc[dst] = 0.0;
    hyper.set_member(dst, prior.sample_member(rng));
  }
  pbt_apply_returns_reset(st, *plan);
  return plan;
}

template <typename T>
std::optional<EvolvePlan> pbt_evolve_trainer(PBTState& st, SacState<T>& trainer, SacHyper& hyper,
                                             const SacPrior& prior, RngSequence& rng) {
  auto plan = pbt_plan(st, rng);
  if (!plan) return std::nullopt;
  for (std::size_t i = 0; i < plan->replaced.size(); ++i) {
    const std::size_t dst = plan->replaced[i], src = plan->donors[i];
    copy_member(trainer.policy, src, dst);
    copy_member(trainer.critic1, src, dst);
    copy_member(trainer.critic2, src, dst);
    copy_member(trainer.critic1_target, src, dst);
    copy_member(trainer.critic2_target, src, dst);
    trainer.log_alpha.data[dst] = trainer.log_alpha.data[src];
    trainer.opt_policy.reset_member(dst);
    trainer.opt_critic1.reset_member(dst);
    trainer.opt_critic2.reset_member(dst);
    trainer.opt_alpha.reset_member(dst);
    hyper.set_member(dst, prior.sample_member(rng));
  }
  pbt_apply_returns_reset(st, *plan);
  return plan;
}

// ---------------------------------------------------------------------------
// CEM: diagonal-Gaussian search over flat parameter vectors
// ---------------------------------------------------------------------------

/// mean/var describe the search distribution; var holds the elite deviation
/// variance and noise is the additive floor, so samples use var + noise.
struct CEMState {
  std::vector<double> mean;
  std::vector<double> var;
  double noise = 1e-2;
  double noise_init = 1e-2;
  double noise_final = 1e-3;
  double noise_decay = 0.999;
  double elite_fraction = 0.5;
};

inline CEMState cem_init(std::vector<double> mean, double init_var = 0.0) {
  CEMState st;
  st.var.assign(mean.size(), init_var);
  st.mean = std::move(mean);
  st.noise = st.noise_init;
  return st;
}

inline std::vector<std::vector<double>> cem_sample(const CEMState& st, std::size_t count,
                                                   RngSequence& rng) {
  if (count < 1) throw ConfigError("cem_sample: count must be >= 1");
  std::vector<std::vector<double>> out(count);
  for (auto& vec : out) {
    vec.resize(st.mean.size());
    for (std::size_t i = 0; i < vec.size(); ++i) {
      vec[i] = st.mean[i] + std::sqrt(st.var[i] + st.noise) * rng.normal();
    }
  }
  return out;
}

/// Refit to the top half: new mean is the elite average, new variance the
/// per-coordinate mean squared deviation from the new mean; the noise floor
/// decays multiplicatively toward noise_final.
inline void cem_update(CEMState& st, const std::vector<std::vector<double>>& candidates,
                       const std::vector<double>& scores) {
  if (candidates.size() < 2) throw ConfigError("cem_update: need at least 2 candidates");
  if (candidates.size() % 2 != 0) throw ConfigError("cem_update: candidate count must be even");
  if (scores.size() != candidates.size()) {
    throw ConfigError("cem_update: scores length != candidate count");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw ConfigError("cem_update: scores must be finite");
  }
  const std::size_t dim = st.mean.size();
  for (const auto& c : candidates) {
    if (c.size() != dim) throw ShapeError("cem_update: candidate length != distribution dim");
  }

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t elite_count =
      static_cast<std::size_t>(st.elite_fraction * static_cast<double>(candidates.size()));

  std::vector<double> mean(dim, 0.0);
  for (std::size_t e = 0; e < elite_count; ++e) {
    const auto& c = candidates[order[e]];
    for (std::size_t i = 0; i < dim; ++i) mean[i] += c[i];
  }
  for (double& v : mean) v /= static_cast<double>(elite_count);

  std::vector<double> var(dim, 0.0);
  for (std::size_t e = 0; e < elite_count; ++e) {
    const auto& c = candidates[order[e]];
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = c[i] - mean[i];
      var[i] += d * d;
    }
  }
  for (double& v : var) v /= static_cast<double>(elite_count);

  st.mean = std::move(mean);
  st.var = std::move(var);
  st.noise = std::max(st.noise_final, st.noise * st.noise_decay);
}

// ---------------------------------------------------------------------------
// DvD: log-determinant diversity over behavioral embeddings
// ---------------------------------------------------------------------------

/// Linear ramp from start to end over horizon steps, clamped afterwards.
struct LambdaSchedule {
  double start = 0.0;
  double end = 0.5;
  std::uint64_t horizon = 1;
};

inline double dvd_lambda(std::uint64_t step, const LambdaSchedule& s) {
  if (s.horizon == 0 || step >= s.horizon) return s.end;
  const double frac = static_cast<double>(step) / static_cast<double>(s.horizon);
  return s.start + (s.end - s.start) * frac;
}

/// Member n's embedding is the concatenation of its deterministic actions on
/// the M probe states: [N, M*da].
template <typename T>
std::pair<PopTensor<T>, ForwardCache<T>> dvd_embed_cached(const PopMLPParams<T>& policies,
                                                          const std::vector<T>& probe_states,
                                                          std::size_t m_states) {
  const std::size_t n = policies.members();
  const std::size_t ds = policies.in_dim();
  if (probe_states.size() != m_states * ds) {
    throw ShapeError("dvd_embed: probe matrix size != M * observation_dim");
  }
  PopTensor<T> x = PopTensor<T>::zeros({n, m_states, ds});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(probe_states.begin(), probe_states.end(), x.member_ptr(i));
  }
  auto [a, cache] = pop_mlp_forward(policies, x);  // [N, M, da]
  a.set_shape({n, m_states * policies.out_dim()});
  return {std::move(a), std::move(cache)};
}

template <typename T>
PopTensor<T> dvd_embed(const PopMLPParams<T>& policies, const std::vector<T>& probe_states,
                       std::size_t m_states) {
  return dvd_embed_cached(policies, probe_states, m_states).first;
}

struct DvdLossOut {
  double loss = 0;
  double logdet = 0;
  PopTensor<double> grad;  // [N, E], d loss / d embeddings
};

namespace detail {

/// In-place Cholesky of a symmetric positive-definite matrix (row-major n*n).
/// Returns false on a non-positive pivot.
inline bool cholesky(std::vector<double>& a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) sum -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (!(sum > 0.0)) return false;
        a[i * n + i] = std::sqrt(sum);
      } else {
        a[i * n + j] = sum / a[j * n + j];
      }
    }
    for (std::size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  }
  return true;
}

/// Solves (L L^T) X = I given the Cholesky factor, producing the inverse.
inline std::vector<double> cholesky_inverse(const std::vector<double>& l, std::size_t n) {
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double sum = (i == c) ? 1.0 : 0.0;
      for (std::size_t k = 0; k < i; ++k) sum -= l[i * n + k] * col[k];
      col[i] = sum / l[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double sum = col[ii];
      for (std::size_t k = ii + 1; k < n; ++k) sum -= l[k * n + ii] * col[k];
      col[ii] = sum / l[ii * n + ii];
    }
    for (std::size_t i = 0; i < n; ++i) inv[i * n + c] = col[i];
  }
  return inv;
}

/// Canonical row order: lexicographic by embedding values.  Computing in this
/// frame makes the loss exactly invariant under member permutation.
inline std::vector<std::size_t> canonical_order(const PopTensor<double>& e) {
  const std::size_t n = e.shape[0], dim = e.member_stride();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double* ra = e.member_ptr(a);
    const double* rb = e.member_ptr(b);
    for (std::size_t k = 0; k < dim; ++k) {
      if (ra[k] != rb[k]) return ra[k] < rb[k];
    }
    return false;
  });
  return order;
}

}  // namespace detail

/// Squared-exponential kernel K[i,j] = exp(-|ei-ej|^2 / (2 l^2)); the loss is
/// -lambda * logdet(K + jitter I) and the gradient follows the logdet
/// differential through the factorization.
inline DvdLossOut dvd_loss(const PopTensor<double>& embeddings, double length_scale,
                           double jitter, double lambda) {
  if (embeddings.shape.size() != 2 || embeddings.shape[0] < 2) {
    throw ConfigError("dvd_loss: need at least two embedding rows");
  }
  if (!(length_scale > 0)) throw ConfigError("dvd_loss: length scale must be positive");
  const std::size_t n = embeddings.shape[0], dim = embeddings.shape[1];

  const auto order = detail::canonical_order(embeddings);
  std::vector<const double*> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = embeddings.member_ptr(order[i]);

  const double inv2l2 = 1.0 / (2.0 * length_scale * length_scale);
  std::vector<double> kernel(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    kernel[i * n + i] = 1.0;
    for (std::size_t j = 0; j < i; ++j) {
      double d2 = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = rows[i][k] - rows[j][k];
        d2 += d * d;
      }
      const double kij = std::exp(-d2 * inv2l2);
      kernel[i * n + j] = kij;
      kernel[j * n + i] = kij;
    }
  }

  std::vector<double> m = kernel;
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] += jitter;
  if (!detail::cholesky(m, n)) {
    throw DegeneratePopulationError(
        "dvd_loss: kernel matrix is not positive definite even with jitter " +
        std::to_string(jitter));
  }
  double logdet = 0;
  for (std::size_t i = 0; i < n; ++i) logdet += 2.0 * std::log(m[i * n + i]);
  const std::vector<double> minv = detail::cholesky_inverse(m, n);

  DvdLossOut out;
  out.logdet = logdet;
  out.loss = -lambda * logdet;
  out.grad = PopTensor<double>::zeros(embeddings.shape);

  // d loss / d e_i = (2 lambda / l^2) sum_{j != i} Minv[i,j] K[i,j] (e_i - e_j)
  const double coef = 2.0 * lambda / (length_scale * length_scale);
  for (std::size_t i = 0; i < n; ++i) {
    double* gi = out.grad.member_ptr(order[i]);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double w = coef * minv[i * n + j] * kernel[i * n + j];
      for (std::size_t k = 0; k < dim; ++k) gi[k] += w * (rows[i][k] - rows[j][k]);
    }
  }
  return out;
}

/// Median pairwise embedding distance; the usual length-scale heuristic.
inline double median_pairwise_distance(const PopTensor<double>& embeddings) {
  const std::size_t n = embeddings.shape[0], dim = embeddings.member_stride();
  std::vector<double> dists;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = embeddings.member_ptr(i)[k] - embeddings.member_ptr(j)[k];
        d2 += d * d;
      }
      dists.push_back(std::sqrt(d2));
    }
  }
  if (dists.empty()) return 1.0;
  std::sort(dists.begin(), dists.end());
  const double med = dists[dists.size() / 2];
  return med > 0 ? med : 1.0;
}

/// Probe states plus kernel and schedule parameters for the diversity term.
struct DvDConfig {
  std::vector<double> probe_states;  // row-major M x ds
  std::size_t m_states = 0;
  double length_scale = 1.0;
  double jitter = 1e-6;
  LambdaSchedule schedule;

  void validate(std::size_t population) const {
    if (m_states < population) {
      throw ConfigError("DvDConfig: need at least as many probe states as members");
    }
    if (!(length_scale > 0)) throw ConfigError("DvDConfig: length scale must be positive");
    if (jitter < 0) throw ConfigError("DvDConfig: jitter must be >= 0");
  }
};

/// Builds the additive policy-gradient hook for a diversity-regularized
/// shared-critic update at a given schedule position.
template <typename T>
PolicyGradHook<T> dvd_policy_hook(const DvDConfig& cfg, std::uint64_t step) {
  const double lambda = dvd_lambda(step, cfg.schedule);
  return [cfg, lambda](const PopMLPParams<T>& policies, MlpGrads<T>& grads) {
    if (lambda == 0.0) return;
    std::vector<T> probe(cfg.probe_states.begin(), cfg.probe_states.end());
    auto [emb, cache] = dvd_embed_cached(policies, probe, cfg.m_states);
    PopTensor<double> emb_d;
    emb_d.shape = emb.shape;
    emb_d.data.assign(emb.data.begin(), emb.data.end());
    const DvdLossOut dl = dvd_loss(emb_d, cfg.length_scale, cfg.jitter, lambda);
    PopTensor<T> grad_emb;
    grad_emb.shape = {policies.members(), cfg.m_states, policies.out_dim()};
    grad_emb.data.assign(dl.grad.data.begin(), dl.grad.data.end());
    auto [dgrads, gx] = pop_mlp_backward(policies, cache, grad_emb);
    (void)gx;
    add_scaled(grads, dgrads, T(1));
  };
}

}  // namespace pbrl
