#include <doctest.h>

#include <algorithm>

#include "oracles.hpp"
#include "pbrl/bench.hpp"
#include "pbrl/evolve.hpp"

using namespace pbrl;

namespace {
PBTState scored_state(const std::vector<double>& returns) {
  PBTState st(returns.size());
  for (std::size_t m = 0; m < returns.size(); ++m) st.record_return(m, returns[m]);
  return st;
}
}  // namespace

TEST_CASE("pbt_rank: descending means, index tie-break, readiness") {
  CHECK(pbt_rank(scored_state({5, 1, 9})) == std::vector<std::size_t>{2, 0, 1});
  CHECK(pbt_rank(scored_state({3, 3, 3})) == std::vector<std::size_t>{0, 1, 2});
  CHECK(pbt_rank(scored_state({7})) == std::vector<std::size_t>{0});

  PBTState empty(3);
  empty.record_return(0, 1.0);
  CHECK_THROWS_AS(pbt_rank(empty), NotReadyError);
}

TEST_CASE("pbt_rank: permutation equivariance") {
  const std::vector<double> returns{4.0, -1.0, 7.5, 2.0, 0.5};
  const auto base = pbt_rank(scored_state(returns));
  // permute members; the rank list permutes identically
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};  // member i -> position perm[i]
  std::vector<double> shuffled(returns.size());
  for (std::size_t i = 0; i < returns.size(); ++i) shuffled[perm[i]] = returns[i];
  const auto ranked = pbt_rank(scored_state(shuffled));
  for (std::size_t pos = 0; pos < base.size(); ++pos) {
    CHECK(ranked[pos] == perm[base[pos]]);
  }
}

TEST_CASE("pbt: rolling window keeps the last ten returns") {
  PBTState st(1);
  for (int i = 0; i < 25; ++i) st.record_return(0, i);
  CHECK(st.returns[0].size() == 10);
  CHECK(st.returns[0].front() == 15.0);
  CHECK(st.mean_return(0) == doctest::Approx((15 + 24) / 2.0));
}

TEST_CASE("pbt_evolve: truncation arithmetic on a seeded ten-member population") {
  auto params = init_pop_mlp<double>(10, {3, 4, 2}, 60);
  auto hyper = Td3Hyper::defaults(10);
  Td3Prior prior;
  PBTState st(10);
  for (std::size_t m = 0; m < 10; ++m) st.record_return(m, static_cast<double>(m));

  std::vector<std::vector<double>> before;
  for (std::size_t m = 0; m < 10; ++m) before.push_back(flatten_member(params, m));

  RngSequence rng(1, 2, RngUse::kDonorChoice);
  auto plan = pbt_evolve(st, params, hyper, prior, rng);
  REQUIRE(plan.has_value());

  // ceil(0.3 * 10) = 3 replacements: exactly the members with returns {0,1,2}
  auto replaced = plan->replaced;
  std::sort(replaced.begin(), replaced.end());
  CHECK(replaced == std::vector<std::size_t>{0, 1, 2});
  for (std::size_t d : plan->donors) CHECK(d >= 7);

  for (std::size_t i = 0; i < plan->replaced.size(); ++i) {
    CHECK(flatten_member(params, plan->replaced[i]) == before[plan->donors[i]]);
    CHECK(st.returns[plan->replaced[i]].empty());
    CHECK(hyper.critic_lr[plan->replaced[i]] >= 3e-5);
    CHECK(hyper.critic_lr[plan->replaced[i]] <= 3e-3);
  }
  // top and middle strata bitwise untouched, histories intact
  for (std::size_t m = 3; m < 10; ++m) {
    CHECK(flatten_member(params, m) == before[m]);
    CHECK(!st.returns[m].empty());
  }
}

TEST_CASE("pbt_evolve: populations below four are skipped") {
  auto params = init_pop_mlp<double>(3, {3, 4, 1}, 61);
  auto hyper = Td3Hyper::defaults(3);
  PBTState st(3);
  for (std::size_t m = 0; m < 3; ++m) st.record_return(m, static_cast<double>(m));
  RngSequence rng(1, 2, RngUse::kDonorChoice);
  Td3Prior prior;
  CHECK(!pbt_evolve(st, params, hyper, prior, rng).has_value());
}

TEST_CASE("pbt_evolve_trainer: optimizer moments and delay accumulators reset") {
  auto trainer = make_td3_state<double>(4, 3, 1, {4}, 1.0, 62);
  auto hyper = Td3Hyper::defaults(4);
  auto batch = make_synthetic_batches<double>(1, 4, 4, 3, 1, 63)[0];
  td3_update_step(trainer, batch, hyper);  // moments become nonzero
  PBTState st(4);
  st.record_return(0, 0);
  st.record_return(1, 3);
  st.record_return(2, 2);
  st.record_return(3, 1);
  RngSequence rng(9, 0, RngUse::kDonorChoice);
  Td3Prior prior;
  auto plan = pbt_evolve_trainer(st, trainer, hyper, prior, rng);
  REQUIRE(plan.has_value());
  // ceil(0.3 * 4) = 2: the two worst (returns 0 and 1) are members 0 and 3
  auto replaced = plan->replaced;
  std::sort(replaced.begin(), replaced.end());
  CHECK(replaced == std::vector<std::size_t>{0, 3});
  for (std::size_t d : plan->donors) CHECK((d == 1 || d == 2));
  CHECK(trainer.opt_policy.w[0].t[0] == 0);
  CHECK(trainer.delay_acc[0] == 0.0);
  CHECK(flatten_member(trainer.policy, plan->replaced[0]) ==
        flatten_member(trainer.policy, plan->donors[0]));
}

TEST_CASE("sample_hyper: every field lands inside its declared bounds") {
  Td3Prior td3_prior;
  SacPrior sac_prior;
  sac_prior.default_target_entropy = -2.0;
  RngSequence rng(77, 0, RngUse::kHyperDraw);
  for (int i = 0; i < 2000; ++i) {
    auto h = td3_prior.sample_member(rng);
    CHECK(h.critic_lr[0] >= 3e-5);
    CHECK(h.critic_lr[0] <= 3e-3);
    CHECK(h.policy_lr[0] >= 3e-5);
    CHECK(h.policy_lr[0] <= 3e-3);
    CHECK(h.policy_delay_ratio[0] >= 0.2);
    CHECK(h.policy_delay_ratio[0] <= 1.0);
    CHECK(h.explore_std[0] >= 0.0);
    CHECK(h.explore_std[0] <= 1.0);
    CHECK(h.gamma[0] >= 0.9);
    CHECK(h.gamma[0] <= 1.0);

    auto s = sac_prior.sample_member(rng);
    CHECK(s.reward_scale[0] >= 0.1);
    CHECK(s.reward_scale[0] <= 10.0);
    CHECK(s.target_entropy[0] <= -0.2 * 2.0);
    CHECK(s.target_entropy[0] >= -2.0 * 2.0);
  }
}

TEST_CASE("cem_sample: degenerate distribution, determinism, monte-carlo mean") {
  CEMState st = cem_init({1.0, -2.0});
  st.var = {0.0, 0.0};
  st.noise = 0.0;
  RngSequence rng(5, 0, RngUse::kCemDraw);
  for (const auto& v : cem_sample(st, 4, rng)) {
    CHECK(v == std::vector<double>{1.0, -2.0});
  }

  st.noise = 0.04;  // sigma = 0.2
  RngSequence r1(6, 0, RngUse::kCemDraw);
  RngSequence r2(6, 0, RngUse::kCemDraw);
  CHECK(cem_sample(st, 3, r1) == cem_sample(st, 3, r2));

  const std::size_t draws = 100000;
  RngSequence r3(7, 0, RngUse::kCemDraw);
  auto samples = cem_sample(st, draws, r3);
  double mean0 = 0;
  for (const auto& v : samples) mean0 += v[0];
  mean0 /= static_cast<double>(draws);
  const double sigma = 0.2;
  CHECK(std::abs(mean0 - 1.0) <= 3.0 * sigma / std::sqrt(static_cast<double>(draws)));
}

TEST_CASE("cem_update: hand-computed elites, zero-spread, noise schedule") {
  CEMState st = cem_init({0.0, 0.0});
  // four candidates; the top half by score is {[1,3],[3,5]}
  std::vector<std::vector<double>> cands{{1, 3}, {3, 5}, {100, 100}, {200, 200}};
  std::vector<double> scores{10, 9, 1, 0};
  cem_update(st, cands, scores);
  CHECK(st.mean == std::vector<double>{2.0, 4.0});
  CHECK(st.var == std::vector<double>{1.0, 1.0});
  CHECK(st.noise == doctest::Approx(1e-2 * 0.999).epsilon(1e-12));

  // identical elites collapse the deviation variance to exactly zero
  CEMState st2 = cem_init({0.0});
  cem_update(st2, {{2.0}, {2.0}, {9.0}, {9.0}}, {5, 5, 0, 0});
  CHECK(st2.var == std::vector<double>{0.0});

  // schedule: noise after k updates is max(noise_final, 1e-2 * 0.999^k)
  CEMState st3 = cem_init({0.0});
  for (int k = 1; k <= 50; ++k) {
    cem_update(st3, {{0.0}, {1.0}}, {1, 0});
    CHECK(st3.noise == doctest::Approx(std::max(1e-3, 1e-2 * std::pow(0.999, k))).epsilon(1e-9));
  }

  CHECK_THROWS_AS(cem_update(st3, {{0.0}}, {1}), ConfigError);
  CHECK_THROWS_AS(cem_update(st3, {{0.0}, {1.0}, {2.0}}, {1, 2, 3}), ConfigError);
}

TEST_CASE("cem_update: symmetric elites land the mean exactly at the center") {
  CEMState st = cem_init({0.0, 0.0});
  std::vector<std::vector<double>> cands{{2 - 0.5, 7 + 1.25}, {2 + 0.5, 7 - 1.25},
                                         {50, 50},           {60, 60}};
  cem_update(st, cands, {3, 3, 0, 0});
  CHECK(st.mean[0] == 2.0);
  CHECK(st.mean[1] == 7.0);
}

TEST_CASE("dvd_lambda: endpoints, clamping, midpoint, monotonicity") {
  LambdaSchedule s{0.1, 0.7, 100};
  CHECK(dvd_lambda(0, s) == 0.1);
  CHECK(dvd_lambda(100, s) == 0.7);
  CHECK(dvd_lambda(100000, s) == 0.7);
  CHECK(dvd_lambda(50, s) == doctest::Approx(0.4).epsilon(1e-12));
  double prev = dvd_lambda(0, s);
  for (std::uint64_t t = 1; t <= 120; ++t) {
    const double cur = dvd_lambda(t, s);
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("dvd_embed: member isolation and per-member loop equivalence") {
  const std::size_t n = 3, ds = 4, da = 2, m_states = 5;
  auto policies = init_pop_mlp<double>(n, {ds, 6, da}, 70, Act::kTanh, 1.0);
  auto probe = oracle::random_tensor<double>({1, m_states, ds}, 71, -1, 1);
  std::vector<double> probe_flat(probe.data.begin(), probe.data.end());

  auto emb = dvd_embed(policies, probe_flat, m_states);
  CHECK(emb.shape == std::vector<std::size_t>{n, m_states * da});

  for (std::size_t m = 0; m < n; ++m) {
    auto pm = slice_member(policies, m);
    PopTensor<double> x({1, m_states, ds}, probe.data);
    auto ym = pop_mlp_forward(pm, x).first;
    for (std::size_t i = 0; i < m_states * da; ++i) {
      CHECK(emb.member_ptr(m)[i] == ym.data[i]);
    }
  }

  auto policies2 = policies;
  copy_member(policies2, 0, 1);  // identical members embed identically
  auto emb2 = dvd_embed(policies2, probe_flat, m_states);
  for (std::size_t i = 0; i < m_states * da; ++i) {
    CHECK(emb2.member_ptr(0)[i] == emb2.member_ptr(1)[i]);
  }
  CHECK(max_abs_diff(slice_member(emb2, 2), slice_member(emb, 2)) == 0.0);
}

TEST_CASE("dvd_loss: 2x2 oracle with kernel value one half") {
  // distance chosen so exp(-d^2 / (2 l^2)) = 0.5 -> det = 1 - 0.25 = 0.75
  const double ell = 1.0;
  const double d = ell * std::sqrt(2.0 * std::log(2.0));
  PopTensor<double> emb({2, 1}, {0.0, d});
  const double lambda = 1.7;
  auto out = dvd_loss(emb, ell, 0.0, lambda);
  CHECK(std::exp(out.logdet) == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(out.loss == doctest::Approx(-lambda * std::log(0.75)).epsilon(1e-9));
}

TEST_CASE("dvd_loss: identical embeddings need jitter and cap the determinant") {
  PopTensor<double> emb({3, 2}, {1, 2, 1, 2, 1, 2});
  CHECK_THROWS_AS(dvd_loss(emb, 1.0, 0.0, 1.0), DegeneratePopulationError);

  const double jitter = 1e-6;
  auto out = dvd_loss(emb, 1.0, jitter, 1.0);
  // all-ones kernel: det(K + jI) = (N + j) * j^(N-1)
  const double bound = (3.0 + jitter) * jitter * jitter;
  CHECK(std::exp(out.logdet) <= bound * (1 + 1e-9));
  CHECK(out.loss > 10.0);  // near-singular kernel => large loss
}

TEST_CASE("dvd_loss: permutation invariance is exact") {
  const std::size_t n = 5, dim = 3;
  auto emb = oracle::random_tensor<double>({n, dim}, 72, -2, 2);
  auto base = dvd_loss(emb, 0.9, 1e-8, 1.3);

  const std::vector<std::size_t> perm{4, 2, 0, 1, 3};
  PopTensor<double> shuffled = PopTensor<double>::zeros({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(emb.member_ptr(i), emb.member_ptr(i) + dim, shuffled.member_ptr(perm[i]));
  }
  auto permuted = dvd_loss(shuffled, 0.9, 1e-8, 1.3);
  CHECK(permuted.loss == base.loss);
  CHECK(permuted.logdet == base.logdet);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k2 = 0; k2 < dim; ++k2) {
      CHECK(permuted.grad.member_ptr(perm[i])[k2] == base.grad.member_ptr(i)[k2]);
    }
  }
}

TEST_CASE("dvd_loss: gradient matches finite differences") {
  auto emb = oracle::random_tensor<double>({4, 3}, 73, -1.5, 1.5);
  const double ell = 1.1, jitter = 1e-8, lambda = 0.8;
  auto out = dvd_loss(emb, ell, jitter, lambda);
  auto loss = [&] { return dvd_loss(emb, ell, jitter, lambda).loss; };
  CHECK(oracle::fd_check(emb, out.grad, loss) <= 1e-5);
}

TEST_CASE("dvd policy hook: adds gradient only when lambda is positive") {
  const std::size_t n = 3, ds = 3, da = 1;
  auto policies = init_pop_mlp<double>(n, {ds, 4, da}, 74, Act::kTanh, 1.0);
  DvDConfig cfg;
  cfg.m_states = 4;
  auto probe = oracle::random_tensor<double>({1, 4, ds}, 75, -1, 1);
  cfg.probe_states.assign(probe.data.begin(), probe.data.end());
  cfg.length_scale = 1.0;
  cfg.jitter = 1e-6;
  cfg.schedule = {0.0, 0.5, 10};

  auto grads = zero_grads_like(policies);
  auto hook0 = dvd_policy_hook<double>(cfg, 0);  // lambda = 0 at step 0
  hook0(policies, grads);
  for (const auto& l : grads) {
    CHECK(max_abs_diff(l.w, PopTensor<double>::zeros(l.w.shape)) == 0.0);
  }
  auto hook5 = dvd_policy_hook<double>(cfg, 5);
  hook5(policies, grads);
  double total = 0;
  for (const auto& l : grads) {
    for (double v : l.w.data) total += std::abs(v);
  }
  CHECK(total > 0.0);
}

TEST_CASE("median_pairwise_distance: hand values and degenerate fallback") {
  PopTensor<double> emb({3, 1}, {0.0, 1.0, 3.0});
  // pairwise distances {1, 3, 2} -> sorted {1,2,3} -> median 2
  CHECK(median_pairwise_distance(emb) == 2.0);
  PopTensor<double> same({2, 1}, {4.0, 4.0});
  CHECK(median_pairwise_distance(same) == 1.0);
}
