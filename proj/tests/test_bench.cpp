#include <doctest.h>

#include "oracles.hpp"
#include "pbrl/bench.hpp"

using namespace pbrl;

namespace {
BenchConfig tiny(BenchMode mode, std::size_t n) {
  BenchConfig cfg;
  cfg.mode = mode;
  cfg.n = n;
  cfg.k = 3;
  cfg.reps = 3;
  cfg.batch = 16;
  cfg.obs_dim = 5;
  cfg.act_dim = 2;
  cfg.hidden = {8, 8};
  return cfg;
}
}  // namespace

TEST_CASE("bench_update: produces timed repetitions with warmup separated") {
  for (BenchMode mode :
       {BenchMode::kSequential, BenchMode::kVectorized, BenchMode::kParallelThreads}) {
    auto r = bench_update<float>(tiny(mode, 2));
    CHECK(r.times_ms.size() == 3);
    CHECK(r.median_ms > 0.0);
    CHECK(r.warmup_ms > 0.0);
    CHECK(r.mode == to_string(mode));
  }
  CHECK_THROWS_AS(bench_update<float>(BenchConfig{.reps = 2}), ConfigError);
}

TEST_CASE("bench modes: identical numerical work, 64-bit audit") {
  auto cfg = tiny(BenchMode::kVectorized, 3);
  CHECK(bench_cross_mode_audit<double>(cfg) <= 1e-10);
}

TEST_CASE("bench vectorized: kernel launch count independent of population size") {
  auto c1 = tiny(BenchMode::kVectorized, 1);
  auto c32 = tiny(BenchMode::kVectorized, 32);
  c1.k = c32.k = 2;
  const auto r1 = bench_update<float>(c1);
  const auto r32 = bench_update<float>(c32);
  CHECK(r1.kernel_launches == r32.kernel_launches);

  // the sequential strategy launches N times as many kernels
  auto s32 = tiny(BenchMode::kSequential, 32);
  s32.k = 2;
  const auto rs = bench_update<float>(s32);
  CHECK(rs.kernel_launches == 32 * r32.kernel_launches);
}

TEST_CASE("bench_update: memory budget overruns report a resource error") {
  auto cfg = tiny(BenchMode::kVectorized, 64);
  cfg.memory_budget_bytes = 1024;
  CHECK_THROWS_AS(bench_update<float>(cfg), ResourceError);
}

TEST_CASE("bench SAC path runs") {
  auto cfg = tiny(BenchMode::kVectorized, 2);
  cfg.algo = BenchAlgo::kSac;
  auto r = bench_update<float>(cfg);
  CHECK(r.median_ms > 0.0);
}

TEST_CASE("k-step batching: one call equals the chained loop bitwise") {
  BenchConfig cfg = tiny(BenchMode::kVectorized, 2);
  cfg.k = 10;
  auto t = time_k_step_batching<double>(cfg);
  CHECK(t.bitwise_equal);
  CHECK(t.batched_ms > 0.0);
  CHECK(t.loop_ms > 0.0);
}

TEST_CASE("cost_estimate: posted prices reproduced exactly") {
  const auto table = PriceTable::builtin();
  CHECK(cost_estimate(3600.0, "t4", table) == 0.34);
  CHECK(cost_estimate(3600.0, "a100", table) == 2.98);
  CHECK(cost_estimate(3600.0, "cpu-core", table) == 0.062);
  CHECK(cost_estimate(3600.0, "K80", table) == 0.45);  // case-insensitive
  CHECK(cost_estimate(0.0, "v100", table) == 0.0);
  CHECK_THROWS_AS(cost_estimate(10.0, "tpu", table), ConfigError);
  CHECK_THROWS_AS(cost_estimate(-1.0, "t4", table), ConfigError);
}

TEST_CASE("price table: loads overrides from a file") {
  const std::string path = "/tmp/pbrl_prices.csv";
  {
    std::ofstream f(path);
    f << "# hourly prices\n";
    f << "t4,0.50\n";
    f << "exotic 9.99\n";
  }
  auto table = PriceTable::load(path);
  CHECK(table.price_per_hour("t4") == 0.50);
  CHECK(table.price_per_hour("exotic") == 9.99);
  std::remove(path.c_str());
}

TEST_CASE("bench medians: monotone non-decreasing in population size") {
  for (BenchMode mode : {BenchMode::kSequential, BenchMode::kVectorized}) {
    double prev = 0;
    for (std::size_t n : {1, 4, 16, 32}) {
      auto cfg = tiny(mode, n);
      cfg.k = 2;
      cfg.reps = 5;
      const auto r = bench_update<float>(cfg);
      CHECK(r.median_ms >= prev);
      prev = r.median_ms;
    }
  }
}

TEST_CASE("bench mode names round trip") {
  for (BenchMode mode :
       {BenchMode::kSequential, BenchMode::kVectorized, BenchMode::kParallelThreads}) {
    CHECK(parse_bench_mode(to_string(mode)) == mode);
  }
  CHECK_THROWS_AS(parse_bench_mode("gpu"), ConfigError);
}
