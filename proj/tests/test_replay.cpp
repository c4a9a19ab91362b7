#include <doctest.h>

#include <sstream>

#include "oracles.hpp"
#include "pbrl/replay.hpp"

using namespace pbrl;

namespace {
Transition<float> tagged(std::uint32_t member, float reward, std::uint64_t seq = 0) {
  Transition<float> t;
  t.s = {reward, 0.0f};
  t.a = {0.5f};
  t.s2 = {reward, 1.0f};
  t.r = reward;
  t.done = 0;
  t.member = member;
  t.seq = seq;
  return t;
}
}  // namespace

TEST_CASE("replay push: growth to capacity then strict FIFO eviction") {
  ReplayBuffer<float> buf(2, 2, 1);
  CHECK(buf.size() == 0);
  buf.push(tagged(0, 1.0f));
  CHECK(buf.size() == 1);
  buf.push(tagged(0, 2.0f));
  buf.push(tagged(0, 3.0f));
  CHECK(buf.size() == 2);
  CHECK(buf.insert_count() == 3);
  CHECK(buf.peek(0).r == 2.0f);
  CHECK(buf.peek(1).r == 3.0f);

  ReplayBuffer<float> buf3(3, 2, 1);
  for (int i = 0; i < 5; ++i) buf3.push(tagged(0, static_cast<float>(i)));
  CHECK(buf3.size() == 3);  // min(insert_count, capacity)
}

TEST_CASE("replay FIFO property: retained contents are the most recent pushes in order") {
  ReplayBuffer<float> buf(10, 2, 1);
  for (int i = 0; i < 25; ++i) buf.push(tagged(0, static_cast<float>(i), i));
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(buf.peek(i).r == static_cast<float>(15 + i));
  }
  CHECK_THROWS_AS(buf.peek(10), UsageError);
}

TEST_CASE("replay push: dimension mismatch is a usage error") {
  ReplayBuffer<float> buf(4, 3, 2);
  CHECK_THROWS_AS(buf.push(tagged(0, 1.0f)), UsageError);
}

TEST_CASE("sample_batch: single stored transition repeats; not-ready signals") {
  ReplayBuffer<float> buf(8, 2, 1);
  std::vector<ReplayBuffer<float>*> bufs{&buf};
  std::vector<std::uint64_t> streams{0};

  CHECK(!sample_batch<float>(bufs, 4, BufferMode::kShared, 1, 1, streams, 0).has_value());

  buf.push(tagged(3, 7.0f));
  auto batch = sample_batch<float>(bufs, 4, BufferMode::kShared, 1, 1, streams, 0);
  REQUIRE(batch.has_value());
  for (std::size_t i = 0; i < 4; ++i) CHECK(batch->r.data[i] == 7.0f);

  // min_size gating: below the warmup threshold the batch is not ready
  CHECK(!sample_batch<float>(bufs, 4, BufferMode::kShared, 1, 1, streams, 0, 2).has_value());
}

TEST_CASE("sample_batch per-agent mode: slices never cross member boundaries") {
  const std::size_t n = 3;
  std::vector<std::unique_ptr<ReplayBuffer<float>>> owned;
  std::vector<ReplayBuffer<float>*> bufs;
  for (std::size_t m = 0; m < n; ++m) {
    owned.push_back(std::make_unique<ReplayBuffer<float>>(32, 2, 1));
    for (int i = 0; i < 10; ++i) owned[m]->push(tagged(m, static_cast<float>(m)));
    bufs.push_back(owned[m].get());
  }
  std::vector<std::uint64_t> streams{0, 1, 2};
  for (std::uint64_t draw = 0; draw < 50; ++draw) {
    auto batch = sample_batch<float>(bufs, 8, BufferMode::kPerAgent, n, 9, streams, draw);
    REQUIRE(batch.has_value());
    for (std::size_t m = 0; m < n; ++m) {
      for (std::size_t b = 0; b < 8; ++b) {
        CHECK(batch->r.member_ptr(m)[b] == static_cast<float>(m));
      }
    }
  }
  CHECK_THROWS_AS(sample_batch<float>(bufs, 4, BufferMode::kPerAgent, 2, 9, streams, 0),
                  ConfigError);
}

TEST_CASE("sample_batch: uniform frequencies within four sigma on a ten-element buffer") {
  ReplayBuffer<float> buf(10, 2, 1);
  for (int i = 0; i < 10; ++i) buf.push(tagged(0, static_cast<float>(i)));
  std::vector<ReplayBuffer<float>*> bufs{&buf};
  std::vector<std::uint64_t> streams{0};

  std::vector<std::size_t> counts(10, 0);
  const std::size_t batches = 1000, rows = 100;  // 1e5 draws
  for (std::size_t d = 0; d < batches; ++d) {
    auto batch = sample_batch<float>(bufs, rows, BufferMode::kShared, 1, 31, streams, d);
    for (std::size_t b = 0; b < rows; ++b) {
      counts[static_cast<std::size_t>(batch->r.data[b])] += 1;
    }
  }
  const double total = batches * rows;
  const double expect = total / 10.0;
  const double sigma = std::sqrt(total * 0.1 * 0.9);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(std::abs(static_cast<double>(counts[i]) - expect) <= 4.0 * sigma);
  }
}

TEST_CASE("ratio guard: worked inequality examples") {
  SUBCASE("balanced counters proceed") {
    RatioController ctrl(1.0, 0.05, 0);
    ctrl.on_env_steps(1000);
    ctrl.on_update_steps(1000);
    CHECK(ctrl.check(RatioSide::kSample) == RatioDecision::kProceed);
    CHECK(ctrl.check(RatioSide::kInsert) == RatioDecision::kProceed);
  }
  SUBCASE("no data blocks sampling") {
    RatioController ctrl(1.0, 0.05, 0);
    CHECK(ctrl.check(RatioSide::kSample) == RatioDecision::kBlock);
  }
  SUBCASE("update side far ahead blocks sampling") {
    RatioController ctrl(1.0, 0.05, 0);
    ctrl.on_env_steps(1000);
    ctrl.on_update_steps(2000);
    CHECK(ctrl.check(RatioSide::kSample) == RatioDecision::kBlock);
  }
  SUBCASE("env side far ahead blocks inserts") {
    RatioController ctrl(1.0, 0.05, 100);
    ctrl.on_env_steps(2000);
    ctrl.on_update_steps(1000);
    CHECK(ctrl.check(RatioSide::kInsert) == RatioDecision::kBlock);
  }
  SUBCASE("warmup allowance admits initial inserts") {
    RatioController ctrl(1.0, 0.05, 500);
    CHECK(ctrl.check(RatioSide::kInsert) == RatioDecision::kProceed);
    ctrl.on_env_steps(499);
    CHECK(ctrl.check(RatioSide::kInsert) == RatioDecision::kProceed);
    ctrl.on_env_steps(1);
    CHECK(ctrl.check(RatioSide::kInsert) == RatioDecision::kBlock);
    CHECK(ctrl.check(RatioSide::kSample) == RatioDecision::kProceed);
  }
}

TEST_CASE("ratio guard: bounded waiting returns the block signal on expiry") {
  RatioController ctrl(1.0, 0.05, 10);
  CHECK(!ctrl.await(RatioSide::kSample, std::chrono::milliseconds(30)));
  ctrl.on_env_steps(10);
  CHECK(ctrl.await(RatioSide::kSample, std::chrono::milliseconds(30)));
  ctrl.close();
  CHECK(ctrl.await(RatioSide::kInsert, std::chrono::milliseconds(30)));
}

TEST_CASE("ratio guard: configuration validation") {
  CHECK_THROWS_AS(RatioController(0.0, 0.05, 0), ConfigError);
  CHECK_THROWS_AS(RatioController(1.0, -0.1, 0), ConfigError);
}

TEST_CASE("replay snapshot: save and load round trip") {
  ReplayBuffer<float> buf(6, 2, 1);
  for (int i = 0; i < 9; ++i) buf.push(tagged(i % 3, static_cast<float>(i), i));
  std::stringstream blob;
  buf.save_snapshot(blob);
  auto loaded_ptr = ReplayBuffer<float>::load_snapshot(blob);
  auto& loaded = *loaded_ptr;
  CHECK(loaded.size() == buf.size());
  CHECK(loaded.insert_count() == buf.insert_count());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    CHECK(loaded.peek(i).r == buf.peek(i).r);
    CHECK(loaded.peek(i).member == buf.peek(i).member);
  }
}
