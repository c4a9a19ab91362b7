#include "pbrl/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <thread>

namespace pbrl {

std::string to_string(BenchMode mode) {
  switch (mode) {
    case BenchMode::kSequential: return "sequential";
    case BenchMode::kVectorized: return "vectorized";
    case BenchMode::kParallelThreads: return "parallel_threads";
  }
  return "?";
}

BenchMode parse_bench_mode(const std::string& name) {
  if (name == "sequential") return BenchMode::kSequential;
  if (name == "vectorized") return BenchMode::kVectorized;
  if (name == "parallel_threads") return BenchMode::kParallelThreads;
  throw ConfigError("unknown bench mode '" + name +
                    "' (expected sequential, vectorized, or parallel_threads)");
}

namespace detail {

void summarize_bench(BenchResult& r) {
  std::vector<double> sorted = r.times_ms;
  std::sort(sorted.begin(), sorted.end());
  r.median_ms = sorted[sorted.size() / 2];
  r.iqr_ms = sorted[(3 * sorted.size()) / 4] - sorted[sorted.size() / 4];
}

std::size_t bench_estimated_bytes(const BenchConfig& cfg, std::size_t scalar_bytes) {
  const std::size_t dims_in = cfg.obs_dim + cfg.act_dim;
  std::size_t per_member_params = 0;
  std::vector<std::size_t> pol{cfg.obs_dim};
  pol.insert(pol.end(), cfg.hidden.begin(), cfg.hidden.end());
  pol.push_back(cfg.act_dim * (cfg.algo == BenchAlgo::kSac ? 2 : 1));
  std::vector<std::size_t> q{dims_in};
  q.insert(q.end(), cfg.hidden.begin(), cfg.hidden.end());
  q.push_back(1);
  per_member_params += member_param_count(pol) + 2 * member_param_count(q);
  // online + target + two Adam moments per tensor
  const std::size_t state_bytes = cfg.n * per_member_params * 4 * scalar_bytes;
  const std::size_t batch_bytes =
      cfg.k * cfg.n * cfg.batch * (2 * cfg.obs_dim + cfg.act_dim + 2) * scalar_bytes;
  // transient activations: a generous population-sized working set
  std::size_t widest = dims_in;
  for (std::size_t h : cfg.hidden) widest = std::max(widest, h);
  const std::size_t activation_bytes = 16 * cfg.n * cfg.batch * widest * scalar_bytes;
  return state_bytes + batch_bytes + activation_bytes;
}

void run_member_threads(std::size_t n, const std::function<void(std::size_t)>& member_fn) {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t lanes = std::min(n, hw);  // extra members queue behind the cap
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  threads.reserve(lanes);
  for (std::size_t t = 0; t < lanes; ++t) {
    threads.emplace_back([&] {
      for (;;) {
        const std::size_t m = next.fetch_add(1);
        if (m >= n) return;
        member_fn(m);
      }
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace detail

PriceTable PriceTable::builtin() {
  PriceTable t;
  t.entries_ = {
      {"k80", 0.45}, {"t4", 0.34}, {"v100", 2.61}, {"a100", 2.98}, {"cpu-core", 0.062},
  };
  return t;
}

namespace {
std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}
}  // namespace

PriceTable PriceTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("PriceTable::load: cannot open " + path);
  PriceTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    const auto sep = comma == std::string::npos ? line.find(' ') : comma;
    if (sep == std::string::npos) throw ConfigError("PriceTable::load: bad line '" + line + "'");
    const std::string name = lower(line.substr(0, sep));
    const double price = std::stod(line.substr(sep + 1));
    if (!(price > 0)) throw ConfigError("PriceTable::load: prices must be positive");
    t.set(name, price);
  }
  return t;
}

void PriceTable::set(const std::string& name, double price) {
  for (auto& e : entries_) {
    if (e.first == name) {
      e.second = price;
      return;
    }
  }
  entries_.emplace_back(name, price);
}

double PriceTable::price_per_hour(const std::string& hardware) const {
  const std::string key = lower(hardware);
  for (const auto& e : entries_) {
    if (e.first == key) return e.second;
  }
  std::string known;
  for (const auto& e : entries_) known += (known.empty() ? "" : ", ") + e.first;
  throw ConfigError("cost_estimate: unknown hardware '" + hardware + "' (known: " + known + ")");
}

double cost_estimate(double runtime_s, const std::string& hardware, const PriceTable& table) {
  if (runtime_s < 0) throw ConfigError("cost_estimate: runtime must be >= 0");
  return runtime_s / 3600.0 * table.price_per_hour(hardware);
}

}  // namespace pbrl
