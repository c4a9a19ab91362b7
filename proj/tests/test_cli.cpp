#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "pbrl/bench.hpp"

namespace {
int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = pbrl::cli_run(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }
}  // namespace

TEST_CASE("cli plan: prints the core count for the worked example") {
  std::string out;
  CHECK(run({"plan", "--n", "80", "--t-env-ms", "0.94", "--t-update-ms", "3.0"}, &out) == 0);
  CHECK(first_line(out) == "26");
}

TEST_CASE("cli plan: rejects missing required flags") {
  std::string err;
  CHECK(run({"plan", "--n", "80"}, nullptr, &err) != 0);
}

TEST_CASE("cli: unknown subcommand and bad flags exit nonzero") {
  std::string err;
  CHECK(run({"frobnicate"}, nullptr, &err) != 0);
  CHECK(run({"bench", "--mode", "gpu"}, nullptr, &err) != 0);
  CHECK(run({}, nullptr, &err) != 0);
}

TEST_CASE("cli bench: emits a result row and appends to a csv") {
  const std::string path = "/tmp/pbrl_cli_bench.csv";
  std::remove(path.c_str());
  std::string out;
  const int code = run({"bench", "--mode", "vectorized", "--n", "2", "--k", "2", "--reps", "3",
                        "--batch", "8", "--ds", "4", "--da", "2", "--hidden", "8,8", "--out", path},
                       &out);
  CHECK(code == 0);
  CHECK(out.rfind("mode,n,k,reps", 0) == 0);
  CHECK(out.find("vectorized,2,2,3") != std::string::npos);

  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == std::string(pbrl::BenchResult::kCsvHeader));
  std::getline(f, line);
  CHECK(line.rfind("vectorized,2,2,3", 0) == 0);
  std::remove(path.c_str());
}

TEST_CASE("cli emit-plot-data: reshapes bench rows and prices the cost table") {
  const std::string path = "/tmp/pbrl_cli_bench2.csv";
  {
    std::ofstream f(path);
    f << pbrl::BenchResult::kCsvHeader << "\n";
    f << "vectorized,32,50,5,12.5,0.8,40.1\n";
  }
  std::string out;
  CHECK(run({"emit-plot-data", "--kind", "bench", "--in", path}, &out) == 0);
  CHECK(out.find("mode,n,median_ms,iqr_ms,warmup_ms") != std::string::npos);
  CHECK(out.find("vectorized,32,12.5,0.8,40.1") != std::string::npos);
  std::remove(path.c_str());

  std::string cost;
  CHECK(run({"emit-plot-data", "--kind", "cost", "--runtime-s", "3600"}, &cost) == 0);
  CHECK(cost.find("hardware,runtime_s,dollars") != std::string::npos);
  CHECK(cost.find("t4,3600,0.34") != std::string::npos);
  CHECK(cost.find("a100,3600,2.98") != std::string::npos);
  CHECK(cost.find("cpu-core,3600,0.062") != std::string::npos);

  std::string err;
  CHECK(run({"emit-plot-data", "--kind", "cost"}, nullptr, &err) != 0);
  CHECK(err.find("runtime") != std::string::npos);
}

TEST_CASE("cli train: a tiny run completes and reports a summary") {
  std::string out;
  const int code =
      run({"train", "--algo", "td3", "--n", "1", "--k", "5", "--updates", "60", "--warmup", "64",
           "--batch", "8", "--hidden", "8,8", "--buffer-capacity", "2048", "--seed", "2"},
          &out);
  CHECK(code == 0);
  CHECK(out.find("update_steps=60") != std::string::npos);
}

TEST_CASE("cli train: accepts a config file with flag overrides") {
  const std::string path = "/tmp/pbrl_cli_cfg.ini";
  {
    std::ofstream f(path);
    f << "[train]\nn=1\nupdates=40\nk=5\nwarmup=64\nbatch=8\nhidden=8,8\nbuffer-capacity=1024\n";
  }
  std::string out;
  CHECK(run({"train", "--config", path, "--seed", "4"}, &out) == 0);
  CHECK(out.find("update_steps=40") != std::string::npos);
  std::remove(path.c_str());

  std::string err;
  CHECK(run({"train", "--config", "/tmp/definitely_missing.ini"}, nullptr, &err) != 0);
}

TEST_CASE("cli emit-plot-data: learning curve from a metrics log") {
  const std::string path = "/tmp/pbrl_cli_metrics.csv";
  {
    std::ofstream f(path);
    f << "wall_clock_s,env_steps,update_steps,member_id,episode_return,event\n";
    f << "0.5,100,50,0,-42,episode\n";
    f << "1.0,200,150,1,-17,episode\n";
    f << "1.5,300,250,0,-30,episode\n";
  }
  std::string out;
  CHECK(run({"emit-plot-data", "--kind", "learning", "--in", path}, &out) == 0);
  CHECK(out.find("wall_clock_s,env_steps,update_steps,best_return") != std::string::npos);
  CHECK(out.find("1,200,150,-17") != std::string::npos);
  CHECK(out.find("1.5,300,250,-17") != std::string::npos);  // best so far, not the raw return
  std::remove(path.c_str());
}
