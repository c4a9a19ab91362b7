#include "cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "pbrl/bench.hpp"
#include "pbrl/metrics.hpp"
#include "pbrl/pipeline.hpp"

namespace pbrl {

namespace {

struct TrainCliOpts {
  RunConfig cfg;
  std::string algo = "td3";
  std::string mode = "independent";
  std::string env = "pointmass";
  std::string buffer_mode;
  std::vector<std::size_t> hidden = {32, 32};
  unsigned precision = 32;
  std::uint64_t timeout_ms = 30000;
  double threshold = 0;
  bool track = false;
  bool stop_on_success = false;
};

void add_train_options(CLI::App* sub, TrainCliOpts& o) {
  sub->fallthrough();
  sub->add_option("--algo", o.algo, "td3 or sac")->check(CLI::IsMember({"td3", "sac"}));
  sub->add_option("--n", o.cfg.population, "population size");
  sub->add_option("--mode", o.mode, "independent or shared_critic")
      ->check(CLI::IsMember({"independent", "shared_critic"}));
  sub->add_option("--k", o.cfg.updates_per_burst, "update steps per burst");
  sub->add_option("--updates", o.cfg.total_updates, "total update steps");
  sub->add_option("--seed", o.cfg.seed, "run seed");
  sub->add_option("--env", o.env, "pointmass or pendulum")
      ->check(CLI::IsMember({"pointmass", "pendulum"}));
  sub->add_option("--workers", o.cfg.actor_workers, "actor worker threads");
  sub->add_option("--batch", o.cfg.batch_size, "batch size");
  sub->add_option("--hidden", o.hidden, "hidden layer sizes")->delimiter(',');
  sub->add_option("--buffer-mode", o.buffer_mode, "per_agent or shared")
      ->check(CLI::IsMember({"per_agent", "shared"}));
  sub->add_option("--buffer-capacity", o.cfg.buffer_capacity, "replay capacity per buffer");
  sub->add_option("--warmup", o.cfg.warmup_per_buffer, "transitions per buffer before sampling");
  sub->add_option("--ratio", o.cfg.env_steps_per_member_per_update,
                  "environment steps per member per update");
  sub->add_option("--lr", o.cfg.learning_rate, "learning rate for every optimizer");
  sub->add_option("--discount", o.cfg.discount, "discount factor");
  sub->add_option("--explore", o.cfg.explore_std, "exploration noise scale");
  sub->add_option("--target-noise", o.cfg.target_noise_std, "target policy smoothing noise");
  sub->add_option("--slack", o.cfg.ratio_slack, "ratio guard slack fraction");
  sub->add_option("--eval-every", o.cfg.eval_every_episodes,
                  "deterministic eval every Nth episode (0 = off)");
  sub->add_option("--metrics", o.cfg.metrics_path, "metrics csv path");
  sub->add_option("--checkpoint", o.cfg.checkpoint_path, "checkpoint path");
  sub->add_option("--checkpoint-interval", o.cfg.checkpoint_interval,
                  "update steps between checkpoints (0 = final only)");
  sub->add_option("--timeout-ms", o.timeout_ms, "starvation timeout in milliseconds");
  sub->add_option("--threshold", o.threshold, "success threshold on eval returns")
      ->each([&o](const std::string&) { o.track = true; });
  sub->add_flag("--stop-on-success", o.stop_on_success, "finish once the threshold is reached");
  sub->add_option("--precision", o.precision, "32 or 64")->check(CLI::IsMember({32u, 64u}));
}

RunConfig finalize(TrainCliOpts& o, Strategy strategy) {
  RunConfig& cfg = o.cfg;
  cfg.algo = (o.algo == "sac") ? Algo::kSac : Algo::kTd3;
  cfg.strategy = strategy;
  cfg.env = (o.env == "pendulum") ? EnvSpec::pendulum() : EnvSpec::point_mass();
  cfg.hidden = o.hidden;
  cfg.starvation_timeout = std::chrono::milliseconds(o.timeout_ms);
  cfg.track_success = o.track;
  cfg.success_threshold = o.threshold;
  cfg.stop_on_success = o.stop_on_success;
  if (strategy == Strategy::kCem || strategy == Strategy::kDvd) {
    cfg.mode = PopMode::kSharedCritic;
    cfg.buffer_mode = BufferMode::kShared;
  } else {
    cfg.mode = (o.mode == "shared_critic") ? PopMode::kSharedCritic : PopMode::kIndependent;
    if (o.buffer_mode.empty()) {
      cfg.buffer_mode =
          cfg.mode == PopMode::kSharedCritic ? BufferMode::kShared : BufferMode::kPerAgent;
    } else {
      cfg.buffer_mode = (o.buffer_mode == "shared") ? BufferMode::kShared : BufferMode::kPerAgent;
    }
  }
  return cfg;
}

void print_summary(const RunSummary& s, std::ostream& out) {
  out << "env_steps=" << s.env_steps << " update_steps=" << s.update_steps
      << " wall_s=" << std::fixed << std::setprecision(2) << s.wall_seconds
      << " updates_per_member_env_step=" << std::setprecision(4) << s.updates_per_member_env_step
      << " dropped=" << s.dropped_transitions << " evolve_events=" << s.evolve_events << "\n";
  out << "best_member=" << s.best_member << " best_return=" << std::setprecision(3)
      << s.best_return;
  if (s.first_success_update_step != 0) {
    out << " first_success_update_step=" << s.first_success_update_step;
  }
  out << "\n";
  out.unsetf(std::ios::fixed);
}

int run_with_precision(const RunConfig& cfg, unsigned precision, std::ostream& out) {
  const RunSummary s = precision == 64 ? run_training<double>(cfg) : run_training<float>(cfg);
  print_summary(s, out);
  return 0;
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"population-based reinforcement learning trainer and benchmark harness"};
  app.require_subcommand(1);
  // config keys live in a section named after the subcommand, e.g. [train]
  app.set_config("--config", "", "Configuration file (ini-style, one section per subcommand)")
      ->check(CLI::ExistingFile);

  // --- train ---------------------------------------------------------------
  TrainCliOpts train_o;
  CLI::App* train = app.add_subcommand("train", "train a single agent or an independent population");
  add_train_options(train, train_o);

  // --- pbt -----------------------------------------------------------------
  TrainCliOpts pbt_o;
  CLI::App* pbt = app.add_subcommand("pbt", "population-based training with truncation selection");
  add_train_options(pbt, pbt_o);
  double lr_lo = 3e-5, lr_hi = 3e-3;
  bool no_initial_sample = false;
  pbt->add_option("--evolve-interval", pbt_o.cfg.pbt_interval, "update steps between evolutions");
  pbt->add_option("--lr-lo", lr_lo, "learning-rate prior lower bound");
  pbt->add_option("--lr-hi", lr_hi, "learning-rate prior upper bound");
  pbt->add_flag("--no-initial-sample", no_initial_sample,
                "start every member from default hyperparameters");

  // --- cemrl ---------------------------------------------------------------
  TrainCliOpts cem_o;
  CLI::App* cem = app.add_subcommand("cemrl", "cross-entropy method over policy parameters with a shared critic");
  add_train_options(cem, cem_o);
  cem->add_option("--generation-updates", cem_o.cfg.cem_generation_updates,
                  "update steps per generation");
  cem->add_option("--init-var", cem_o.cfg.cem_init_var, "initial distribution variance");

  // --- dvd -----------------------------------------------------------------
  TrainCliOpts dvd_o;
  CLI::App* dvd = app.add_subcommand("dvd", "diversity-regularized population with a shared critic");
  add_train_options(dvd, dvd_o);
  dvd->add_option("--lambda-start", dvd_o.cfg.dvd.schedule.start, "diversity weight at step 0");
  dvd->add_option("--lambda-end", dvd_o.cfg.dvd.schedule.end, "diversity weight after the horizon");
  dvd->add_option("--lambda-horizon", dvd_o.cfg.dvd.schedule.horizon, "ramp length in update steps");
  dvd->add_option("--probe-count", dvd_o.cfg.dvd_probe_count, "probe states for the embedding");
  dvd->add_option("--jitter", dvd_o.cfg.dvd.jitter, "kernel diagonal jitter");

  // --- bench ---------------------------------------------------------------
  BenchConfig bench_cfg;
  std::string bench_mode = "vectorized", bench_algo = "td3", bench_out;
  bool bench_audit = false;
  CLI::App* bench = app.add_subcommand("bench", "time one population update step per execution strategy");
  bench->fallthrough();
  bench->add_option("--mode", bench_mode, "sequential, vectorized, or parallel_threads")
      ->check(CLI::IsMember({"sequential", "vectorized", "parallel_threads"}));
  bench->add_option("--algo", bench_algo, "td3 or sac")->check(CLI::IsMember({"td3", "sac"}));
  bench->add_option("--n", bench_cfg.n, "population size");
  bench->add_option("--k", bench_cfg.k, "update steps per repetition");
  bench->add_option("--reps", bench_cfg.reps, "timed repetitions");
  bench->add_option("--batch", bench_cfg.batch, "batch size");
  bench->add_option("--ds", bench_cfg.obs_dim, "observation dim");
  bench->add_option("--da", bench_cfg.act_dim, "action dim");
  bench->add_option("--hidden", bench_cfg.hidden, "hidden sizes")->delimiter(',');
  bench->add_option("--seed", bench_cfg.seed, "seed");
  bench->add_option("--budget-bytes", bench_cfg.memory_budget_bytes, "memory budget");
  bench->add_flag("--audit", bench_audit, "run all three modes in 64-bit and report max parameter diff");
  bench->add_option("--out", bench_out, "append the result row to this csv");

  // --- plan ----------------------------------------------------------------
  std::size_t plan_n = 1;
  double plan_t_env = 1.0, plan_t_update = 1.0, plan_ratio = 1.0, plan_overhead = 1.3;
  CLI::App* plan = app.add_subcommand("plan", "actor core-count planner");
  plan->fallthrough();
  plan->add_option("--n", plan_n, "population size")->required();
  plan->add_option("--t-env-ms", plan_t_env, "milliseconds per environment interaction")->required();
  plan->add_option("--t-update-ms", plan_t_update, "milliseconds per vectorized update step")->required();
  plan->add_option("--ratio", plan_ratio, "environment steps per member per update");
  plan->add_option("--overhead", plan_overhead, "padding factor for data-transfer overhead");

  // --- emit-plot-data ------------------------------------------------------
  std::string emit_kind = "bench", emit_in, emit_price_file, emit_out;
  double emit_runtime_s = -1;
  CLI::App* emit = app.add_subcommand("emit-plot-data", "reshape logs into per-figure csv tables");
  emit->fallthrough();
  emit->add_option("--kind", emit_kind, "bench, cost, or learning")
      ->check(CLI::IsMember({"bench", "cost", "learning"}));
  emit->add_option("--in", emit_in, "input csv (bench rows or metrics log)");
  emit->add_option("--runtime-s", emit_runtime_s, "runtime to price (kind=cost)");
  emit->add_option("--price-file", emit_price_file, "price table file (kind=cost)");
  emit->add_option("--out", emit_out, "write the table here instead of stdout");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    std::stringstream capture;
    const int code = app.exit(e, capture, capture);
    (code == 0 ? out : err) << capture.str();
    return code;
  }

  try {
    if (*train) return run_with_precision(finalize(train_o, Strategy::kNone), train_o.precision, out);
    if (*pbt) {
      RunConfig cfg = finalize(pbt_o, Strategy::kPbt);
      cfg.td3_prior.critic_lr = {true, lr_lo, lr_hi};
      cfg.td3_prior.policy_lr = {true, lr_lo, lr_hi};
      cfg.sac_prior.critic_lr = {true, lr_lo, lr_hi};
      cfg.sac_prior.policy_lr = {true, lr_lo, lr_hi};
      cfg.sac_prior.alpha_lr = {true, lr_lo, lr_hi};
      cfg.pbt_sample_initial_hypers = !no_initial_sample;
      return run_with_precision(cfg, pbt_o.precision, out);
    }
    if (*cem) return run_with_precision(finalize(cem_o, Strategy::kCem), cem_o.precision, out);
    if (*dvd) return run_with_precision(finalize(dvd_o, Strategy::kDvd), dvd_o.precision, out);

    if (*bench) {
      bench_cfg.mode = parse_bench_mode(bench_mode);
      bench_cfg.algo = bench_algo == "sac" ? BenchAlgo::kSac : BenchAlgo::kTd3;
      if (bench_audit) {
        const double diff = bench_cross_mode_audit<double>(bench_cfg);
        out << "cross_mode_max_abs_diff=" << diff << "\n";
        return diff <= 1e-10 ? 0 : 1;
      }
      const BenchResult r = bench_update<float>(bench_cfg);
      out << BenchResult::kCsvHeader << "\n" << r.csv_row() << "\n";
      if (!bench_out.empty()) {
        const bool fresh = [&] {
          std::ifstream probe(bench_out);
          return !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
        }();
        std::ofstream f(bench_out, std::ios::app);
        if (!f) throw ConfigError("bench: cannot open " + bench_out);
        if (fresh) f << BenchResult::kCsvHeader << "\n";
        f << r.csv_row() << "\n";
      }
      return 0;
    }

    if (*plan) {
      const std::size_t cores = plan_actor_cores(plan_n, plan_t_env, plan_t_update, plan_ratio);
      out << cores << "\n";
      if (plan_overhead > 1.0) {
        const std::size_t padded = static_cast<std::size_t>(
            std::ceil(static_cast<double>(plan_n) * plan_ratio * plan_t_env * plan_overhead /
                      plan_t_update));
        out << "with data-transfer overhead x" << plan_overhead << ": " << padded << " cores\n";
      }
      return 0;
    }

    if (*emit) {
      std::ofstream file_out;
      std::ostream* sink = &out;
      if (!emit_out.empty()) {
        file_out.open(emit_out);
        if (!file_out) throw ConfigError("emit-plot-data: cannot open " + emit_out);
        sink = &file_out;
      }
      if (emit_kind == "bench") {
        if (emit_in.empty()) throw ConfigError("emit-plot-data: --in is required for kind=bench");
        std::ifstream in(emit_in);
        if (!in) throw ConfigError("emit-plot-data: cannot open " + emit_in);
        *sink << "mode,n,median_ms,iqr_ms,warmup_ms\n";
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty() || line.rfind("mode,", 0) == 0) continue;
          std::stringstream ss(line);
          std::vector<std::string> cells;
          std::string cell;
          while (std::getline(ss, cell, ',')) cells.push_back(cell);
          if (cells.size() < 7) continue;
          *sink << cells[0] << ',' << cells[1] << ',' << cells[4] << ',' << cells[5] << ','
                << cells[6] << "\n";
        }
        return 0;
      }
      if (emit_kind == "cost") {
        if (emit_runtime_s < 0) {
          throw ConfigError("emit-plot-data: --runtime-s is required for kind=cost");
        }
        const PriceTable table =
            emit_price_file.empty() ? PriceTable::builtin() : PriceTable::load(emit_price_file);
        *sink << "hardware,runtime_s,dollars\n";
        for (const auto& [name, price] : table.entries()) {
          (void)price;
          *sink << name << ',' << emit_runtime_s << ','
                << cost_estimate(emit_runtime_s, name, table) << "\n";
        }
        return 0;
      }
      // learning: best eval return so far against wall clock and env steps
      if (emit_in.empty()) throw ConfigError("emit-plot-data: --in is required for kind=learning");
      const auto rows = read_metrics(emit_in);
      *sink << "wall_clock_s,env_steps,update_steps,best_return\n";
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& r : rows) {
        if (!r.has_return) continue;
        if (r.episode_return > best) best = r.episode_return;
        *sink << r.wall_s << ',' << r.env_steps << ',' << r.update_steps << ',' << best << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "error: no subcommand\n";
  return 1;
}

}  // namespace pbrl
