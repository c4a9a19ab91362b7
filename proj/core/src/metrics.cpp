#include "pbrl/metrics.hpp"

#include <sstream>

#include "pbrl/errors.hpp"

namespace pbrl {

MetricsLog::MetricsLog(const std::string& path) {
  if (path.empty()) return;
  const bool fresh = [&] {
    std::ifstream probe(path);
    return !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
  }();
  out_.open(path, std::ios::app);
  if (!out_) throw ConfigError("MetricsLog: cannot open " + path);
  if (fresh) out_ << kHeader << "\n";
}

void MetricsLog::row(double wall_s, std::uint64_t env_steps, std::uint64_t update_steps,
                     const std::string& member, const std::string& ep_return,
                     const std::string& event) {
  if (!out_.is_open()) return;
  std::lock_guard<std::mutex> lk(mu_);
  out_ << wall_s << ',' << env_steps << ',' << update_steps << ',' << member << ',' << ep_return
       << ',' << event << '\n';
  out_.flush();
}

void MetricsLog::episode(double wall_s, std::uint64_t env_steps, std::uint64_t update_steps,
                         std::size_t member, double episode_return, bool deterministic_eval) {
  std::ostringstream m, r;
  m << member;
  r << episode_return;
  row(wall_s, env_steps, update_steps, m.str(), r.str(), deterministic_eval ? "eval" : "episode");
}

void MetricsLog::event(double wall_s, std::uint64_t env_steps, std::uint64_t update_steps,
                       const std::string& text) {
  row(wall_s, env_steps, update_steps, "", "", text);
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("read_metrics: cannot open " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.rfind("wall_clock_s", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 6) cells.emplace_back();
    MetricsRow r;
    r.wall_s = std::stod(cells[0]);
    r.env_steps = std::stoull(cells[1]);
    r.update_steps = std::stoull(cells[2]);
    if (!cells[3].empty()) {
      r.has_member = true;
      r.member = std::stoull(cells[3]);
    }
    if (!cells[4].empty()) {
      r.has_return = true;
      r.episode_return = std::stod(cells[4]);
    }
    r.event = cells[5];
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace pbrl
