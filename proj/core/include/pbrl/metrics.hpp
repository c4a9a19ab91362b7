#pragma once

#include <fstream>
#include <mutex>
#include <string>
#include <vector>

namespace pbrl {

/// Append-only comma-separated run log.  Columns:
/// wall_clock_s,env_steps,update_steps,member_id,episode_return,event
/// member_id and episode_return are left empty for rows that carry only an
/// event (evolution, checkpoints, run markers).
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path);

  bool enabled() const { return out_.is_open(); }

  void episode(double wall_s, std::uint64_t env_steps, std::uint64_t update_steps,
               std::size_t member, double episode_return, bool deterministic_eval = false);
  void event(double wall_s, std::uint64_t env_steps, std::uint64_t update_steps,
             const std::string& text);

  static constexpr const char* kHeader =
      "wall_clock_s,env_steps,update_steps,member_id,episode_return,event";

 private:
  void row(double wall_s, std::uint64_t env_steps, std::uint64_t update_steps,
           const std::string& member, const std::string& ep_return, const std::string& event);

  std::mutex mu_;
  std::ofstream out_;
};

struct MetricsRow {
  double wall_s = 0;
  std::uint64_t env_steps = 0;
  std::uint64_t update_steps = 0;
  bool has_member = false;
  std::size_t member = 0;
  bool has_return = false;
  double episode_return = 0;
  std::string event;
};

/// Parses a metrics CSV written by MetricsLog (header line optional).
std::vector<MetricsRow> read_metrics(const std::string& path);

}  // namespace pbrl
