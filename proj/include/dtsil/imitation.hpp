#pragma once

// Soft-order demonstration following: reward for reaching any of the next
// few demonstration states, plus the optional count-based bonus.

#include <cstdint>
#include <vector>

#include "dtsil/envs.hpp"
#include "dtsil/trajectory.hpp"

namespace dtsil {

struct TrackerConfig {
  int window = 10;
  double delta = 0.0;
  double r_im = 0.1;
};

// f(r): clip to [-1, 1].
double clip_reward(double r);

// scale / sqrt(max(n, 1)).
double count_bonus(std::int64_t n, double scale = 1.0);

class DemoTracker {
 public:
  DemoTracker() = default;
  DemoTracker(std::vector<env::Embedding> demo, TrackerConfig config);

  // Matches the reset state against g_0 (no reward). Step-time matching only
  // considers indices >= 1, so each index is credited at most once.
  void observe_initial(const env::Embedding& e0);

  struct Shaped {
    double reward = 0.0;
    bool advanced = false;
  };
  Shaped shape_reward(const env::Embedding& e_next, double r_env, double bonus = 0.0);

  int u() const { return u_; }
  // |g|: index of the demo's final state.
  int last_index() const { return static_cast<int>(demo_.size()) - 1; }
  bool finished() const { return !demo_.empty() && u_ == last_index(); }
  bool active() const { return !demo_.empty(); }
  const std::vector<env::Embedding>& demo() const { return demo_; }
  const TrackerConfig& config() const { return config_; }

 private:
  std::vector<env::Embedding> demo_;
  TrackerConfig config_;
  int u_ = -1;
};

// u after the reset state and after every transition of `episode`.
std::vector<int> soft_order_trace(const Trajectory& episode,
                                  const std::vector<env::Embedding>& demo,
                                  const TrackerConfig& config = {});

}  // namespace dtsil
