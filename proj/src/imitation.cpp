#include "dtsil/imitation.hpp"

#include <algorithm>
#include <cmath>

#include "dtsil/error.hpp"

namespace dtsil {

double clip_reward(double r) { return std::clamp(r, -1.0, 1.0); }

double count_bonus(std::int64_t n, double scale) {
  return scale / std::sqrt(static_cast<double>(std::max<std::int64_t>(n, 1)));
}

DemoTracker::DemoTracker(std::vector<env::Embedding> demo, TrackerConfig config)
    : demo_(std::move(demo)), config_(config) {
  if (config_.window < 1) throw ConfigError("imitation window must be at least 1");
  if (config_.delta < 0) throw ConfigError("imitation delta must be non-negative");
}

void DemoTracker::observe_initial(const env::Embedding& e0) {
  u_ = -1;
  if (!demo_.empty() && env::distance(e0, demo_[0]) <= config_.delta) u_ = 0;
}

DemoTracker::Shaped DemoTracker::shape_reward(const env::Embedding& e_next, double r_env,
                                              double bonus) {
  Shaped out;
  out.reward = bonus;
  if (demo_.empty()) return out;
  const int lo = std::max(u_ + 1, 1);
  const int hi = std::min(u_ + config_.window, last_index());
  for (int k = lo; k <= hi; ++k) {
    if (env::distance(e_next, demo_[static_cast<std::size_t>(k)]) <= config_.delta) {
      u_ = k;
      out.reward += clip_reward(r_env) + config_.r_im;
      out.advanced = true;
      break;
    }
  }
  return out;
}

std::vector<int> soft_order_trace(const Trajectory& episode, const std::vector<env::Embedding>& demo,
                                  const TrackerConfig& config) {
  DemoTracker tracker(demo, config);
  std::vector<int> trace;
  if (episode.embeddings.empty()) return trace;
  tracker.observe_initial(episode.embeddings[0]);
  trace.push_back(tracker.u());
  for (std::size_t t = 0; t < episode.actions.size(); ++t) {
    tracker.shape_reward(episode.embeddings[t + 1], episode.rewards[t]);
    trace.push_back(tracker.u());
  }
  return trace;
}

}  // namespace dtsil
