#include "dtsil/trajectory.hpp"

#include "dtsil/error.hpp"

namespace dtsil {

double Trajectory::total_return() const {
  double r = 0.0;
  for (double x : rewards) r += x;
  return r;
}

Trajectory Trajectory::prefix(std::size_t t) const {
  if (t > length()) throw Error("prefix beyond trajectory length");
  Trajectory p;
  p.obs.assign(obs.begin(), obs.begin() + static_cast<long>(t + 1));
  p.embeddings.assign(embeddings.begin(), embeddings.begin() + static_cast<long>(t + 1));
  p.actions.assign(actions.begin(), actions.begin() + static_cast<long>(t));
  p.rewards.assign(rewards.begin(), rewards.begin() + static_cast<long>(t));
  p.done = t == length() && done;
  return p;
}

void Trajectory::start(const env::Step& s) {
  obs = {s.obs};
  embeddings = {s.embedding};
  actions.clear();
  rewards.clear();
  done = s.done;
}

void Trajectory::append(int action, const env::Step& s) {
  obs.push_back(s.obs);
  embeddings.push_back(s.embedding);
  actions.push_back(action);
  rewards.push_back(s.reward);
  done = s.done;
}

}  // namespace dtsil
