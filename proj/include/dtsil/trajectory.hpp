#pragma once

#include <vector>

#include "dtsil/envs.hpp"

namespace dtsil {

// T transitions: T + 1 observations/embeddings (index 0 is the reset state),
// T actions and T raw environment rewards.
struct Trajectory {
  std::vector<std::vector<double>> obs;
  std::vector<env::Embedding> embeddings;
  std::vector<int> actions;
  std::vector<double> rewards;
  bool done = false;

  std::size_t length() const { return actions.size(); }
  double total_return() const;
  // The first t transitions; ends at embeddings[t].
  Trajectory prefix(std::size_t t) const;

  void start(const env::Step& s);
  void append(int action, const env::Step& s);

  bool operator==(const Trajectory&) const = default;
};

}  // namespace dtsil
