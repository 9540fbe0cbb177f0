#pragma once

// Exhaustive finite-horizon planners giving ground-truth optimal returns.

#include <cstddef>
#include <vector>

#include "dtsil/envs.hpp"

namespace dtsil::env {

struct OracleOptions {
  // Upper bound on (states x horizon x actions) backups before giving up.
  std::size_t budget = 100'000'000;
};

struct OracleResult {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> per_start;
};

// Backward induction over (cell, apple/gold flags, steps remaining). With
// allow_gold = false the gold cell is treated as unreachable, which yields
// the best value of apple-only behaviour.
OracleResult optimal_return(const AppleGold& env, bool allow_gold = true,
                            const OracleOptions& options = {});
OracleResult optimal_return(const DeepSea& env, const OracleOptions& options = {});
OracleResult optimal_return(const Environment& env, const OracleOptions& options = {});

// Fewest steps from any start cell to the gold, ignoring rewards; -1 if
// unreachable.
int shortest_gold_path(const AppleGold& env);

}  // namespace dtsil::env
