#include "dtsil/oracle.hpp"

#include <algorithm>
#include <deque>
#include <limits>

#include "dtsil/error.hpp"

namespace dtsil::env {

namespace {

OracleResult summarize(std::vector<double> values) {
  OracleResult r;
  r.per_start = std::move(values);
  double s = 0.0;
  r.min = std::numeric_limits<double>::infinity();
  r.max = -r.min;
  for (double v : r.per_start) {
    s += v;
    r.min = std::min(r.min, v);
    r.max = std::max(r.max, v);
  }
  r.mean = s / static_cast<double>(r.per_start.size());
  return r;
}

void check_budget(std::size_t states, std::size_t horizon, std::size_t actions,
                  const OracleOptions& options) {
  if (states * horizon * actions > options.budget)
    throw Error("state space exceeds the oracle enumeration budget (" +
                std::to_string(states * horizon * actions) + " > " +
                std::to_string(options.budget) + ")");
}

}  // namespace

OracleResult optimal_return(const AppleGold& env, bool allow_gold, const OracleOptions& options) {
  const int w = env.width(), h = env.height();
  const std::size_t cells = static_cast<std::size_t>(w * h);
  // flags: bit0 apple 0, bit1 apple 1
  const std::size_t states = cells * 4;
  const auto horizon = static_cast<std::size_t>(env.horizon());
  check_budget(states, horizon, AppleGold::kActions, options);

  static constexpr int kDx[4] = {0, 0, -1, 1};
  static constexpr int kDy[4] = {-1, 1, 0, 0};
  std::vector<double> v(states, 0.0), next(states, 0.0);
  for (std::size_t k = 0; k < horizon; ++k) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (env.cell(x, y) == AppleGold::Cell::kWall) continue;
        for (int f = 0; f < 4; ++f) {
          double best = -std::numeric_limits<double>::infinity();
          for (int a = 0; a < AppleGold::kActions; ++a) {
            int nx = x + kDx[a], ny = y + kDy[a];
            if (env.cell(nx, ny) == AppleGold::Cell::kWall) {
              nx = x;
              ny = y;
            }
            double r = 0.0;
            int nf = f;
            bool done = false;
            switch (env.cell(nx, ny)) {
              case AppleGold::Cell::kRock:
                r += AppleGold::kRockPenalty;
                break;
              case AppleGold::Cell::kApple:
                for (int i = 0; i < 2; ++i) {
                  if (env.apple(i) == std::pair{nx, ny} && !((f >> i) & 1)) {
                    r += AppleGold::kAppleReward;
                    nf |= 1 << i;
                  }
                }
                break;
              case AppleGold::Cell::kGold:
                if (!allow_gold) continue;
                r += AppleGold::kGoldReward;
                done = true;
                break;
              default:
                break;
            }
            const std::size_t ns = static_cast<std::size_t>(ny * w + nx) * 4 + static_cast<std::size_t>(nf);
            best = std::max(best, r + (done ? 0.0 : v[ns]));
          }
          next[static_cast<std::size_t>(y * w + x) * 4 + static_cast<std::size_t>(f)] = best;
        }
      }
    }
    std::swap(v, next);
  }
  std::vector<double> per_start;
  for (const auto& [x, y] : env.start_cells())
    per_start.push_back(v[static_cast<std::size_t>(y * w + x) * 4]);
  return summarize(std::move(per_start));
}

OracleResult optimal_return(const DeepSea& env, const OracleOptions& options) {
  const int n = env.size();
  const auto horizon = static_cast<std::size_t>(env.horizon());
  check_budget(static_cast<std::size_t>(n * n), horizon, 2, options);
  // v[row][col]: best return-to-go from (row, col). Terminal row is n - 1.
  std::vector<double> v(static_cast<std::size_t>(n * n), 0.0);
  auto at = [&](int r, int c) -> double& { return v[static_cast<std::size_t>(r * n + c)]; };
  for (int r = n - 2; r >= 0; --r) {
    for (int c = 0; c < n; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < 2; ++a) {
        const int nc = a == 1 ? std::min(c + 1, n - 1) : std::max(c - 1, 0);
        double reward = a == 1 ? -env.move_cost() : 0.0;
        const int nr = r + 1;
        if (nr == n - 1) {
          if (nc == n - 1) reward += 1.0;
        } else {
          reward += at(nr, nc);
        }
        best = std::max(best, reward);
      }
      at(r, c) = best;
    }
  }
  return summarize({at(0, 0)});
}

OracleResult optimal_return(const Environment& env, const OracleOptions& options) {
  if (const auto* ag = dynamic_cast<const AppleGold*>(&env)) return optimal_return(*ag, true, options);
  if (const auto* ds = dynamic_cast<const DeepSea*>(&env)) return optimal_return(*ds, options);
  throw Error("no oracle for environment " + env.name());
}

int shortest_gold_path(const AppleGold& env) {
  const int w = env.width(), h = env.height();
  std::vector<int> dist(static_cast<std::size_t>(w * h), -1);
  std::deque<std::pair<int, int>> q;
  for (const auto& [x, y] : env.start_cells()) {
    dist[static_cast<std::size_t>(y * w + x)] = 0;
    q.emplace_back(x, y);
  }
  static constexpr int kDx[4] = {0, 0, -1, 1};
  static constexpr int kDy[4] = {-1, 1, 0, 0};
  while (!q.empty()) {
    auto [x, y] = q.front();
    q.pop_front();
    if (std::pair{x, y} == env.gold()) return dist[static_cast<std::size_t>(y * w + x)];
    for (int a = 0; a < 4; ++a) {
      const int nx = x + kDx[a], ny = y + kDy[a];
      if (env.cell(nx, ny) == AppleGold::Cell::kWall) continue;
      auto& d = dist[static_cast<std::size_t>(ny * w + nx)];
      if (d >= 0) continue;
      d = dist[static_cast<std::size_t>(y * w + x)] + 1;
      q.emplace_back(nx, ny);
    }
  }
  return -1;
}

}  // namespace dtsil::env
