#include "dtsil/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dtsil/error.hpp"

namespace dtsil::env {

double round2(double v) { return std::round(v * 100.0) / 100.0; }

double distance(const Embedding& a, const Embedding& b) {
  return std::max({std::abs(static_cast<double>(a.x - b.x)),
                   std::abs(static_cast<double>(a.y - b.y)), std::abs(a.r_plus - b.r_plus)});
}

namespace {

void one_hot(std::vector<double>& out, int index, int n) {
  for (int i = 0; i < n; ++i) out.push_back(i == index ? 1.0 : 0.0);
}

// One-hot plus the coordinate scaled to [0, 1].
void position(std::vector<double>& out, int index, int n) {
  one_hot(out, index, n);
  out.push_back(n > 1 ? static_cast<double>(index) / (n - 1) : 0.0);
}

}  // namespace

// ---- Apple-Gold -------------------------------------------------------------

AppleGold AppleGold::from_text(const std::string& text, int horizon) {
  std::vector<std::string> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(line);
  }
  if (rows.empty()) throw FormatError("map is empty");
  if (horizon <= 0) throw ConfigError("horizon must be positive");

  AppleGold env;
  env.height_ = static_cast<int>(rows.size());
  env.width_ = static_cast<int>(rows[0].size());
  env.horizon_ = horizon;
  int apples = 0, golds = 0;
  for (int y = 0; y < env.height_; ++y) {
    const std::string& row = rows[static_cast<std::size_t>(y)];
    if (static_cast<int>(row.size()) != env.width_)
      throw FormatError("map row " + std::to_string(y) + " has width " +
                        std::to_string(row.size()) + ", expected " + std::to_string(env.width_));
    for (int x = 0; x < env.width_; ++x) {
      Cell c;
      switch (row[static_cast<std::size_t>(x)]) {
        case '#': c = Cell::kWall; break;
        case '.': c = Cell::kFloor; break;
        case '~': c = Cell::kRock; break;
        case 'S':
          c = Cell::kFloor;
          env.starts_.emplace_back(x, y);
          break;
        case 'a':
          c = Cell::kApple;
          if (apples < 2) env.apples_[apples] = {x, y};
          ++apples;
          break;
        case 'G':
          c = Cell::kGold;
          env.gold_ = {x, y};
          ++golds;
          break;
        default:
          throw FormatError(std::string("unknown map character '") +
                            row[static_cast<std::size_t>(x)] + "'");
      }
      env.cells_.push_back(c);
    }
  }
  if (apples != 2) throw FormatError("map needs exactly 2 apples, found " + std::to_string(apples));
  if (golds != 1) throw FormatError("map needs exactly 1 gold cell, found " + std::to_string(golds));
  if (env.starts_.empty()) throw FormatError("map has no start cells");
  for (int x = 0; x < env.width_; ++x)
    if (env.cell(x, 0) != Cell::kWall || env.cell(x, env.height_ - 1) != Cell::kWall)
      throw FormatError("map border must be walls");
  for (int y = 0; y < env.height_; ++y)
    if (env.cell(0, y) != Cell::kWall || env.cell(env.width_ - 1, y) != Cell::kWall)
      throw FormatError("map border must be walls");
  return env;
}

AppleGold AppleGold::from_file(const std::string& path, int horizon) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open map file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str(), horizon);
}

Step AppleGold::observe(double reward) const {
  Step s;
  s.obs = {static_cast<double>(x_), static_cast<double>(y_), has_apple_[0] ? 1.0 : 0.0,
           has_apple_[1] ? 1.0 : 0.0, has_gold_ ? 1.0 : 0.0};
  s.embedding = {x_, y_, round2(r_plus_)};
  s.reward = reward;
  s.done = done_;
  return s;
}

Step AppleGold::reset(Rng& rng) {
  const auto& [x, y] = starts_[rng.below(starts_.size())];
  return reset_at(x, y);
}

Step AppleGold::reset_at(int x, int y) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_ || cell(x, y) == Cell::kWall)
    throw Error("reset_at: invalid start cell");
  x_ = x;
  y_ = y;
  has_apple_[0] = has_apple_[1] = false;
  has_gold_ = false;
  r_plus_ = 0.0;
  t_ = 0;
  done_ = false;
  return observe(0.0);
}

Step AppleGold::step(int action) {
  if (done_) throw Error("step called on a finished episode; reset first");
  if (action < 0 || action >= kActions) throw Error("invalid action " + std::to_string(action));
  static constexpr int kDx[4] = {0, 0, -1, 1};
  static constexpr int kDy[4] = {-1, 1, 0, 0};
  const int nx = x_ + kDx[action], ny = y_ + kDy[action];
  if (cell(nx, ny) != Cell::kWall) {
    x_ = nx;
    y_ = ny;
  }
  double reward = 0.0;
  switch (cell(x_, y_)) {
    case Cell::kRock:
      reward += kRockPenalty;
      break;
    case Cell::kApple:
      for (int i = 0; i < 2; ++i) {
        if (apples_[i] == std::pair{x_, y_} && !has_apple_[i]) {
          has_apple_[i] = true;
          reward += kAppleReward;
        }
      }
      break;
    case Cell::kGold:
      has_gold_ = true;
      reward += kGoldReward;
      done_ = true;
      break;
    default:
      break;
  }
  r_plus_ += std::max(reward, 0.0);
  ++t_;
  if (t_ >= horizon_) done_ = true;
  return observe(reward);
}

std::unique_ptr<Environment> AppleGold::clone() const { return std::make_unique<AppleGold>(*this); }

std::size_t AppleGold::obs_feature_size() const {
  return static_cast<std::size_t>(width_ + height_ + 5);
}

std::size_t AppleGold::embedding_feature_size() const {
  return static_cast<std::size_t>(width_ + height_ + 3);
}

std::vector<double> AppleGold::obs_features(const std::vector<double>& obs) const {
  std::vector<double> f;
  f.reserve(obs_feature_size());
  position(f, static_cast<int>(obs[0]), width_);
  position(f, static_cast<int>(obs[1]), height_);
  f.insert(f.end(), obs.begin() + 2, obs.end());
  return f;
}

std::vector<double> AppleGold::embedding_features(const Embedding& e) const {
  std::vector<double> f;
  f.reserve(embedding_feature_size());
  position(f, e.x, width_);
  position(f, e.y, height_);
  f.push_back(e.r_plus / (2 * kAppleReward + kGoldReward));
  return f;
}

// ---- Deep Sea ---------------------------------------------------------------

DeepSea::DeepSea(int size) : n_(size) {
  if (size < 2) throw ConfigError("deep sea size must be at least 2");
}

Step DeepSea::observe(double reward) const {
  Step s;
  s.obs.assign(obs_size(), 0.0);
  s.obs[static_cast<std::size_t>(row_ * n_ + col_)] = 1.0;
  s.embedding = {col_, row_, round2(r_plus_)};
  s.reward = reward;
  s.done = done_;
  return s;
}

Step DeepSea::reset(Rng&) {
  row_ = col_ = 0;
  r_plus_ = 0.0;
  t_ = 0;
  done_ = false;
  return observe(0.0);
}

Step DeepSea::step(int action) {
  if (done_) throw Error("step called on a finished episode; reset first");
  if (action < 0 || action > 1) throw Error("invalid action " + std::to_string(action));
  double reward = 0.0;
  if (action == 1) {
    reward -= move_cost();
    col_ = std::min(col_ + 1, n_ - 1);
  } else {
    col_ = std::max(col_ - 1, 0);
  }
  ++row_;
  ++t_;
  if (row_ == n_ - 1) {
    done_ = true;
    if (col_ == n_ - 1) reward += 1.0;
  }
  r_plus_ += std::max(reward, 0.0);
  return observe(reward);
}

std::unique_ptr<Environment> DeepSea::clone() const { return std::make_unique<DeepSea>(*this); }

std::size_t DeepSea::embedding_feature_size() const { return static_cast<std::size_t>(2 * n_ + 1); }

std::vector<double> DeepSea::obs_features(const std::vector<double>& obs) const { return obs; }

std::vector<double> DeepSea::embedding_features(const Embedding& e) const {
  std::vector<double> f;
  f.reserve(embedding_feature_size());
  one_hot(f, e.x, n_);
  one_hot(f, e.y, n_);
  f.push_back(e.r_plus);
  return f;
}

// ---- helpers ----------------------------------------------------------------

std::unique_ptr<Environment> make_env(const EnvSpec& spec) {
  if (spec.name == "apple_gold")
    return std::make_unique<AppleGold>(AppleGold::from_file(spec.map_path, spec.horizon));
  if (spec.name == "deep_sea") return std::make_unique<DeepSea>(spec.size);
  throw ConfigError("unknown environment '" + spec.name + "'");
}

Grid render_occupancy(int width, int height, const std::vector<CellCount>& counts) {
  Grid g(static_cast<std::size_t>(height), std::vector<std::int64_t>(static_cast<std::size_t>(width), 0));
  for (const CellCount& c : counts) {
    if (c.x < 0 || c.y < 0 || c.x >= width || c.y >= height) continue;
    g[static_cast<std::size_t>(c.y)][static_cast<std::size_t>(c.x)] += c.count;
  }
  return g;
}

}  // namespace dtsil::env
