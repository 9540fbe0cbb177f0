#pragma once

// Gridworlds with deterministic dynamics and (for Apple-Gold) random starts.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dtsil/rng.hpp"

namespace dtsil::env {

// Discretized high-level state: grid position plus the cumulative positive
// reward collected so far, rounded to 2 decimals.
struct Embedding {
  int x = 0;
  int y = 0;
  double r_plus = 0.0;

  bool operator==(const Embedding&) const = default;
};

double round2(double v);
// Sup-norm over (x, y, r_plus).
double distance(const Embedding& a, const Embedding& b);

struct Step {
  std::vector<double> obs;
  Embedding embedding;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual int width() const = 0;
  virtual int height() const = 0;
  virtual int num_actions() const = 0;
  virtual int horizon() const = 0;
  virtual std::size_t obs_size() const = 0;

  virtual Step reset(Rng& rng) = 0;
  virtual Step step(int action) = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;

  // Network input encodings.
  virtual std::vector<double> obs_features(const std::vector<double>& obs) const = 0;
  virtual std::vector<double> embedding_features(const Embedding& e) const = 0;
  virtual std::size_t obs_feature_size() const = 0;
  virtual std::size_t embedding_feature_size() const = 0;

  bool done() const { return done_; }
  int steps_taken() const { return t_; }

 protected:
  bool done_ = true;
  int t_ = 0;
  double r_plus_ = 0.0;
};

class AppleGold : public Environment {
 public:
  enum class Cell : char { kWall, kFloor, kRock, kApple, kGold };

  // Actions: 0 up, 1 down, 2 left, 3 right.
  static constexpr int kActions = 4;
  static constexpr double kAppleReward = 1.0;
  static constexpr double kGoldReward = 10.0;
  static constexpr double kRockPenalty = -0.05;

  // Map text: one row per line using `#./~/a/G/S`; exactly two apples and one
  // gold cell, at least one start cell.
  static AppleGold from_text(const std::string& text, int horizon = 150);
  static AppleGold from_file(const std::string& path, int horizon = 150);

  std::string name() const override { return "apple_gold"; }
  int width() const override { return width_; }
  int height() const override { return height_; }
  int num_actions() const override { return kActions; }
  int horizon() const override { return horizon_; }
  std::size_t obs_size() const override { return 5; }

  Step reset(Rng& rng) override;
  Step reset_at(int x, int y);
  Step step(int action) override;
  std::unique_ptr<Environment> clone() const override;

  std::vector<double> obs_features(const std::vector<double>& obs) const override;
  std::vector<double> embedding_features(const Embedding& e) const override;
  std::size_t obs_feature_size() const override;
  std::size_t embedding_feature_size() const override;

  Cell cell(int x, int y) const { return cells_[static_cast<std::size_t>(y * width_ + x)]; }
  const std::vector<std::pair<int, int>>& start_cells() const { return starts_; }
  std::pair<int, int> apple(int i) const { return apples_[static_cast<std::size_t>(i)]; }
  std::pair<int, int> gold() const { return gold_; }
  int x() const { return x_; }
  int y() const { return y_; }

 private:
  AppleGold() = default;
  Step observe(double reward) const;

  int width_ = 0;
  int height_ = 0;
  int horizon_ = 150;
  std::vector<Cell> cells_;
  std::vector<std::pair<int, int>> starts_;
  std::pair<int, int> apples_[2];
  std::pair<int, int> gold_{0, 0};
  int x_ = 0, y_ = 0;
  bool has_apple_[2] = {false, false};
  bool has_gold_ = false;
};

class DeepSea : public Environment {
 public:
  // Actions: 0 left, 1 right.
  explicit DeepSea(int size);

  std::string name() const override { return "deep_sea"; }
  int width() const override { return n_; }
  int height() const override { return n_; }
  int num_actions() const override { return 2; }
  // Bottom row is reached after size - 1 moves.
  int horizon() const override { return n_ - 1; }
  std::size_t obs_size() const override { return static_cast<std::size_t>(n_ * n_); }

  Step reset(Rng& rng) override;
  Step step(int action) override;
  std::unique_ptr<Environment> clone() const override;

  std::vector<double> obs_features(const std::vector<double>& obs) const override;
  std::vector<double> embedding_features(const Embedding& e) const override;
  std::size_t obs_feature_size() const override { return obs_size(); }
  std::size_t embedding_feature_size() const override;

  int size() const { return n_; }
  double move_cost() const { return 0.01 / n_; }

 private:
  Step observe(double reward) const;

  int n_;
  int row_ = 0, col_ = 0;
};

struct EnvSpec {
  std::string name;      // apple_gold | deep_sea
  std::string map_path;  // apple_gold only
  int size = 10;         // deep_sea only
  int horizon = 150;     // apple_gold only
};

std::unique_ptr<Environment> make_env(const EnvSpec& spec);

// Visit counts laid out [y][x].
using Grid = std::vector<std::vector<std::int64_t>>;

struct CellCount {
  int x = 0;
  int y = 0;
  std::int64_t count = 0;
};

Grid render_occupancy(int width, int height, const std::vector<CellCount>& counts);

}  // namespace dtsil::env
