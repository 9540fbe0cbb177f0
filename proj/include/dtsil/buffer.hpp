#pragma once

// Trajectory memory: one entry per cluster of state embeddings, holding the
// best trajectory found so far that ends in that cluster.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtsil/rng.hpp"
#include "dtsil/trajectory.hpp"

namespace dtsil {

struct BufferConfig {
  double delta = 0.0;
  std::size_t top_k = 10;
  // 0 keeps every entry.
  std::size_t capacity = 0;
};

struct BufferEntry {
  env::Embedding representative;
  Trajectory best;
  std::int64_t count = 0;
  double cached_return = 0.0;
  std::size_t cached_length = 0;

  bool operator==(const BufferEntry&) const = default;
};

struct UpdateReport {
  std::size_t inserted = 0;
  std::size_t replaced = 0;
  std::size_t matched_steps = 0;
  std::size_t evicted = 0;
};

enum class SampleMode { kExplore, kExploit };

struct DemoSample {
  std::size_t index = 0;
  SampleMode mode = SampleMode::kExplore;
};

class TrajectoryBuffer {
 public:
  static constexpr double kReturnTolerance = 1e-9;

  explicit TrajectoryBuffer(BufferConfig config = {});

  const BufferConfig& config() const { return config_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const BufferEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<BufferEntry>& entries() const { return entries_; }
  std::int64_t total_updates() const { return total_updates_; }

  // Nearest representative within delta (sup-norm); lowest index on ties.
  std::optional<std::size_t> match(const env::Embedding& e) const;

  UpdateReport update_with_trajectory(const Trajectory& episode);

  // With probability p: entry i with weight 1/sqrt(n_i). Otherwise uniform
  // over the top-K entries by return (shorter length first on ties).
  DemoSample sample_demonstration(double p, Rng& rng) const;
  std::vector<double> exploration_probabilities() const;
  std::vector<std::size_t> top_k_indices() const;

  std::int64_t visitation_count(const env::Embedding& e) const;

  // Line-delimited JSON: a header record followed by one record per entry.
  std::string serialize() const;
  void snapshot(const std::string& path) const;
  // Leaves the buffer untouched when the input is malformed.
  void deserialize(const std::string& text);
  void restore(const std::string& path);

  bool operator==(const TrajectoryBuffer& o) const {
    return entries_ == o.entries_ && total_updates_ == o.total_updates_;
  }

 private:
  struct Key {
    int x, y;
    std::int64_t r_cents;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const;
  };
  static Key key_of(const env::Embedding& e);

  void rebuild_index();
  void evict_if_needed(UpdateReport& report);

  BufferConfig config_;
  std::vector<BufferEntry> entries_;
  // Exact-match index used when delta == 0.
  std::unordered_map<Key, std::size_t, KeyHash> index_;
  std::int64_t total_updates_ = 0;
};

}  // namespace dtsil
