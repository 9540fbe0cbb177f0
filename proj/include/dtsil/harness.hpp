#pragma once

// Experiment orchestration: INI configs, per-seed runs with metrics and
// artifacts, and the plot / compare summaries computed from metrics files.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dtsil/envs.hpp"
#include "dtsil/trainer.hpp"

namespace dtsil::harness {

inline constexpr const char* kMetricsSchema = "dtsil-metrics/1";
inline constexpr const char* kOutputRootEnv = "DTSIL_OUTPUT_ROOT";
inline constexpr const char* kFailureMarker = "FAILED";
inline constexpr const char* kDoneMarker = "DONE";

struct ExperimentConfig {
  std::string name = "experiment";
  env::EnvSpec env;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  int log_every = 1;
  bool attention = false;
  // Ends a seed early once the recent-episode mean reaches this value.
  std::optional<double> stop_at_mean;
};

// Relative map paths resolve against base_dir. Throws ConfigError naming the
// offending section.key.
ExperimentConfig parse_config(const std::string& text, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);
// "0,1,2", "0-4" or a mix of the two.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);
// Round-trips through parse_config.
std::string format_config(const ExperimentConfig& config);

// DTSIL_OUTPUT_ROOT, or "runs".
std::string output_root();

struct MetricsRow {
  std::int64_t iteration = 0;
  std::int64_t env_steps = 0;
  std::int64_t episodes = 0;
  double recent_mean = 0.0;
  double best_return = 0.0;
  std::int64_t buffer_size = 0;
  double explore_fraction = 0.0;
  double p = 0.0;
  double lr = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double sl_loss = 0.0;
  double sil_loss = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  std::int64_t aborted_updates = 0;
};

MetricsRow to_row(const IterationReport& report);
const std::vector<std::string>& metrics_columns();
double column_value(const MetricsRow& row, const std::string& column);

struct MetricsFile {
  std::string path;
  // key=value pairs from the schema comment line.
  std::map<std::string, std::string> meta;
  std::vector<MetricsRow> rows;
};

// Throws FormatError on a schema or header mismatch.
MetricsFile read_metrics(const std::string& path);

// Per-cell cluster counts and visits by the algorithm's imitation memory
// (buffer trajectories, or the SIL replay for ppo_sil).
struct Occupancy {
  int width = 0;
  int height = 0;
  env::Grid clusters;
  env::Grid visits;

  std::size_t covered_cells() const;
  std::int64_t total_clusters() const;
};
Occupancy occupancy(const Trainer& trainer);
void write_occupancy(const Occupancy& o, const std::string& path);
Occupancy read_occupancy(const std::string& path);

// One greedy episode conditioned on `demo`, started from the demo's first state.
struct GreedyRollout {
  Trajectory trajectory;
  // attention[t][i]: weight on demo step i when choosing action t.
  std::vector<std::vector<double>> attention;
  std::vector<int> u;
};
GreedyRollout greedy_rollout(const Trainer& trainer, const Trajectory& demo);
void write_attention(const GreedyRollout& r, const std::string& path);

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::string dir;
  bool failed = false;
  std::string error;
  std::int64_t env_steps = 0;
  double recent_mean = 0.0;
  double best_return = 0.0;
};

using Progress = std::function<void(std::uint64_t seed, const IterationReport&)>;

// Writes into dir: config.ini, metrics.csv, buffer_{025,050,100}.jsonl,
// occupancy_{025,050,100}.csv, checkpoint/ and attention.csv on request.
// On an exception the partial artifacts stay and a FAILED marker is written;
// a clean finish writes DONE last.
SeedOutcome run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::string& dir,
                     const Progress& progress = {});

// True when dir holds a finished run of exactly this config and seed.
bool seed_complete(const ExperimentConfig& config, std::uint64_t seed, const std::string& dir);

// One subdirectory seed_<n> per seed under root/name. jobs > 1 runs seeds as
// separate processes.
std::vector<SeedOutcome> run_experiment(const ExperimentConfig& config, const std::string& root,
                                        int jobs = 1, const Progress& progress = {});

std::string experiment_dir(const ExperimentConfig& config, const std::string& root);
std::string seed_dir(const ExperimentConfig& config, const std::string& root, std::uint64_t seed);

// Metrics files under a run directory (seed_*/metrics.csv), or the file itself.
std::vector<std::string> metrics_paths(const std::string& path);

struct PlotSeries {
  std::string label;
  std::vector<MetricsFile> runs;
};
// Dark mean curve over each series' runs with their light curves and a
// min/max band. Throws before writing anything when a file has no rows.
std::string plot_svg(const std::vector<PlotSeries>& series, const std::string& column,
                     const std::string& title = "");

struct CompareRow {
  std::string run;
  std::string algorithm;
  std::size_t seeds = 0;
  double final_mean = 0.0;
  double final_min = 0.0;
  double final_max = 0.0;
  double best = 0.0;
  // Per seed; absent when the threshold was never reached.
  std::vector<std::optional<std::int64_t>> steps_to_threshold;
};
CompareRow summarize_run(const std::string& run, const std::vector<MetricsFile>& files, double threshold);
std::string format_compare(const std::vector<CompareRow>& rows, double threshold);

}  // namespace dtsil::harness
