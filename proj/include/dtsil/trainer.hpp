#pragma once

// The learning loop: sample a demonstration, roll out with shaped rewards,
// update the trajectory buffer, then PPO (+ supervised or SIL) updates.
// Also the PPO, PPO+EXP, PPO+SIL, DTRA and DTRA+EXP baselines.

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dtsil/buffer.hpp"
#include "dtsil/envs.hpp"
#include "dtsil/imitation.hpp"
#include "dtsil/policy.hpp"

namespace dtsil {

enum class Algorithm { kDtsil, kDtsilExp, kPpo, kPpoExp, kPpoSil, kDtra, kDtraExp };

std::string algorithm_name(Algorithm a);
// Throws ConfigError on an unknown name.
Algorithm parse_algorithm(const std::string& name);

bool uses_demonstrations(Algorithm a);
bool uses_conditioned_policy(Algorithm a);
bool learns(Algorithm a);
bool uses_bonus(Algorithm a);

struct TrainConfig {
  Algorithm algorithm = Algorithm::kDtsil;
  std::uint64_t seed = 0;
  std::int64_t total_steps = 1'000'000;

  int workers = 8;
  int rollout_steps = 128;
  double gamma = 0.99;
  // Advantage lookahead in steps; 0 uses the whole rollout segment.
  int nstep = 0;
  // GAE(lambda) when set; plain n-step advantages otherwise.
  std::optional<double> gae_lambda;

  double clip = 0.2;
  int epochs = 4;
  int minibatches = 4;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double lr = 2.5e-4;
  bool lr_decay = true;
  double max_grad_norm = 0.5;

  // Supervised objective on buffer trajectories.
  double sl_coef = 0.1;
  int sl_batch = 16;
  std::size_t sl_warmup = 5;

  // Self-imitation baseline.
  int sil_batch = 16;
  std::size_t sil_capacity = 64;
  double sil_coef = 1.0;
  double sil_value_coef = 0.01;

  // Exploration-mode probability: linear from p_start to p_end over the
  // first p_decay_fraction of total_steps.
  double p_start = 1.0;
  double p_end = 0.2;
  double p_decay_fraction = 0.5;

  // Count bonus scale; unset picks 1 for the DTSIL/DTRA variants and 0.1
  // for PPO+EXP.
  std::optional<double> bonus_scale;

  BufferConfig buffer;
  TrackerConfig tracker;
  PolicyConfig policy;

  double effective_bonus_scale() const;
  // Throws ConfigError describing the first invalid field.
  void validate() const;
};

double exploration_probability(const TrainConfig& config, std::int64_t steps);

// Â_t = sum_{d<k} γ^d r_{t+d} + γ^k V_{t+k} − V_t, with k = min(n, steps to the
// end of the segment, steps to the first done). No bootstrap past a done;
// V at the segment end is `bootstrap`. n = 0 means unbounded.
std::vector<double> nstep_advantages(const std::vector<double>& rewards,
                                     const std::vector<double>& values,
                                     const std::vector<char>& dones, double bootstrap,
                                     double gamma, int n = 0);
std::vector<double> gae_advantages(const std::vector<double>& rewards,
                                   const std::vector<double>& values,
                                   const std::vector<char>& dones, double bootstrap,
                                   double gamma, double lambda);

// Loss pieces, exposed for testing.
struct PpoTerms {
  ad::Tensor policy_loss;
  ad::Tensor value_loss;
  ad::Tensor entropy;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};
// log_probs: N x |A| (new), picked by `actions`; old values per row.
PpoTerms ppo_terms(const ad::Tensor& log_probs, const ad::Tensor& values,
                   const std::vector<std::size_t>& actions, const std::vector<double>& old_log_probs,
                   const std::vector<double>& old_values, const std::vector<double>& advantages,
                   const std::vector<double>& returns, double clip);

struct SilTerms {
  ad::Tensor policy_loss;  // −mean(log π(a|s) · (R − V)+), weight held constant
  ad::Tensor value_loss;   // 0.5 · mean((R − V)+²)
};
SilTerms sil_terms(const ad::Tensor& log_probs, const ad::Tensor& values,
                   const std::vector<std::size_t>& actions, const std::vector<double>& returns);

// Discounted returns of f(r) to the end of a complete episode.
std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma);

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  int updates = 0;
  int aborted = 0;
};

struct EpisodeRecord {
  std::int64_t start_step = 0;
  double env_return = 0.0;
  std::size_t length = 0;
  // -1: no demonstration (empty buffer or no demo algorithm).
  int mode = -1;  // 0 explore, 1 exploit
  bool finished_demo = false;
};

struct IterationReport {
  std::int64_t iteration = 0;
  std::int64_t env_steps = 0;
  std::int64_t episodes = 0;
  double recent_mean = 0.0;
  double best_return = 0.0;
  std::size_t buffer_size = 0;
  double explore_fraction = 0.0;
  double p = 0.0;
  double lr = 0.0;
  PpoStats ppo;
  double sl_loss = 0.0;
  double sil_loss = 0.0;
};

class Trainer {
 public:
  static constexpr std::size_t kRecentWindow = 40;

  Trainer(TrainConfig config, const env::Environment& prototype);
  ~Trainer();

  IterationReport iterate();
  bool done() const { return steps_ >= config_.total_steps; }

  const TrainConfig& config() const { return config_; }
  const env::Environment& environment() const { return *prototype_; }
  const TrajectoryBuffer& buffer() const { return buffer_; }
  TrajectoryBuffer& buffer() { return buffer_; }
  const TrajectoryPolicy* policy() const { return policy_.get(); }
  TrajectoryPolicy* policy() { return policy_.get(); }
  std::int64_t steps() const { return steps_; }
  std::int64_t iterations() const { return iteration_; }
  const std::vector<EpisodeRecord>& episodes() const { return episodes_; }
  double recent_mean() const;
  double best_return() const { return best_; }
  const std::vector<Trajectory>& sil_replay() const { return sil_replay_; }

  FeatureRows obs_rows(const Trajectory& t, std::size_t count) const;
  FeatureRows embedding_rows(const std::vector<env::Embedding>& es, std::size_t count) const;

  // Supervised loss −Σ_t log π(a_t | ..., g = τ) averaged over `trajs`
  // (unscaled by β). Requires a conditioned policy.
  ad::Tensor sl_loss(ad::Tape& tape, const ad::Binding& b, const std::vector<const Trajectory*>& trajs) const;
  double sl_update(const std::vector<const Trajectory*>& trajs);
  double sil_update(const std::vector<const Trajectory*>& trajs);

  struct Worker;

 private:
  struct Segment;

  void run_worker(Worker& w, double p, std::int64_t start_step);
  void start_episode(Worker& w, double p, std::int64_t start_step);
  PpoStats ppo_update(std::vector<Segment*>& segs, double lr);
  bool apply(const ad::ParamGrads& grads, double lr);
  double current_lr() const;
  void add_to_sil(const Trajectory& t);

  TrainConfig config_;
  std::unique_ptr<env::Environment> prototype_;
  std::unique_ptr<TrajectoryPolicy> policy_;
  std::unique_ptr<ad::Adam> adam_;
  TrajectoryBuffer buffer_;
  std::vector<std::unique_ptr<Worker>> workers_;
  Rng rng_;
  std::int64_t steps_ = 0;
  std::int64_t iteration_ = 0;
  std::vector<EpisodeRecord> episodes_;
  std::deque<double> recent_;
  double best_ = 0.0;
  bool any_episode_ = false;
  std::vector<Trajectory> sil_replay_;
};

}  // namespace dtsil
