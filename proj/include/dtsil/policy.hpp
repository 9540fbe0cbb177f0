#pragma once

// Trajectory-conditioned recurrent policy and its unconditioned sibling.
//
// Conditioned: a demo-encoder GRU turns the demonstration's embedding
// sequence into features h^g_i; an agent GRU consumes projected
// observation/embedding inputs; additive attention over h^g reads out c_t;
// the action and value heads see h_t concatenated with c_t.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dtsil/nn.hpp"
#include "dtsil/params.hpp"

namespace dtsil {

struct PolicyConfig {
  std::size_t obs_dim = 0;
  std::size_t emb_dim = 0;
  std::size_t num_actions = 0;
  bool conditioned = true;
  std::size_t demo_hidden = 64;
  std::size_t agent_hidden = 64;
  std::size_t attention_dim = 64;
  std::size_t proj_dim = 32;
  std::size_t head_hidden = 64;
  // In transitions; longer demonstrations keep their tail.
  std::size_t max_demo_len = 200;
};

using FeatureRows = std::vector<std::vector<double>>;

// One contiguous run of policy steps from a single worker (or one stored
// trajectory), in feature space.
struct Sequence {
  FeatureRows obs;
  FeatureRows emb;
  std::vector<double> h0;
  // reset[t]: hidden state is zeroed before step t.
  std::vector<char> reset;
  // demo[t]: index into the demo list, -1 when unconditioned at this step.
  std::vector<int> demo;
  // active[t]: the step's outputs are needed.
  std::vector<char> active;

  std::size_t size() const { return obs.size(); }
};

struct StepRef {
  std::size_t seq = 0;
  std::size_t t = 0;
};

// Differentiable outputs for every active step, in `order`.
struct SequenceOutput {
  ad::Tensor log_probs;  // N x |A|
  ad::Tensor values;     // N x 1
  std::vector<StepRef> order;
};

struct StepOutput {
  std::vector<double> logits;
  std::vector<double> log_probs;
  double value = 0.0;
  std::vector<double> alpha;
  std::vector<double> hidden;
};

class TrajectoryPolicy {
 public:
  TrajectoryPolicy(PolicyConfig config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  ad::ParamSet& params() { return params_; }
  const ad::ParamSet& params() const { return params_; }

  // Embedding rows g_0..g_|g| with the front dropped beyond max_demo_len.
  FeatureRows truncate_demo(const FeatureRows& demo) const;

  // h^g rows (|g|+1) x Hd and attention keys (|g|+1) x A for each demo.
  struct DemoTensors {
    ad::Tensor hidden;
    ad::Tensor keys;
  };
  std::vector<DemoTensors> encode_demos(const ad::Binding& b, const std::vector<FeatureRows>& demos) const;

  SequenceOutput forward_sequences(ad::Tape& tape, const ad::Binding& b,
                                   const std::vector<Sequence>& seqs,
                                   const std::vector<FeatureRows>& demos) const;

  // Single-row pieces used by the runner.
  ad::Tensor input_rows(const ad::Binding& b, ad::Tape& tape, const FeatureRows& obs,
                        const FeatureRows& emb) const;
  ad::Tensor attend(const ad::Binding& b, const ad::Tensor& h, const DemoTensors& demo,
                    ad::Tensor* alpha) const;
  void heads(const ad::Binding& b, const ad::Tensor& features, ad::Tensor* log_probs,
             ad::Tensor* values, ad::Tensor* logits = nullptr) const;

  const nn::Gru& agent_gru() const { return agent_gru_; }

  void save(const std::string& dir) const;
  void load(const std::string& dir);

 private:
  PolicyConfig config_;
  ad::ParamSet params_;
  nn::Linear obs_proj_, emb_proj_;
  nn::Gru agent_gru_;
  nn::Gru demo_gru_;
  std::size_t att_q_ = 0, att_k_ = 0, att_kb_ = 0, att_v_ = 0;
  nn::Linear head_, logits_, value_;
};

// Grad-free inference for one worker. Parameters and the current
// demonstration encoding are placed on a private tape once; each step rewinds
// back to that prefix.
class PolicyRunner {
 public:
  explicit PolicyRunner(const TrajectoryPolicy& policy);

  // Re-reads parameters (and re-encodes the demo) after an update.
  void sync();
  void set_demo(const FeatureRows& demo);
  void clear_demo();
  bool has_demo() const { return has_demo_; }

  // With a demo set: conditioned step. Without: unconditioned step (only
  // valid for unconditioned policies).
  StepOutput step(const std::vector<double>& obs, const std::vector<double>& emb,
                  const std::vector<double>& hidden);

  std::vector<double> initial_hidden() const;

 private:
  void rebuild();

  const TrajectoryPolicy* policy_;
  ad::Tape tape_;
  std::unique_ptr<ad::Binding> binding_;
  FeatureRows demo_;
  bool has_demo_ = false;
  TrajectoryPolicy::DemoTensors demo_tensors_;
  std::size_t mark_ = 0;
};

}  // namespace dtsil
