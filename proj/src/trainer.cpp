#include "dtsil/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

#include "dtsil/error.hpp"

namespace dtsil {

using ad::Shape;
using ad::Tensor;

// ---- algorithms -------------------------------------------------------------

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kDtsil: return "dtsil";
    case Algorithm::kDtsilExp: return "dtsil_exp";
    case Algorithm::kPpo: return "ppo";
    case Algorithm::kPpoExp: return "ppo_exp";
    case Algorithm::kPpoSil: return "ppo_sil";
    case Algorithm::kDtra: return "dtra";
    case Algorithm::kDtraExp: return "dtra_exp";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& name) {
  for (Algorithm a : {Algorithm::kDtsil, Algorithm::kDtsilExp, Algorithm::kPpo, Algorithm::kPpoExp,
                      Algorithm::kPpoSil, Algorithm::kDtra, Algorithm::kDtraExp})
    if (algorithm_name(a) == name) return a;
  throw ConfigError("unknown algorithm '" + name + "'");
}

bool uses_demonstrations(Algorithm a) {
  return a == Algorithm::kDtsil || a == Algorithm::kDtsilExp || a == Algorithm::kDtra || a == Algorithm::kDtraExp;
}
bool uses_conditioned_policy(Algorithm a) { return a == Algorithm::kDtsil || a == Algorithm::kDtsilExp; }
bool learns(Algorithm a) { return a != Algorithm::kDtra; }
bool uses_bonus(Algorithm a) {
  return a == Algorithm::kDtsilExp || a == Algorithm::kPpoExp || a == Algorithm::kDtraExp;
}

double TrainConfig::effective_bonus_scale() const {
  if (bonus_scale) return *bonus_scale;
  return algorithm == Algorithm::kPpoExp ? 0.1 : 1.0;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid train config: " + what);
  };
  require(total_steps > 0, "total_steps must be positive");
  require(workers > 0, "workers must be positive");
  require(rollout_steps > 0, "rollout_steps must be positive");
  require(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
  require(nstep >= 0, "nstep must be non-negative");
  require(!gae_lambda || (*gae_lambda >= 0.0 && *gae_lambda <= 1.0), "gae_lambda must be in [0, 1]");
  require(clip > 0.0, "clip must be positive");
  require(epochs > 0, "epochs must be positive");
  require(minibatches > 0, "minibatches must be positive");
  require(entropy_coef >= 0.0, "entropy_coef must be non-negative");
  require(value_coef > 0.0, "value_coef must be positive");
  require(lr > 0.0, "lr must be positive");
  require(max_grad_norm > 0.0, "max_grad_norm must be positive");
  require(sl_coef > 0.0, "sl_coef must be positive");
  require(sl_batch > 0, "sl_batch must be positive");
  require(sil_batch > 0, "sil_batch must be positive");
  require(sil_capacity > 0, "sil_capacity must be positive");
  require(sil_coef > 0.0, "sil_coef must be positive");
  require(sil_value_coef >= 0.0, "sil_value_coef must be non-negative");
  require(p_start >= 0.0 && p_start <= 1.0, "p_start must be in [0, 1]");
  require(p_end >= 0.0 && p_end <= 1.0, "p_end must be in [0, 1]");
  require(p_decay_fraction > 0.0 && p_decay_fraction <= 1.0, "p_decay_fraction must be in (0, 1]");
  require(effective_bonus_scale() >= 0.0, "bonus_scale must be non-negative");
  require(buffer.delta >= 0.0, "buffer delta must be non-negative");
  require(buffer.top_k > 0, "top_k must be positive");
  require(tracker.window >= 1, "window must be at least 1");
  require(tracker.r_im >= 0.0, "r_im must be non-negative");
  require(policy.agent_hidden > 0 && policy.demo_hidden > 0 && policy.attention_dim > 0 &&
              policy.proj_dim > 0 && policy.head_hidden > 0 && policy.max_demo_len > 0,
          "network sizes must be positive");
}

double exploration_probability(const TrainConfig& config, std::int64_t steps) {
  const double horizon = config.p_decay_fraction * static_cast<double>(config.total_steps);
  const double frac = std::min(1.0, static_cast<double>(steps) / horizon);
  return config.p_start + (config.p_end - config.p_start) * frac;
}

// ---- advantages -------------------------------------------------------------

std::vector<double> nstep_advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                                     const std::vector<char>& dones, double bootstrap, double gamma, int n) {
  const std::size_t len = rewards.size();
  if (values.size() != len || dones.size() != len) throw ShapeError("advantage inputs differ in length");
  const std::size_t window = n <= 0 ? len : static_cast<std::size_t>(n);
  std::vector<double> adv(len);
  for (std::size_t t = 0; t < len; ++t) {
    double g = 0.0, discount = 1.0;
    std::size_t k = 0;
    bool terminal = false;
    while (k < window && t + k < len) {
      g += discount * rewards[t + k];
      discount *= gamma;
      ++k;
      if (dones[t + k - 1]) {
        terminal = true;
        break;
      }
    }
    if (!terminal) g += discount * (t + k < len ? values[t + k] : bootstrap);
    adv[t] = g - values[t];
  }
  return adv;
}

std::vector<double> gae_advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                                   const std::vector<char>& dones, double bootstrap, double gamma,
                                   double lambda) {
  const std::size_t len = rewards.size();
  if (values.size() != len || dones.size() != len) throw ShapeError("advantage inputs differ in length");
  std::vector<double> adv(len);
  double running = 0.0;
  for (std::size_t i = len; i-- > 0;) {
    const double next_v = dones[i] ? 0.0 : (i + 1 < len ? values[i + 1] : bootstrap);
    const double delta = rewards[i] + gamma * next_v - values[i];
    running = delta + (dones[i] ? 0.0 : gamma * lambda * running);
    adv[i] = running;
  }
  return adv;
}

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> out(rewards.size());
  double g = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    g = rewards[i] + gamma * g;
    out[i] = g;
  }
  return out;
}

// ---- losses -----------------------------------------------------------------

namespace {

Tensor column(ad::Tape& tape, const std::vector<double>& v) {
  return tape.constant(Shape::matrix(v.size(), 1), v);
}

}  // namespace

PpoTerms ppo_terms(const Tensor& log_probs, const Tensor& values, const std::vector<std::size_t>& actions,
                   const std::vector<double>& old_log_probs, const std::vector<double>& old_values,
                   const std::vector<double>& advantages, const std::vector<double>& returns, double clip) {
  ad::Tape& tape = log_probs.tape();
  const std::size_t n = actions.size();
  if (log_probs.rows() != n || values.rows() != n || old_log_probs.size() != n || old_values.size() != n ||
      advantages.size() != n || returns.size() != n)
    throw ShapeError("ppo_terms inputs differ in length");
  PpoTerms out;
  Tensor lp = ad::pick(log_probs, actions);
  Tensor adv = column(tape, advantages);
  Tensor ratio = ad::exp(ad::sub(lp, column(tape, old_log_probs)));
  Tensor s1 = ad::mul(ratio, adv);
  Tensor s2 = ad::mul(ad::clip_by_value(ratio, 1.0 - clip, 1.0 + clip), adv);
  out.policy_loss = ad::neg(ad::mean(ad::minimum(s1, s2)));

  Tensor old_v = column(tape, old_values);
  Tensor ret = column(tape, returns);
  Tensor v_clipped = ad::add(old_v, ad::clip_by_value(ad::sub(values, old_v), -clip, clip));
  Tensor e1 = ad::sub(values, ret);
  Tensor e2 = ad::sub(v_clipped, ret);
  out.value_loss = ad::scale(ad::mean(ad::maximum(ad::mul(e1, e1), ad::mul(e2, e2))), 0.5);
  out.entropy = ad::scale(ad::sum(ad::mul(ad::exp(log_probs), log_probs)), -1.0 / static_cast<double>(n));

  std::size_t clipped = 0;
  double kl = 0.0;
  const auto r = ratio.values();
  const auto l = lp.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(r[i] - 1.0) > clip) ++clipped;
    kl += old_log_probs[i] - l[i];
  }
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  out.approx_kl = kl / static_cast<double>(n);
  return out;
}

SilTerms sil_terms(const Tensor& log_probs, const Tensor& values, const std::vector<std::size_t>& actions,
                   const std::vector<double>& returns) {
  ad::Tape& tape = log_probs.tape();
  const std::size_t n = actions.size();
  if (log_probs.rows() != n || values.rows() != n || returns.size() != n)
    throw ShapeError("sil_terms inputs differ in length");
  std::vector<double> weight(n);
  const auto v = values.values();
  for (std::size_t i = 0; i < n; ++i) weight[i] = std::max(returns[i] - v[i], 0.0);
  SilTerms out;
  Tensor lp = ad::pick(log_probs, actions);
  out.policy_loss = ad::neg(ad::mean(ad::mul(lp, column(tape, weight))));
  Tensor gap = ad::maximum(ad::sub(column(tape, returns), values), column(tape, std::vector<double>(n, 0.0)));
  out.value_loss = ad::scale(ad::mean(ad::mul(gap, gap)), 0.5);
  return out;
}

// ---- rollout state ----------------------------------------------------------

struct Trainer::Segment {
  FeatureRows obs, emb;
  std::vector<char> reset, done;
  std::vector<int> demo;
  std::vector<std::size_t> actions;
  std::vector<double> rewards, values, log_probs;
  std::vector<double> h0;
  double bootstrap = 0.0;
  std::vector<FeatureRows> demos;
  std::vector<double> advantages, returns;

  std::size_t size() const { return actions.size(); }
};

namespace {
enum class Phase { kRandom, kPolicy, kReplay };
}

struct Trainer::Worker {
  std::unique_ptr<env::Environment> env;
  Rng rng;
  std::unique_ptr<PolicyRunner> runner;

  bool in_episode = false;
  env::Step current;
  Trajectory episode;
  EpisodeRecord record;
  Phase phase = Phase::kRandom;
  bool tracking = false;
  DemoTracker tracker;
  std::vector<int> replay;
  std::size_t replay_pos = 0;
  bool replay_done = false;
  bool has_demo = false;
  FeatureRows demo_features;
  int demo_slot = -1;
  std::vector<double> hidden;
  bool pending_reset = true;

  Segment seg;
  std::vector<std::pair<Trajectory, EpisodeRecord>> finished;
  std::exception_ptr error;
};

Trainer::Trainer(TrainConfig config, const env::Environment& prototype)
    : config_(std::move(config)), prototype_(prototype.clone()), buffer_(config_.buffer),
      rng_(Rng::stream(config_.seed, 0)) {
  config_.policy.obs_dim = prototype_->obs_feature_size();
  config_.policy.emb_dim = prototype_->embedding_feature_size();
  config_.policy.num_actions = static_cast<std::size_t>(prototype_->num_actions());
  config_.policy.conditioned = uses_conditioned_policy(config_.algorithm);
  config_.validate();
  if (learns(config_.algorithm)) {
    policy_ = std::make_unique<TrajectoryPolicy>(config_.policy, splitmix64(config_.seed ^ 0x706f6c696379ULL));
    adam_ = std::make_unique<ad::Adam>(policy_->params());
  }
  for (int i = 0; i < config_.workers; ++i) {
    auto w = std::make_unique<Worker>();
    w->env = prototype_->clone();
    w->rng = Rng::stream(config_.seed, static_cast<std::uint64_t>(i) + 1);
    if (policy_) {
      w->runner = std::make_unique<PolicyRunner>(*policy_);
      w->hidden = w->runner->initial_hidden();
    }
    workers_.push_back(std::move(w));
  }
}

Trainer::~Trainer() = default;

FeatureRows Trainer::obs_rows(const Trajectory& t, std::size_t count) const {
  FeatureRows rows;
  rows.reserve(count);
  for (std::size_t i = 0; i < count; ++i) rows.push_back(prototype_->obs_features(t.obs[i]));
  return rows;
}

FeatureRows Trainer::embedding_rows(const std::vector<env::Embedding>& es, std::size_t count) const {
  FeatureRows rows;
  rows.reserve(count);
  for (std::size_t i = 0; i < count; ++i) rows.push_back(prototype_->embedding_features(es[i]));
  return rows;
}

double Trainer::recent_mean() const {
  if (recent_.empty()) return 0.0;
  return std::accumulate(recent_.begin(), recent_.end(), 0.0) / static_cast<double>(recent_.size());
}

double Trainer::current_lr() const {
  if (!config_.lr_decay) return config_.lr;
  const double frac = static_cast<double>(steps_) / static_cast<double>(config_.total_steps);
  return config_.lr * std::max(0.0, 1.0 - frac);
}

void Trainer::start_episode(Worker& w, double p, std::int64_t start_step) {
  const Algorithm algo = config_.algorithm;
  w.current = w.env->reset(w.rng);
  w.episode = Trajectory{};
  w.episode.start(w.current);
  w.in_episode = true;
  w.record = EpisodeRecord{};
  w.record.start_step = start_step;
  if (w.runner) w.hidden = w.runner->initial_hidden();
  w.pending_reset = true;
  w.tracking = false;
  w.has_demo = false;
  w.replay.clear();
  w.replay_pos = 0;
  w.replay_done = false;

  if (!uses_demonstrations(algo)) {
    w.phase = Phase::kPolicy;
    return;
  }
  if (buffer_.empty()) {
    w.phase = Phase::kRandom;
    return;
  }
  const DemoSample sample = buffer_.sample_demonstration(p, w.rng);
  w.record.mode = sample.mode == SampleMode::kExplore ? 0 : 1;
  const Trajectory& demo = buffer_.entry(sample.index).best;
  if (uses_conditioned_policy(algo)) {
    w.tracker = DemoTracker(demo.embeddings, config_.tracker);
    w.tracker.observe_initial(w.current.embedding);
    w.tracking = true;
    w.demo_features = embedding_rows(demo.embeddings, demo.embeddings.size());
    w.runner->set_demo(w.demo_features);
    w.has_demo = true;
    w.seg.demos.push_back(w.demo_features);
    w.demo_slot = static_cast<int>(w.seg.demos.size()) - 1;
    w.phase = Phase::kPolicy;
    if (algo == Algorithm::kDtsil && w.tracker.finished()) w.phase = Phase::kRandom;
    return;
  }
  w.replay = demo.actions;
  w.phase = Phase::kReplay;
  if (w.replay.empty()) {
    w.replay_done = true;
    w.phase = algo == Algorithm::kDtraExp ? Phase::kPolicy : Phase::kRandom;
  }
}

void Trainer::run_worker(Worker& w, double p, std::int64_t start_step) {
  const Algorithm algo = config_.algorithm;
  const double bonus_scale = config_.effective_bonus_scale();
  const bool bonus = uses_bonus(algo);
  w.seg = Segment{};
  w.finished.clear();
  if (w.runner) w.runner->sync();
  if (w.in_episode && w.phase == Phase::kPolicy) {
    w.seg.h0 = w.hidden;
    if (w.has_demo) {
      w.seg.demos.push_back(w.demo_features);
      w.demo_slot = 0;
    }
  } else {
    w.seg.h0.assign(config_.policy.agent_hidden, 0.0);
  }

  const int num_actions = w.env->num_actions();
  std::vector<double> probs(static_cast<std::size_t>(num_actions));
  for (int step = 0; step < config_.rollout_steps; ++step) {
    if (!w.in_episode) start_episode(w, p, start_step);
    int action = 0;
    bool recorded = false;
    if (w.phase == Phase::kPolicy) {
      std::vector<double> of = w.env->obs_features(w.current.obs);
      std::vector<double> ef = w.env->embedding_features(w.current.embedding);
      StepOutput out = w.runner->step(of, ef, w.hidden);
      for (std::size_t a = 0; a < probs.size(); ++a) probs[a] = std::exp(out.log_probs[a]);
      action = static_cast<int>(w.rng.categorical(probs));
      Segment& s = w.seg;
      s.obs.push_back(std::move(of));
      s.emb.push_back(std::move(ef));
      s.reset.push_back(w.pending_reset);
      s.demo.push_back(w.has_demo ? w.demo_slot : -1);
      s.actions.push_back(static_cast<std::size_t>(action));
      s.values.push_back(out.value);
      s.log_probs.push_back(out.log_probs[static_cast<std::size_t>(action)]);
      w.pending_reset = false;
      w.hidden = std::move(out.hidden);
      recorded = true;
    } else if (w.phase == Phase::kReplay) {
      action = w.replay[w.replay_pos++];
    } else {
      action = static_cast<int>(w.rng.below(static_cast<std::uint64_t>(num_actions)));
    }

    env::Step next = w.env->step(action);
    w.episode.append(action, next);

    if (recorded) {
      const double b = bonus ? count_bonus(buffer_.visitation_count(next.embedding), bonus_scale) : 0.0;
      bool learn_done = next.done;
      double r = 0.0;
      if (w.tracking) {
        r = w.tracker.shape_reward(next.embedding, next.reward, b).reward;
        if (algo == Algorithm::kDtsil && w.tracker.finished()) {
          learn_done = true;
          w.phase = Phase::kRandom;
        }
      } else {
        r = clip_reward(next.reward) + b;
      }
      w.seg.rewards.push_back(r);
      w.seg.done.push_back(learn_done);
    }
    if (w.phase == Phase::kReplay && w.replay_pos == w.replay.size()) {
      w.replay_done = true;
      if (algo == Algorithm::kDtraExp) {
        w.phase = Phase::kPolicy;
        w.hidden = w.runner->initial_hidden();
        w.pending_reset = true;
      } else {
        w.phase = Phase::kRandom;
      }
    }
    w.current = std::move(next);
    if (w.current.done) {
      w.record.env_return = w.episode.total_return();
      w.record.length = w.episode.length();
      w.record.finished_demo = w.tracking ? w.tracker.finished() : w.replay_done;
      w.finished.emplace_back(std::move(w.episode), w.record);
      w.episode = Trajectory{};
      w.in_episode = false;
    }
  }

  Segment& s = w.seg;
  if (s.size() > 0 && !s.done.back() && w.in_episode && w.phase == Phase::kPolicy) {
    StepOutput out = w.runner->step(w.env->obs_features(w.current.obs),
                                    w.env->embedding_features(w.current.embedding), w.hidden);
    s.bootstrap = out.value;
  }
}

// ---- updates ----------------------------------------------------------------

bool Trainer::apply(const ad::ParamGrads& grads, double lr) {
  for (const auto& g : grads)
    for (double x : g)
      if (!std::isfinite(x)) return false;
  ad::ParamGrads clipped = grads;
  ad::clip_by_global_norm(clipped, config_.max_grad_norm);
  adam_->step(policy_->params(), clipped, lr);
  return true;
}

PpoStats Trainer::ppo_update(std::vector<Segment*>& segs, double lr) {
  PpoStats stats;
  std::vector<Segment*> order;
  for (Segment* s : segs)
    if (s->size() > 0) order.push_back(s);
  if (order.empty()) return stats;
  const std::size_t nmb = std::min(static_cast<std::size_t>(config_.minibatches), order.size());
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.below(i)]);
    for (std::size_t mb = 0; mb < nmb; ++mb) {
      const std::size_t lo = mb * order.size() / nmb, hi = (mb + 1) * order.size() / nmb;
      std::vector<Sequence> seqs;
      std::vector<FeatureRows> demos;
      for (std::size_t k = lo; k < hi; ++k) {
        const Segment& s = *order[k];
        const int offset = static_cast<int>(demos.size());
        demos.insert(demos.end(), s.demos.begin(), s.demos.end());
        Sequence q;
        q.obs = s.obs;
        q.emb = s.emb;
        q.h0 = s.h0;
        q.reset = s.reset;
        for (int d : s.demo) q.demo.push_back(d < 0 ? -1 : d + offset);
        q.active.assign(s.size(), 1);
        seqs.push_back(std::move(q));
      }
      try {
        ad::Tape tape;
        ad::Binding b(tape, policy_->params());
        SequenceOutput out = policy_->forward_sequences(tape, b, seqs, demos);
        std::vector<std::size_t> actions;
        std::vector<double> old_lp, old_v, adv, ret;
        for (const StepRef& r : out.order) {
          const Segment& s = *order[lo + r.seq];
          actions.push_back(s.actions[r.t]);
          old_lp.push_back(s.log_probs[r.t]);
          old_v.push_back(s.values[r.t]);
          adv.push_back(s.advantages[r.t]);
          ret.push_back(s.returns[r.t]);
        }
        PpoTerms terms = ppo_terms(out.log_probs, out.values, actions, old_lp, old_v, adv, ret, config_.clip);
        Tensor loss = ad::add(ad::add(terms.policy_loss, ad::scale(terms.value_loss, config_.value_coef)),
                              ad::scale(terms.entropy, -config_.entropy_coef));
        ad::ParamGrads grads = b.grads(tape.backward(loss));
        if (!apply(grads, lr)) {
          ++stats.aborted;
          continue;
        }
        stats.policy_loss += terms.policy_loss.item();
        stats.value_loss += terms.value_loss.item();
        stats.entropy += terms.entropy.item();
        stats.clip_fraction += terms.clip_fraction;
        stats.approx_kl += terms.approx_kl;
        ++stats.updates;
      } catch (const NonFiniteError&) {
        ++stats.aborted;
      }
    }
  }
  if (stats.updates > 0) {
    const double n = stats.updates;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
    stats.approx_kl /= n;
  }
  return stats;
}

Tensor Trainer::sl_loss(ad::Tape& tape, const ad::Binding& b, const std::vector<const Trajectory*>& trajs) const {
  if (!policy_ || !policy_->config().conditioned) throw Error("sl_loss needs a conditioned policy");
  std::vector<Sequence> seqs;
  std::vector<FeatureRows> demos;
  std::vector<const Trajectory*> used;
  for (const Trajectory* t : trajs) {
    const std::size_t len = t->length();
    if (len == 0) continue;
    Sequence q;
    q.obs = obs_rows(*t, len);
    q.emb = embedding_rows(t->embeddings, len);
    q.h0.assign(policy_->config().agent_hidden, 0.0);
    q.reset.assign(len, 0);
    q.reset[0] = 1;
    q.demo.assign(len, static_cast<int>(demos.size()));
    q.active.assign(len, 1);
    demos.push_back(embedding_rows(t->embeddings, t->embeddings.size()));
    seqs.push_back(std::move(q));
    used.push_back(t);
  }
  if (seqs.empty()) return tape.constant(Shape::scalar(), {0.0});
  SequenceOutput out = policy_->forward_sequences(tape, b, seqs, demos);
  std::vector<std::size_t> actions;
  for (const StepRef& r : out.order) actions.push_back(static_cast<std::size_t>(used[r.seq]->actions[r.t]));
  return ad::scale(ad::sum(ad::pick(out.log_probs, actions)), -1.0 / static_cast<double>(trajs.size()));
}

double Trainer::sl_update(const std::vector<const Trajectory*>& trajs) {
  try {
    ad::Tape tape;
    ad::Binding b(tape, policy_->params());
    Tensor loss = sl_loss(tape, b, trajs);
    const double value = loss.item();
    if (!loss.requires_grad()) return value;
    ad::ParamGrads grads = b.grads(tape.backward(ad::scale(loss, config_.sl_coef)));
    apply(grads, current_lr());
    return value;
  } catch (const NonFiniteError&) {
    return std::nan("");
  }
}

double Trainer::sil_update(const std::vector<const Trajectory*>& trajs) {
  std::vector<Sequence> seqs;
  std::vector<const Trajectory*> used;
  std::vector<std::vector<double>> rets;
  for (const Trajectory* t : trajs) {
    const std::size_t len = t->length();
    if (len == 0) continue;
    Sequence q;
    q.obs = obs_rows(*t, len);
    q.emb = embedding_rows(t->embeddings, len);
    q.h0.assign(policy_->config().agent_hidden, 0.0);
    q.reset.assign(len, 0);
    q.reset[0] = 1;
    q.demo.assign(len, -1);
    q.active.assign(len, 1);
    std::vector<double> clipped;
    for (double r : t->rewards) clipped.push_back(clip_reward(r));
    rets.push_back(discounted_returns(clipped, config_.gamma));
    seqs.push_back(std::move(q));
    used.push_back(t);
  }
  if (seqs.empty()) return 0.0;
  try {
    ad::Tape tape;
    ad::Binding b(tape, policy_->params());
    SequenceOutput out = policy_->forward_sequences(tape, b, seqs, {});
    std::vector<std::size_t> actions;
    std::vector<double> returns;
    for (const StepRef& r : out.order) {
      actions.push_back(static_cast<std::size_t>(used[r.seq]->actions[r.t]));
      returns.push_back(rets[r.seq][r.t]);
    }
    SilTerms terms = sil_terms(out.log_probs, out.values, actions, returns);
    Tensor loss = ad::scale(ad::add(terms.policy_loss, ad::scale(terms.value_loss, config_.sil_value_coef)),
                            config_.sil_coef);
    ad::ParamGrads grads = b.grads(tape.backward(loss));
    apply(grads, current_lr());
    return loss.item();
  } catch (const NonFiniteError&) {
    return std::nan("");
  }
}

void Trainer::add_to_sil(const Trajectory& t) {
  auto better = [](const Trajectory& a, const Trajectory& b) {
    const double ra = a.total_return(), rb = b.total_return();
    if (ra > rb + TrajectoryBuffer::kReturnTolerance) return true;
    if (rb > ra + TrajectoryBuffer::kReturnTolerance) return false;
    return a.length() < b.length();
  };
  if (sil_replay_.size() >= config_.sil_capacity && !better(t, sil_replay_.back())) return;
  auto pos = std::upper_bound(sil_replay_.begin(), sil_replay_.end(), t,
                              [&](const Trajectory& x, const Trajectory& y) { return better(x, y); });
  sil_replay_.insert(pos, t);
  if (sil_replay_.size() > config_.sil_capacity) sil_replay_.pop_back();
}

IterationReport Trainer::iterate() {
  const double p = exploration_probability(config_, steps_);
  const std::int64_t start = steps_;
  const int nw = static_cast<int>(workers_.size());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < nw; ++i) {
    Worker& w = *workers_[static_cast<std::size_t>(i)];
    try {
      run_worker(w, p, start);
    } catch (...) {
      w.error = std::current_exception();
    }
  }
  for (auto& w : workers_)
    if (w->error) {
      auto e = w->error;
      w->error = nullptr;
      std::rethrow_exception(e);
    }
  steps_ += static_cast<std::int64_t>(config_.workers) * config_.rollout_steps;
  ++iteration_;

  IterationReport rep;
  std::size_t demo_eps = 0, explore_eps = 0;
  for (auto& w : workers_) {
    for (auto& [traj, rec] : w->finished) {
      buffer_.update_with_trajectory(traj);
      episodes_.push_back(rec);
      recent_.push_back(rec.env_return);
      if (recent_.size() > kRecentWindow) recent_.pop_front();
      best_ = any_episode_ ? std::max(best_, rec.env_return) : rec.env_return;
      any_episode_ = true;
      if (rec.mode >= 0) {
        ++demo_eps;
        if (rec.mode == 0) ++explore_eps;
      }
      if (config_.algorithm == Algorithm::kPpoSil) add_to_sil(traj);
    }
  }

  const double lr = current_lr();
  if (learns(config_.algorithm)) {
    std::vector<Segment*> segs;
    for (auto& w : workers_) segs.push_back(&w->seg);
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (Segment* s : segs) {
      if (s->size() == 0) continue;
      s->advantages = config_.gae_lambda
                          ? gae_advantages(s->rewards, s->values, s->done, s->bootstrap, config_.gamma, *config_.gae_lambda)
                          : nstep_advantages(s->rewards, s->values, s->done, s->bootstrap, config_.gamma, config_.nstep);
      s->returns.resize(s->size());
      for (std::size_t t = 0; t < s->size(); ++t) {
        s->returns[t] = s->advantages[t] + s->values[t];
        sum += s->advantages[t];
        sq += s->advantages[t] * s->advantages[t];
      }
      count += s->size();
    }
    if (count > 0) {
      const double mean = sum / static_cast<double>(count);
      const double sd = std::sqrt(std::max(0.0, sq / static_cast<double>(count) - mean * mean));
      for (Segment* s : segs)
        for (double& a : s->advantages) a = (a - mean) / (sd + 1e-8);
      rep.ppo = ppo_update(segs, lr);
    }
    if (uses_conditioned_policy(config_.algorithm) && buffer_.size() >= config_.sl_warmup) {
      std::vector<const Trajectory*> batch;
      for (int i = 0; i < config_.sl_batch; ++i) batch.push_back(&buffer_.entry(rng_.below(buffer_.size())).best);
      rep.sl_loss = sl_update(batch);
    }
    if (config_.algorithm == Algorithm::kPpoSil && !sil_replay_.empty()) {
      std::vector<const Trajectory*> batch;
      for (int i = 0; i < config_.sil_batch; ++i) batch.push_back(&sil_replay_[rng_.below(sil_replay_.size())]);
      rep.sil_loss = sil_update(batch);
    }
  }

  rep.iteration = iteration_;
  rep.env_steps = steps_;
  rep.episodes = static_cast<std::int64_t>(episodes_.size());
  rep.recent_mean = recent_mean();
  rep.best_return = any_episode_ ? best_ : 0.0;
  rep.buffer_size = buffer_.size();
  rep.explore_fraction = demo_eps ? static_cast<double>(explore_eps) / static_cast<double>(demo_eps) : 0.0;
  rep.p = p;
  rep.lr = lr;
  return rep;
}

}  // namespace dtsil
