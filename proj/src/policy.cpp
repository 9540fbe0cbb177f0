#include "dtsil/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dtsil/error.hpp"

namespace dtsil {

using ad::Shape;
using ad::Tensor;

TrajectoryPolicy::TrajectoryPolicy(PolicyConfig config, std::uint64_t seed) : config_(config) {
  if (config_.obs_dim == 0 || config_.emb_dim == 0 || config_.num_actions == 0)
    throw ConfigError("policy needs positive obs/embedding/action sizes");
  Rng rng(seed);
  const std::size_t p = config_.proj_dim;
  obs_proj_ = nn::add_linear(params_, "obs_proj", config_.obs_dim, p, rng);
  emb_proj_ = nn::add_linear(params_, "emb_proj", config_.emb_dim, p, rng);
  agent_gru_ = nn::add_gru(params_, "agent_gru", 2 * p, config_.agent_hidden, rng);
  std::size_t head_in = config_.agent_hidden;
  if (config_.conditioned) {
    demo_gru_ = nn::add_gru(params_, "demo_gru", p, config_.demo_hidden, rng);
    const std::size_t a = config_.attention_dim;
    auto draw = [&](std::size_t rows, std::size_t cols) {
      std::vector<double> w(rows * cols);
      const double sd = 1.0 / std::sqrt(static_cast<double>(rows));
      for (double& x : w) x = sd * rng.normal();
      return w;
    };
    att_q_ = params_.add("att.wq", Shape::matrix(config_.agent_hidden, a), draw(config_.agent_hidden, a));
    att_k_ = params_.add("att.wk", Shape::matrix(config_.demo_hidden, a), draw(config_.demo_hidden, a));
    att_kb_ = params_.add("att.bk", Shape::matrix(1, a), std::vector<double>(a, 0.0));
    att_v_ = params_.add("att.v", Shape::vector(a), draw(a, 1));
    head_in += config_.demo_hidden;
  }
  head_ = nn::add_linear(params_, "head", head_in, config_.head_hidden, rng, std::sqrt(2.0));
  logits_ = nn::add_linear(params_, "logits", config_.head_hidden, config_.num_actions, rng, 0.01);
  value_ = nn::add_linear(params_, "value", config_.head_hidden, 1, rng, 1.0);
}

FeatureRows TrajectoryPolicy::truncate_demo(const FeatureRows& demo) const {
  if (demo.empty()) throw Error("encode_demo: empty demonstration");
  const std::size_t keep = config_.max_demo_len + 1;
  if (demo.size() <= keep) return demo;
  return FeatureRows(demo.end() - static_cast<long>(keep), demo.end());
}

namespace {

Tensor stack_rows(ad::Tape& tape, const std::vector<const std::vector<double>*>& rows, std::size_t dim) {
  std::vector<double> v(rows.size() * dim, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) continue;
    if (rows[i]->size() != dim) throw ShapeError("feature row has the wrong width");
    std::copy(rows[i]->begin(), rows[i]->end(), v.begin() + static_cast<long>(i * dim));
  }
  return tape.constant(Shape::matrix(rows.size(), dim), std::move(v));
}

}  // namespace

Tensor TrajectoryPolicy::input_rows(const ad::Binding& b, ad::Tape& tape, const FeatureRows& obs,
                                    const FeatureRows& emb) const {
  std::vector<const std::vector<double>*> o, e;
  for (const auto& r : obs) o.push_back(&r);
  for (const auto& r : emb) e.push_back(&r);
  Tensor po = nn::linear(b, obs_proj_, stack_rows(tape, o, config_.obs_dim));
  Tensor pe = nn::linear(b, emb_proj_, stack_rows(tape, e, config_.emb_dim));
  std::vector<Tensor> parts{po, pe};
  return ad::tanh(ad::concat_cols(parts));
}

std::vector<TrajectoryPolicy::DemoTensors> TrajectoryPolicy::encode_demos(
    const ad::Binding& b, const std::vector<FeatureRows>& demos) const {
  if (!config_.conditioned) throw Error("encode_demos on an unconditioned policy");
  std::vector<DemoTensors> out;
  if (demos.empty()) return out;
  ad::Tape& tape = b[0].tape();
  std::vector<FeatureRows> trimmed;
  std::size_t lmax = 0;
  for (const auto& d : demos) {
    trimmed.push_back(truncate_demo(d));
    lmax = std::max(lmax, trimmed.back().size());
  }
  const std::size_t nd = demos.size();
  std::vector<const std::vector<double>*> rows(lmax * nd, nullptr);
  for (std::size_t k = 0; k < lmax; ++k)
    for (std::size_t d = 0; d < nd; ++d)
      if (k < trimmed[d].size()) rows[k * nd + d] = &trimmed[d][k];
  Tensor x = ad::tanh(nn::linear(b, emb_proj_, stack_rows(tape, rows, config_.emb_dim)));
  Tensor gx = nn::gru_input(b, demo_gru_, x);
  Tensor h = tape.constant(Shape::matrix(nd, config_.demo_hidden),
                           std::vector<double>(nd * config_.demo_hidden, 0.0));
  std::vector<Tensor> hs;
  hs.reserve(lmax);
  for (std::size_t k = 0; k < lmax; ++k) {
    h = nn::gru_step(b, demo_gru_, ad::slice_rows(gx, k * nd, (k + 1) * nd), h);
    hs.push_back(h);
  }
  Tensor all = ad::concat_rows(hs);
  for (std::size_t d = 0; d < nd; ++d) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < trimmed[d].size(); ++k) idx.push_back(k * nd + d);
    DemoTensors dt;
    dt.hidden = nd == 1 ? all : ad::gather_rows(all, idx);
    dt.keys = ad::add(ad::matmul(dt.hidden, b[att_k_]), b[att_kb_]);
    out.push_back(dt);
  }
  return out;
}

Tensor TrajectoryPolicy::attend(const ad::Binding& b, const Tensor& h, const DemoTensors& demo,
                                Tensor* alpha) const {
  Tensor q = ad::matmul(h, b[att_q_]);
  Tensor a = ad::softmax_row(ad::additive_attention_scores(q, demo.keys, b[att_v_]));
  if (alpha) *alpha = a;
  return ad::matmul(a, demo.hidden);
}

void TrajectoryPolicy::heads(const ad::Binding& b, const Tensor& features, Tensor* log_probs,
                             Tensor* values, Tensor* logits) const {
  Tensor z = ad::tanh(nn::linear(b, head_, features));
  Tensor l = nn::linear(b, logits_, z);
  if (logits) *logits = l;
  *log_probs = ad::log_softmax_row(l);
  *values = nn::linear(b, value_, z);
}

SequenceOutput TrajectoryPolicy::forward_sequences(ad::Tape& tape, const ad::Binding& b,
                                                   const std::vector<Sequence>& seqs,
                                                   const std::vector<FeatureRows>& demos) const {
  const std::size_t ns = seqs.size();
  if (ns == 0) throw Error("forward_sequences: no sequences");
  const std::size_t ha = config_.agent_hidden;
  std::size_t tmax = 0;
  for (const Sequence& s : seqs) {
    const std::size_t t = s.size();
    if (s.emb.size() != t || s.reset.size() != t || s.demo.size() != t || s.active.size() != t)
      throw ShapeError("sequence fields have inconsistent lengths");
    if (s.h0.size() != ha) throw ShapeError("sequence h0 has the wrong width");
    tmax = std::max(tmax, t);
  }

  std::vector<const std::vector<double>*> orows(tmax * ns, nullptr), erows(tmax * ns, nullptr);
  for (std::size_t t = 0; t < tmax; ++t)
    for (std::size_t s = 0; s < ns; ++s)
      if (t < seqs[s].size()) {
        orows[t * ns + s] = &seqs[s].obs[t];
        erows[t * ns + s] = &seqs[s].emb[t];
      }
  Tensor po = nn::linear(b, obs_proj_, stack_rows(tape, orows, config_.obs_dim));
  Tensor pe = nn::linear(b, emb_proj_, stack_rows(tape, erows, config_.emb_dim));
  std::vector<Tensor> parts{po, pe};
  Tensor gx = nn::gru_input(b, agent_gru_, ad::tanh(ad::concat_cols(parts)));

  std::vector<double> h0(ns * ha);
  for (std::size_t s = 0; s < ns; ++s) std::copy(seqs[s].h0.begin(), seqs[s].h0.end(), h0.begin() + static_cast<long>(s * ha));
  Tensor h = tape.constant(Shape::matrix(ns, ha), std::move(h0));
  std::vector<Tensor> hs;
  hs.reserve(tmax);
  for (std::size_t t = 0; t < tmax; ++t) {
    bool any_reset = false;
    std::vector<double> mask(ns * ha, 1.0);
    for (std::size_t s = 0; s < ns; ++s) {
      if (t < seqs[s].size() && seqs[s].reset[t]) {
        any_reset = true;
        std::fill_n(mask.begin() + static_cast<long>(s * ha), ha, 0.0);
      }
    }
    if (any_reset) h = ad::mul(h, tape.constant(Shape::matrix(ns, ha), std::move(mask)));
    h = nn::gru_step(b, agent_gru_, ad::slice_rows(gx, t * ns, (t + 1) * ns), h);
    hs.push_back(h);
  }
  Tensor all = ad::concat_rows(hs);

  // Group active steps by demonstration; attention only depends on (h_t, g).
  std::map<int, std::vector<StepRef>> groups;
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t t = 0; t < seqs[s].size(); ++t) {
      if (!seqs[s].active[t]) continue;
      const int d = seqs[s].demo[t];
      if (config_.conditioned && d < 0) throw Error("active conditioned step without a demo");
      if (d >= static_cast<int>(demos.size())) throw Error("demo index out of range");
      groups[config_.conditioned ? d : -1].push_back({s, t});
    }
  if (groups.empty()) throw Error("forward_sequences: no active steps");

  std::vector<DemoTensors> enc;
  if (config_.conditioned) {
    std::vector<FeatureRows> used;
    for (const auto& [d, refs] : groups) used.push_back(demos[static_cast<std::size_t>(d)]);
    enc = encode_demos(b, used);
  }

  SequenceOutput out;
  std::vector<Tensor> lps, vals;
  std::size_t gi = 0;
  for (const auto& [d, refs] : groups) {
    std::vector<std::size_t> idx;
    idx.reserve(refs.size());
    for (const StepRef& r : refs) idx.push_back(r.t * ns + r.seq);
    Tensor hrows = ad::gather_rows(all, idx);
    Tensor features = hrows;
    if (config_.conditioned) {
      Tensor c = attend(b, hrows, enc[gi], nullptr);
      std::vector<Tensor> cat{hrows, c};
      features = ad::concat_cols(cat);
    }
    Tensor lp, v;
    heads(b, features, &lp, &v);
    lps.push_back(lp);
    vals.push_back(v);
    out.order.insert(out.order.end(), refs.begin(), refs.end());
    ++gi;
  }
  out.log_probs = lps.size() == 1 ? lps[0] : ad::concat_rows(lps);
  out.values = vals.size() == 1 ? vals[0] : ad::concat_rows(vals);
  return out;
}

// ---- checkpoint -------------------------------------------------------------

namespace {
constexpr const char* kCheckpointSchema = "# dtsil-checkpoint/1";
}

void TrajectoryPolicy::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir + "/params.bin", std::ios::binary);
  std::ofstream man(dir + "/manifest.txt");
  if (!bin || !man) throw Error("cannot write checkpoint in " + dir);
  man << kCheckpointSchema << "\n";
  man << "# name rows cols byte_offset (float64, little-endian)\n";
  std::size_t offset = 0;
  for (const ad::Param& p : params_) {
    man << p.name << ' ' << p.shape.rows << ' ' << p.shape.cols << ' ' << offset << '\n';
    bin.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    offset += p.value.size() * sizeof(double);
  }
  if (!bin || !man) throw Error("failed writing checkpoint in " + dir);
}

void TrajectoryPolicy::load(const std::string& dir) {
  std::ifstream man(dir + "/manifest.txt");
  std::ifstream bin(dir + "/params.bin", std::ios::binary);
  if (!man || !bin) throw FormatError("missing checkpoint files in " + dir);
  std::string line;
  if (!std::getline(man, line) || line != kCheckpointSchema) throw FormatError("bad checkpoint manifest header");
  std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::vector<std::vector<double>> values(params_.size());
  std::vector<bool> seen(params_.size(), false);
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    std::size_t rows = 0, cols = 0, offset = 0;
    if (!(ls >> name >> rows >> cols >> offset)) throw FormatError("bad manifest line: " + line);
    const std::size_t i = params_.index_of(name);
    const ad::Param& p = params_[i];
    if (p.shape.rows != rows || p.shape.cols != cols)
      throw FormatError("shape mismatch for " + name + " in checkpoint");
    const std::size_t bytes = rows * cols * sizeof(double);
    if (offset + bytes > blob.size()) throw FormatError("checkpoint data truncated at " + name);
    values[i].resize(rows * cols);
    std::memcpy(values[i].data(), blob.data() + offset, bytes);
    seen[i] = true;
  }
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!seen[i]) throw FormatError("checkpoint lacks parameter " + params_[i].name);
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = std::move(values[i]);
}

// ---- runner -----------------------------------------------------------------

PolicyRunner::PolicyRunner(const TrajectoryPolicy& policy) : policy_(&policy), tape_(false) { rebuild(); }

void PolicyRunner::rebuild() {
  tape_.rewind(0);
  binding_ = std::make_unique<ad::Binding>(tape_, policy_->params());
  if (has_demo_) {
    std::vector<FeatureRows> one{demo_};
    demo_tensors_ = policy_->encode_demos(*binding_, one)[0];
  }
  mark_ = tape_.size();
}

void PolicyRunner::sync() { rebuild(); }

void PolicyRunner::set_demo(const FeatureRows& demo) {
  demo_ = demo;
  has_demo_ = true;
  rebuild();
}

void PolicyRunner::clear_demo() {
  if (!has_demo_) return;
  has_demo_ = false;
  demo_.clear();
  rebuild();
}

std::vector<double> PolicyRunner::initial_hidden() const {
  return std::vector<double>(policy_->config().agent_hidden, 0.0);
}

StepOutput PolicyRunner::step(const std::vector<double>& obs, const std::vector<double>& emb,
                              const std::vector<double>& hidden) {
  const PolicyConfig& cfg = policy_->config();
  if (cfg.conditioned && !has_demo_) throw Error("conditioned policy stepped without a demo");
  if (hidden.size() != cfg.agent_hidden) throw ShapeError("runner hidden state has the wrong width");
  const ad::Binding& b = *binding_;
  StepOutput out;
  {
    FeatureRows o{obs}, e{emb};
    Tensor x = policy_->input_rows(b, tape_, o, e);
    Tensor h = tape_.constant(Shape::matrix(1, cfg.agent_hidden), hidden);
    h = nn::gru_step(b, policy_->agent_gru(), nn::gru_input(b, policy_->agent_gru(), x), h);
    Tensor features = h;
    if (cfg.conditioned) {
      Tensor alpha;
      Tensor c = policy_->attend(b, h, demo_tensors_, &alpha);
      out.alpha.assign(alpha.values().begin(), alpha.values().end());
      std::vector<Tensor> cat{h, c};
      features = ad::concat_cols(cat);
    }
    Tensor lp, v, logits;
    policy_->heads(b, features, &lp, &v, &logits);
    out.logits.assign(logits.values().begin(), logits.values().end());
    out.log_probs.assign(lp.values().begin(), lp.values().end());
    out.value = v.item();
    out.hidden.assign(h.values().begin(), h.values().end());
  }
  tape_.rewind(mark_);
  return out;
}

}  // namespace dtsil
