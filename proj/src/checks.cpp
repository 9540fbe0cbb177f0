#include "dtsil/checks.hpp"

#include <cmath>
#include <functional>

#include "dtsil/nn.hpp"
#include "dtsil/policy.hpp"
#include "dtsil/trainer.hpp"

namespace dtsil {

using ad::Binding;
using ad::LossFn;
using ad::ParamSet;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Random linear read-out of every element.
Tensor readout(Tape& tape, const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, tape.constant(y.shape(), normals(rng, y.size()))));
}

using Builder = std::function<LossFn(ParamSet&, Rng&)>;

Builder unary(std::function<Tensor(const Tensor&)> op, double lo = -3.0, double hi = 3.0,
              std::vector<double> kinks = {}) {
  return [=](ParamSet& ps, Rng& rng) -> LossFn {
    const std::size_t r = 2 + rng.below(3), c = 2 + rng.below(4);
    std::vector<double> x(r * c);
    for (double& v : x) {
      bool ok = false;
      while (!ok) {
        v = lo + (hi - lo) * rng.uniform();
        ok = true;
        for (double k : kinks) ok = ok && std::abs(v - k) > 1e-3;
      }
    }
    ps.add("x", Shape::matrix(r, c), x);
    const std::uint64_t s = rng.next_u64();
    return [=](Tape& t, const Binding& b) { return readout(t, op(b[0]), s); };
  };
}

Builder binary(std::function<Tensor(const Tensor&, const Tensor&)> op, bool broadcast,
               bool separated = false) {
  return [=](ParamSet& ps, Rng& rng) -> LossFn {
    const std::size_t r = 2 + rng.below(3), c = 2 + rng.below(4);
    std::vector<double> a = normals(rng, r * c), bv = normals(rng, (broadcast ? 1 : r) * c);
    if (separated)
      for (std::size_t i = 0; i < bv.size(); ++i)
        if (std::abs(a[i] - bv[i]) < 1e-2) bv[i] = a[i] + 0.5;
    ps.add("a", Shape::matrix(r, c), a);
    ps.add("b", Shape::matrix(broadcast ? 1 : r, c), bv);
    const std::uint64_t s = rng.next_u64();
    return [=](Tape& t, const Binding& b) { return readout(t, op(b[0], b[1]), s); };
  };
}

PolicyConfig toy_policy(bool conditioned) {
  PolicyConfig c;
  c.obs_dim = 5;
  c.emb_dim = 4;
  c.num_actions = 4;
  c.conditioned = conditioned;
  c.demo_hidden = c.agent_hidden = c.attention_dim = c.head_hidden = 8;
  c.proj_dim = 4;
  return c;
}

FeatureRows rows(Rng& rng, std::size_t n, std::size_t dim) {
  FeatureRows out(n);
  for (auto& r : out) r = normals(rng, dim);
  return out;
}

// Two short sequences, the first with a mid-sequence reset.
struct PolicyToy {
  std::vector<Sequence> seqs;
  std::vector<FeatureRows> demos;
  std::vector<std::size_t> actions;
};

PolicyToy policy_toy(const PolicyConfig& cfg, Rng& rng) {
  PolicyToy toy;
  if (cfg.conditioned) toy.demos = {rows(rng, 4, cfg.emb_dim), rows(rng, 3, cfg.emb_dim)};
  const std::size_t lens[] = {4, 3};
  for (std::size_t s = 0; s < 2; ++s) {
    Sequence q;
    q.obs = rows(rng, lens[s], cfg.obs_dim);
    q.emb = rows(rng, lens[s], cfg.emb_dim);
    q.h0 = s == 1 ? normals(rng, cfg.agent_hidden, 0.3) : std::vector<double>(cfg.agent_hidden, 0.0);
    for (std::size_t t = 0; t < lens[s]; ++t) {
      q.reset.push_back(s == 0 && (t == 0 || t == 2));
      q.demo.push_back(cfg.conditioned ? static_cast<int>(s == 0 && t >= 2 ? 1 : s) : -1);
      q.active.push_back(1);
      toy.actions.push_back(rng.below(cfg.num_actions));
    }
    toy.seqs.push_back(std::move(q));
  }
  return toy;
}

struct PolicyCase {
  std::string name;
  bool conditioned;
  // Loss from the policy outputs plus the step-time references.
  std::function<Tensor(Tape&, const SequenceOutput&, const std::vector<std::size_t>&,
                       const std::vector<double>&, const std::vector<double>&)>
      loss;
};

NamedCheck run_policy_case(const PolicyCase& c, double tolerance, std::uint64_t seed) {
  Rng rng(seed);
  TrajectoryPolicy policy(toy_policy(c.conditioned), rng.next_u64());
  // Non-zero biases so every path carries gradient.
  for (std::size_t i = 0; i < policy.params().size(); ++i) {
    auto& p = policy.params()[i];
    if (p.shape.rows == 1)
      for (double& v : p.value) v += 0.1 * rng.normal();
  }
  PolicyToy toy = policy_toy(policy.config(), rng);
  std::vector<double> ref_lp, ref_v;
  {
    Tape tape(false);
    Binding b(tape, policy.params());
    SequenceOutput out = policy.forward_sequences(tape, b, toy.seqs, toy.demos);
    std::vector<std::size_t> actions;
    for (const StepRef& r : out.order) actions.push_back(toy.actions[r.seq == 0 ? r.t : 4 + r.t]);
    Tensor lp = ad::pick(out.log_probs, actions);
    ref_lp.assign(lp.values().begin(), lp.values().end());
    ref_v.assign(out.values.values().begin(), out.values.values().end());
  }
  LossFn fn = [&](Tape& tape, const Binding& b) {
    SequenceOutput out = policy.forward_sequences(tape, b, toy.seqs, toy.demos);
    std::vector<std::size_t> actions;
    for (const StepRef& r : out.order) actions.push_back(toy.actions[r.seq == 0 ? r.t : 4 + r.t]);
    return c.loss(tape, out, actions, ref_lp, ref_v);
  };
  return {c.name, ad::grad_check(policy.params(), fn, tolerance)};
}

}  // namespace

std::vector<NamedCheck> gradient_check_suite(double tolerance, std::uint64_t seed) {
  std::vector<std::pair<std::string, Builder>> ops = {
      {"tanh", unary([](const Tensor& x) { return ad::tanh(x); })},
      {"sigmoid", unary([](const Tensor& x) { return ad::sigmoid(x); })},
      {"exp", unary([](const Tensor& x) { return ad::exp(x); }, -2.0, 2.0)},
      {"log", unary([](const Tensor& x) { return ad::log(x); }, 0.3, 3.0)},
      {"scale", unary([](const Tensor& x) { return ad::scale(x, -1.7); })},
      {"add_scalar", unary([](const Tensor& x) { return ad::add_scalar(x, 0.3); })},
      {"neg", unary([](const Tensor& x) { return ad::neg(x); })},
      {"softmax_row", unary([](const Tensor& x) { return ad::softmax_row(x); })},
      {"log_softmax_row", unary([](const Tensor& x) { return ad::log_softmax_row(x); })},
      {"sum", unary([](const Tensor& x) { return ad::sum(ad::mul(x, x)); })},
      {"mean", unary([](const Tensor& x) { return ad::mean(ad::mul(x, x)); })},
      {"clip_by_value", unary([](const Tensor& x) { return ad::clip_by_value(x, -1.0, 1.0); }, -3.0, 3.0, {-1.0, 1.0})},
      {"slice_cols", unary([](const Tensor& x) { return ad::slice_cols(x, 1, x.cols()); })},
      {"slice_rows", unary([](const Tensor& x) { return ad::slice_rows(x, 0, x.rows() - 1); })},
      {"gather_rows", unary([](const Tensor& x) {
         std::vector<std::size_t> r{x.rows() - 1, 0, x.rows() - 1};
         return ad::gather_rows(x, r);
       })},
      {"pick", unary([](const Tensor& x) {
         std::vector<std::size_t> cols(x.rows());
         for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = (2 * i + 1) % x.cols();
         return ad::pick(x, cols);
       })},
      {"add", binary([](const Tensor& a, const Tensor& b) { return ad::add(a, b); }, false)},
      {"add_broadcast", binary([](const Tensor& a, const Tensor& b) { return ad::add(a, b); }, true)},
      {"sub", binary([](const Tensor& a, const Tensor& b) { return ad::sub(a, b); }, true)},
      {"mul", binary([](const Tensor& a, const Tensor& b) { return ad::mul(a, b); }, false)},
      {"minimum", binary([](const Tensor& a, const Tensor& b) { return ad::minimum(a, b); }, false, true)},
      {"maximum", binary([](const Tensor& a, const Tensor& b) { return ad::maximum(a, b); }, false, true)},
      {"concat_cols", binary([](const Tensor& a, const Tensor& b) {
         std::vector<Tensor> p{a, b, a};
         return ad::concat_cols(p);
       }, false)},
      {"concat_rows", binary([](const Tensor& a, const Tensor& b) {
         std::vector<Tensor> p{b, a};
         return ad::concat_rows(p);
       }, false)},
      {"matmul", [](ParamSet& ps, Rng& rng) -> LossFn {
         const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(5), n = 1 + rng.below(4);
         ps.add("a", Shape::matrix(m, k), normals(rng, m * k));
         ps.add("b", Shape::matrix(k, n), normals(rng, k * n));
         const std::uint64_t s = rng.next_u64();
         return [=](Tape& t, const Binding& b) { return readout(t, ad::matmul(b[0], b[1]), s); };
       }},
      {"additive_attention_scores", [](ParamSet& ps, Rng& rng) -> LossFn {
         const std::size_t q = 1 + rng.below(3), l = 2 + rng.below(5), d = 2 + rng.below(4);
         ps.add("q", Shape::matrix(q, d), normals(rng, q * d));
         ps.add("keys", Shape::matrix(l, d), normals(rng, l * d));
         ps.add("v", Shape::vector(d), normals(rng, d));
         const std::uint64_t s = rng.next_u64();
         return [=](Tape& t, const Binding& b) {
           return readout(t, ad::softmax_row(ad::additive_attention_scores(b[0], b[1], b[2])), s);
         };
       }},
      {"gru_5_steps", [](ParamSet& ps, Rng& rng) -> LossFn {
         const std::size_t in = 3, hidden = 8, steps = 5;
         nn::Gru gru = nn::add_gru(ps, "gru", in, hidden, rng);
         for (std::size_t idx : {gru.bx, gru.bh})
           for (double& v : ps[idx].value) v = 0.1 * rng.normal();
         const std::vector<double> xs = normals(rng, steps * in);
         const std::uint64_t s = rng.next_u64();
         return [=](Tape& t, const Binding& b) {
           Tensor gx = nn::gru_input(b, gru, t.constant(Shape::matrix(steps, in), xs));
           Tensor h = t.constant(Shape::matrix(1, hidden), std::vector<double>(hidden, 0.0));
           Tensor acc = t.constant(Shape::scalar(), {0.0});
           for (std::size_t k = 0; k < steps; ++k) {
             h = nn::gru_step(b, gru, ad::slice_rows(gx, k, k + 1), h);
             acc = ad::add(acc, readout(t, h, s + k));
           }
           return acc;
         };
       }},
  };

  std::vector<NamedCheck> out;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    Rng rng = Rng::stream(seed, i + 1);
    ParamSet ps;
    LossFn fn = ops[i].second(ps, rng);
    out.push_back({ops[i].first, ad::grad_check(ps, fn, tolerance)});
  }

  const std::vector<PolicyCase> policy_cases = {
      {"policy_attention_readout", true,
       [](Tape& t, const SequenceOutput& o, const std::vector<std::size_t>&, const std::vector<double>&,
          const std::vector<double>&) { return ad::add(readout(t, o.log_probs, 7), readout(t, o.values, 8)); }},
      {"rl_loss", true,
       [](Tape&, const SequenceOutput& o, const std::vector<std::size_t>& a, const std::vector<double>& lp,
          const std::vector<double>& v) {
         // Old log-probs and values offset so some rows sit in the clipped region.
         std::vector<double> old_lp(lp), old_v(v), adv, ret;
         for (std::size_t i = 0; i < lp.size(); ++i) {
           old_lp[i] -= i % 3 == 0 ? 0.5 : 0.1;
           old_v[i] += i % 2 == 0 ? 0.35 : -0.05;
           adv.push_back(i % 2 == 0 ? 0.8 : -0.6);
           ret.push_back(v[i] + (i % 2 == 0 ? 0.4 : -0.3));
         }
         PpoTerms p = ppo_terms(o.log_probs, o.values, a, old_lp, old_v, adv, ret, 0.2);
         return ad::add(ad::add(p.policy_loss, ad::scale(p.value_loss, 0.5)), ad::scale(p.entropy, -0.01));
       }},
      {"sl_loss", true,
       [](Tape&, const SequenceOutput& o, const std::vector<std::size_t>& a, const std::vector<double>&,
          const std::vector<double>&) { return ad::scale(ad::sum(ad::pick(o.log_probs, a)), -0.1 / 2.0); }},
      {"rl_plus_sl_loss", true,
       [](Tape&, const SequenceOutput& o, const std::vector<std::size_t>& a, const std::vector<double>& lp,
          const std::vector<double>& v) {
         std::vector<double> adv(lp.size()), ret(v);
         for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = std::cos(static_cast<double>(i));
         PpoTerms p = ppo_terms(o.log_probs, o.values, a, lp, v, adv, ret, 0.2);
         Tensor sl = ad::scale(ad::sum(ad::pick(o.log_probs, a)), -0.1);
         return ad::add(ad::add(p.policy_loss, ad::scale(p.value_loss, 0.5)), sl);
       }},
      {"sil_loss", false,
       [](Tape& t, const SequenceOutput& o, const std::vector<std::size_t>& a, const std::vector<double>&,
          const std::vector<double>& v) {
         std::vector<double> ret(v);
         for (std::size_t i = 0; i < ret.size(); ++i) ret[i] += i % 3 == 0 ? -0.5 : 0.7;
         // The (R - V)+ weight is a stop-gradient, so the policy term sees V as data.
         Tensor fixed_v = t.constant(o.values.shape(), v);
         SilTerms weighted = sil_terms(o.log_probs, fixed_v, a, ret);
         SilTerms live = sil_terms(o.log_probs, o.values, a, ret);
         return ad::add(weighted.policy_loss, ad::scale(live.value_loss, 0.01));
       }},
  };
  for (std::size_t i = 0; i < policy_cases.size(); ++i)
    out.push_back(run_policy_case(policy_cases[i], tolerance, seed * 131 + 1000 + i));
  return out;
}

}  // namespace dtsil
