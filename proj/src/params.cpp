#include "dtsil/params.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtsil/rng.hpp"

namespace dtsil::ad {

std::size_t ParamSet::add(std::string name, Shape shape, std::vector<double> value) {
  if (value.size() != shape.size())
    throw ShapeError("param " + name + ": " + std::to_string(value.size()) +
                     " values for shape " + shape.str());
  for (const Param& p : params_)
    if (p.name == name) throw ConfigError("duplicate parameter name " + name);
  params_.push_back({std::move(name), shape, std::move(value)});
  return params_.size() - 1;
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw ConfigError("no parameter named " + name);
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const Param& p : params_) n += p.value.size();
  return n;
}

bool ParamSet::all_finite() const {
  for (const Param& p : params_)
    for (double v : p.value)
      if (!std::isfinite(v)) return false;
  return true;
}

Binding::Binding(Tape& tape, const ParamSet& params) : params_(&params) {
  tensors_.reserve(params.size());
  for (const Param& p : params) tensors_.push_back(tape.variable(p.shape, p.value));
}

const Tensor& Binding::get(const std::string& name) const {
  return tensors_[params_->index_of(name)];
}

ParamGrads Binding::grads(const Gradients& g) const {
  ParamGrads out(tensors_.size());
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto s = g.of(tensors_[i]);
    if (s.empty()) {
      out[i].assign(tensors_[i].size(), 0.0);
    } else {
      out[i].assign(s.begin(), s.end());
    }
  }
  return out;
}

ParamGrads zero_grads(const ParamSet& params) {
  ParamGrads g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g[i].assign(params[i].value.size(), 0.0);
  return g;
}

double global_norm(const ParamGrads& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

double clip_by_global_norm(ParamGrads& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g) v *= k;
  }
  return norm;
}

Adam::Adam(const ParamSet& params, AdamConfig config)
    : config_(config), m_(zero_grads(params)), v_(zero_grads(params)) {}

void Adam::step(ParamSet& params, const ParamGrads& grads, double lr) {
  if (grads.size() != params.size()) throw ShapeError("Adam: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value;
    const auto& g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      w[j] -= lr * mh / (std::sqrt(vh) + config_.eps);
    }
  }
}

namespace {

double eval_loss(ParamSet& params, const LossFn& loss_fn) {
  Tape tape(false);
  Binding b(tape, params);
  return loss_fn(tape, b).item();
}

}  // namespace

GradCheckReport grad_check(ParamSet& params, const LossFn& loss_fn, double tolerance,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = tolerance;

  ParamGrads analytic;
  {
    Tape tape;
    Binding b(tape, params);
    Tensor loss = loss_fn(tape, b);
    analytic = b.grads(tape.backward(loss));
  }

  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry entry;
    entry.name = params[pi].name;
    const std::size_t n = params[pi].value.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (options.max_elements_per_param > 0 && n > options.max_elements_per_param) {
      for (std::size_t i = 0; i < options.max_elements_per_param; ++i)
        std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(options.max_elements_per_param);
    }
    for (std::size_t j : idx) {
      double& w = params[pi].value[j];
      const double orig = w;
      w = orig + options.step;
      const double lp = eval_loss(params, loss_fn);
      w = orig - options.step;
      const double lm = eval_loss(params, loss_fn);
      w = orig;
      const double numeric = (lp - lm) / (2.0 * options.step);
      const double a = analytic[pi][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denom_floor});
      const double rel = std::abs(a - numeric) / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked;
    }
    entry.passed = entry.max_rel_error <= tolerance;
    report.passed = report.passed && entry.passed;
    report.worst = std::max(report.worst, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace dtsil::ad
