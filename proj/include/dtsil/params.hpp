#pragma once

// Named parameter storage, tape binding, clipping, Adam and finite-difference
// gradient checking.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtsil/autodiff.hpp"

namespace dtsil::ad {

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
};

class ParamSet {
 public:
  // Returns the index of the new parameter. Names must be unique.
  std::size_t add(std::string name, Shape shape, std::vector<double> value);

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  // Throws ConfigError when absent.
  std::size_t index_of(const std::string& name) const;
  std::size_t total_size() const;

  bool all_finite() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Param> params_;
};

// Per-parameter gradient buffers, shaped like a ParamSet.
using ParamGrads = std::vector<std::vector<double>>;

// Places every parameter of a set on a tape as a leaf variable.
class Binding {
 public:
  Binding(Tape& tape, const ParamSet& params);

  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  const Tensor& get(const std::string& name) const;
  std::size_t size() const { return tensors_.size(); }

  ParamGrads grads(const Gradients& g) const;

 private:
  const ParamSet* params_;
  std::vector<Tensor> tensors_;
};

ParamGrads zero_grads(const ParamSet& params);
double global_norm(const ParamGrads& grads);
// Rescales in place so the global norm is at most max_norm; returns the norm
// measured before clipping.
double clip_by_global_norm(ParamGrads& grads, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

class Adam {
 public:
  explicit Adam(const ParamSet& params, AdamConfig config = {});

  void step(ParamSet& params, const ParamGrads& grads, double lr);
  std::int64_t steps() const { return t_; }

 private:
  AdamConfig config_;
  ParamGrads m_, v_;
  std::int64_t t_ = 0;
};

// Builds the scalar loss on a fresh tape from bound parameters.
using LossFn = std::function<Tensor(Tape&, const Binding&)>;

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double worst = 0.0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor).
  double denom_floor = 1e-5;
  // 0 checks every element; otherwise a seeded random subset per parameter.
  std::size_t max_elements_per_param = 0;
  std::uint64_t seed = 0;
};

GradCheckReport grad_check(ParamSet& params, const LossFn& loss_fn, double tolerance,
                           const GradCheckOptions& options = {});

}  // namespace dtsil::ad
