#pragma once

// Define-by-run reverse-mode differentiation over dense rank <= 2 arrays.
//
// A Tape records every op as it runs. Tensors are handles (tape, node id) to
// immutable values. backward() walks the tape once in reverse recorded order
// and then marks it consumed; build a fresh tape for the next forward pass.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtsil/error.hpp"

namespace dtsil::ad {

struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 1;
  int rank = 2;

  static Shape scalar() { return {1, 1, 0}; }
  static Shape vector(std::size_t n) { return {1, n, 1}; }
  static Shape matrix(std::size_t r, std::size_t c) { return {r, c, 2}; }

  std::size_t size() const { return rows * cols; }
  bool same_dims(const Shape& o) const { return rows == o.rows && cols == o.cols; }
  std::string str() const;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  std::size_t size() const { return shape().size(); }
  bool requires_grad() const;

  std::span<const double> values() const;
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }
  // Only valid for single-element tensors.
  double item() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients of a scalar loss with respect to every leaf variable on the tape.
class Gradients {
 public:
  // Zero-filled when the leaf did not influence the loss.
  std::span<const double> of(const Tensor& leaf) const;
  std::span<const double> of(std::size_t node_id) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, std::vector<double>> grads_;
};

// Backward rule for one recorded op: read the output gradient through
// tape.grad_of(out) and accumulate into inputs via tape.grad(input_id).
using BackwardFn = std::function<void(Tape& tape, std::size_t out)>;

class Tape {
 public:
  // A tape with grad disabled records values only; used for rollouts and
  // finite-difference probes.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor variable(Shape shape, std::vector<double> values);

  // Extension point for ops: validates finiteness, then appends the node.
  // `backward` runs only if some input requires grad.
  Tensor record(Shape shape, std::vector<double> values,
                std::initializer_list<Tensor> inputs, BackwardFn backward);
  Tensor record(Shape shape, std::vector<double> values,
                std::span<const Tensor> inputs, BackwardFn backward);

  Gradients backward(const Tensor& loss);
  bool consumed() const { return consumed_; }

  // Drops every node recorded after the first `size`; tensors referring to
  // them become dangling. Lets inference reuse a prefix of constants.
  void rewind(std::size_t size);

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::span<const double> value(std::size_t id) const { return nodes_[id].value; }
  std::span<const double> grad_of(std::size_t id) const { return nodes_[id].grad; }
  // Accumulator for an input's gradient, allocated (zeroed) on first use.
  std::span<double> grad(std::size_t id);

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// Same dims, or b is a 1xN row broadcast over every row of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softmax_row(const Tensor& a);
Tensor log_softmax_row(const Tensor& a);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Gradient passes only where lo < x < hi.
Tensor clip_by_value(const Tensor& a, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// out[r, 0] = a[r, cols[r]]
Tensor pick(const Tensor& a, std::span<const std::size_t> cols);
// scores[t, i] = sum_d v[d] * tanh(q[t, d] + keys[i, d])
Tensor additive_attention_scores(const Tensor& q, const Tensor& keys,
                                 const Tensor& v);

}  // namespace dtsil::ad
