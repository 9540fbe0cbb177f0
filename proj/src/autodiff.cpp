#include "dtsil/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "dtsil/kernels.hpp"

namespace dtsil::ad {

std::string Shape::str() const {
  std::ostringstream os;
  if (rank == 0) {
    os << "[]";
  } else if (rank == 1) {
    os << "[" << cols << "]";
  } else {
    os << "[" << rows << "x" << cols << "]";
  }
  return os.str();
}

const Shape& Tensor::shape() const { return tape_->shape(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }
std::span<const double> Tensor::values() const { return tape_->value(id_); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
  return values()[0];
}

std::span<const double> Gradients::of(const Tensor& leaf) const { return of(leaf.id()); }

std::span<const double> Gradients::of(std::size_t node_id) const {
  auto it = grads_.find(node_id);
  if (it == grads_.end()) return {};
  return it->second;
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size())
    throw ShapeError("constant: " + std::to_string(values.size()) +
                     " values for shape " + shape.str());
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("non-finite value in leaf " + shape.str());
  }
  Node n;
  n.shape = shape;
  n.value = std::move(values);
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  Tensor t = constant(shape, std::move(values));
  nodes_.back().requires_grad = grad_enabled_;
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> values,
                    std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return record(shape, std::move(values),
                std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> values,
                    std::span<const Tensor> inputs, BackwardFn backward) {
  if (consumed_) throw Error("record on a consumed tape");
  if (values.size() != shape.size())
    throw ShapeError("record: value size mismatch for shape " + shape.str());
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("non-finite value in op output " + shape.str());
  }
  bool rg = false;
  for (const Tensor& in : inputs) {
    if (in.tape_ != this) throw Error("op input belongs to a different tape");
    rg = rg || nodes_[in.id_].requires_grad;
  }
  Node n;
  n.shape = shape;
  n.value = std::move(values);
  n.requires_grad = rg && grad_enabled_;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

void Tape::rewind(std::size_t size) {
  if (consumed_) throw Error("rewind on a consumed tape");
  if (size < nodes_.size()) nodes_.resize(size);
}

std::span<double> Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Gradients Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward called twice on the same tape");
  if (!loss.valid() || loss.tape_ != this) throw Error("loss is not on this tape");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got " + loss.shape().str());
  consumed_ = true;
  Gradients out;
  if (nodes_[loss.id_].requires_grad) {
    grad(loss.id_)[0] = 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (!n.leaf || !n.requires_grad) continue;
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    out.grads_.emplace(id, std::move(n.grad));
  }
  return out;
}

namespace {

bool is_row_broadcast(const Shape& a, const Shape& b) {
  return b.rows == 1 && b.cols == a.cols && a.rows > 1;
}

Shape elementwise_shape(const Tensor& a) { return a.shape(); }

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D dfdx_from_xy) {
  auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return a.tape().record(elementwise_shape(a), std::move(y), {a},
                         [ia, dfdx_from_xy](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           auto xv = t.value(ia);
                           auto yv = t.value(out);
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i] * dfdx_from_xy(xv[i], yv[i]);
                         });
}

void check_same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.valid() || !b.valid()) throw Error(std::string(op) + ": invalid tensor");
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": tensors on different tapes");
}

Tensor add_like(const Tensor& a, const Tensor& b, double sign, const char* op) {
  check_same_tape(a, b, op);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool bcast = is_row_broadcast(sa, sb);
  if (!sa.same_dims(sb) && !bcast)
    throw ShapeError(std::string(op) + ": " + sa.str() + " vs " + sb.str());
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> y(av.size());
  const std::size_t n = sa.cols;
  for (std::size_t i = 0; i < av.size(); ++i)
    y[i] = av[i] + sign * bv[bcast ? i % n : i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(sa, std::move(y), {a, b},
                         [ia, ib, bcast, n, sign](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           if (t.requires_grad(ia)) {
                             auto ga = t.grad(ia);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (t.requires_grad(ib)) {
                             auto gb = t.grad(ib);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               gb[bcast ? i % n : i] += sign * g[i];
                           }
                         });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: " + a.shape().str() + " x " + b.shape().str());
  std::vector<double> c(m * n);
  kernels::matmul(a.values(), b.values(), c, m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Shape::matrix(m, n), std::move(c), {a, b},
                         [ia, ib, m, k, n](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           if (t.requires_grad(ia))
                             kernels::matmul_nt(g, t.value(ib), t.grad(ia), m, n, k, true);
                           if (t.requires_grad(ib))
                             kernels::matmul_tn(t.value(ia), g, t.grad(ib), m, k, n, true);
                         });
}

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b, "mul");
  if (!a.shape().same_dims(b.shape()))
    throw ShapeError("mul: " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(y), {a, b},
                         [ia, ib](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           auto av2 = t.value(ia);
                           auto bv2 = t.value(ib);
                           if (t.requires_grad(ia)) {
                             auto ga = t.grad(ia);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                           }
                           if (t.requires_grad(ib)) {
                             auto gb = t.grad(ib);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                           }
                         });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return kernels::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a,
               [](double x) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softmax_row(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = y.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    for (std::size_t j = 0; j < c; ++j) yi[j] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(a.shape(), std::move(y), {a}, [ia, r, c](Tape& t, std::size_t out) {
    auto g = t.grad_of(out);
    auto yv = t.value(out);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * yv[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Tensor log_softmax_row(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = y.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) yi[j] = xi[j] - lz;
  }
  const std::size_t ia = a.id();
  return a.tape().record(a.shape(), std::move(y), {a}, [ia, r, c](Tape& t, std::size_t out) {
    auto g = t.grad_of(out);
    auto yv = t.value(out);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += g[i * c + j] - std::exp(yv[i * c + j]) * gs;
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    check_same_tape(parts[0], p, "concat_cols");
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch " + p.shape().str());
    total += p.cols();
  }
  std::vector<double> y(r * total);
  std::vector<std::size_t> ids, widths;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    auto v = p.values();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * w, w, y.data() + i * total + off);
    off += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  return parts[0].tape().record(
      Shape{r, total, r == 1 ? 1 : 2}, std::move(y), parts,
      [ids, widths, r, total](Tape& t, std::size_t out) {
        auto g = t.grad_of(out);
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t w = widths[k];
          if (t.requires_grad(ids[k])) {
            auto gp = t.grad(ids[k]);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + o + j];
          }
          o += w;
        }
      });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    check_same_tape(parts[0], p, "concat_rows");
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch " + p.shape().str());
    total += p.rows();
  }
  std::vector<double> y;
  y.reserve(total * c);
  std::vector<std::size_t> ids, sizes;
  for (const Tensor& p : parts) {
    auto v = p.values();
    y.insert(y.end(), v.begin(), v.end());
    ids.push_back(p.id());
    sizes.push_back(v.size());
  }
  return parts[0].tape().record(Shape::matrix(total, c), std::move(y), parts,
                                [ids, sizes](Tape& t, std::size_t out) {
                                  auto g = t.grad_of(out);
                                  std::size_t o = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (t.requires_grad(ids[k])) {
                                      auto gp = t.grad(ids[k]);
                                      for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[o + i];
                                    }
                                    o += sizes[k];
                                  }
                                });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin >= end || end > c)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + a.shape().str());
  const std::size_t w = end - begin;
  auto x = a.values();
  std::vector<double> y(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data() + i * c + begin, w, y.data() + i * w);
  const std::size_t ia = a.id();
  return a.tape().record(Shape{r, w, a.shape().rank}, std::move(y), {a},
                         [ia, r, c, w, begin](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
                         });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin >= end || end > r)
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + a.shape().str());
  auto x = a.values();
  std::vector<double> y(x.begin() + static_cast<long>(begin * c),
                        x.begin() + static_cast<long>(end * c));
  const std::size_t ia = a.id();
  return a.tape().record(Shape::matrix(end - begin, c), std::move(y), {a},
                         [ia, begin, c](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
                         });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Shape::scalar(), {s}, {a}, [ia](Tape& t, std::size_t out) {
    const double g = t.grad_of(out)[0];
    for (double& x : t.grad(ia)) x += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor clip_by_value(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw Error("clip_by_value: lo > hi");
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

namespace {

Tensor select_binary(const Tensor& a, const Tensor& b, bool take_min, const char* op) {
  check_same_tape(a, b, op);
  if (!a.shape().same_dims(b.shape()))
    throw ShapeError(std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> y(av.size());
  auto mask = std::make_shared<std::vector<char>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const bool pick_a = take_min ? av[i] <= bv[i] : av[i] >= bv[i];
    (*mask)[i] = pick_a ? 1 : 0;
    y[i] = pick_a ? av[i] : bv[i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(y), {a, b}, [ia, ib, mask](Tape& t, std::size_t out) {
    auto g = t.grad_of(out);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*mask)[i]) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(*mask)[i]) gb[i] += g[i];
    }
  });
}

}  // namespace

Tensor minimum(const Tensor& a, const Tensor& b) { return select_binary(a, b, true, "minimum"); }
Tensor maximum(const Tensor& a, const Tensor& b) { return select_binary(a, b, false, "maximum"); }

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  const std::size_t c = a.cols();
  auto x = a.values();
  std::vector<double> y(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.data() + rows[i] * c, c, y.data() + i * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t ia = a.id();
  return a.tape().record(Shape::matrix(rows.size(), c), std::move(y), {a},
                         [ia, idx = std::move(idx), c](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
                         });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> cols) {
  const std::size_t r = a.rows(), c = a.cols();
  if (cols.size() != r) throw ShapeError("pick: need one column index per row");
  auto x = a.values();
  std::vector<double> y(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i] >= c) throw ShapeError("pick: column index out of range");
    y[i] = x[i * c + cols[i]];
  }
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  const std::size_t ia = a.id();
  return a.tape().record(Shape::matrix(r, 1), std::move(y), {a},
                         [ia, idx = std::move(idx), c](Tape& t, std::size_t out) {
                           auto g = t.grad_of(out);
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < idx.size(); ++i) ga[i * c + idx[i]] += g[i];
                         });
}

Tensor additive_attention_scores(const Tensor& q, const Tensor& keys, const Tensor& v) {
  check_same_tape(q, keys, "additive_attention_scores");
  check_same_tape(q, v, "additive_attention_scores");
  const std::size_t t_rows = q.rows(), l_rows = keys.rows(), dim = q.cols();
  if (keys.cols() != dim || v.size() != dim)
    throw ShapeError("additive_attention_scores: q " + q.shape().str() + " keys " +
                     keys.shape().str() + " v " + v.shape().str());
  Tape& tape = q.tape();
  const bool need_grad =
      tape.grad_enabled() && (q.requires_grad() || keys.requires_grad() || v.requires_grad());
  std::vector<double> scores(t_rows * l_rows);
  auto act = std::make_shared<std::vector<double>>(need_grad ? t_rows * l_rows * dim : 0);
  kernels::additive_scores(q.values(), keys.values(), v.values(), scores, *act, t_rows, l_rows,
                           dim);
  const std::size_t iq = q.id(), ik = keys.id(), iv = v.id();
  return tape.record(Shape::matrix(t_rows, l_rows), std::move(scores), {q, keys, v},
                     [iq, ik, iv, act, t_rows, l_rows, dim](Tape& t, std::size_t out) {
                       std::span<double> dq, dk, dv;
                       if (t.requires_grad(iq)) dq = t.grad(iq);
                       if (t.requires_grad(ik)) dk = t.grad(ik);
                       if (t.requires_grad(iv)) dv = t.grad(iv);
                       kernels::additive_scores_backward(t.grad_of(out), *act, t.value(iv), dq, dk,
                                                         dv, t_rows, l_rows, dim);
                     });
}

}  // namespace dtsil::ad
