#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "dtsil/checks.hpp"
#include "dtsil/nn.hpp"
#include "dtsil/params.hpp"

using namespace dtsil;
using namespace dtsil::ad;

namespace {

constexpr double kTol = 1e-4;

std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Values whose distance to each of `kinks` exceeds `margin`.
std::vector<double> away_from(Rng& rng, std::size_t n, std::vector<double> kinks, double margin) {
  std::vector<double> v(n);
  for (double& x : v) {
    bool ok = false;
    while (!ok) {
      x = 2.0 * rng.normal();
      ok = true;
      for (double k : kinks) ok = ok && std::abs(x - k) > margin;
    }
  }
  return v;
}

// Random linear read-out so every output element affects the loss differently.
Tensor readout(Tape& tape, const Tensor& y, Rng& rng) {
  Tensor w = tape.constant(y.shape(), normals(rng, y.size()));
  return sum(mul(y, w));
}

struct Case {
  std::string name;
  // Registers the inputs and returns the loss builder.
  std::function<LossFn(ParamSet&, Rng&)> make;
};

std::vector<Case> op_cases() {
  auto dims = [](Rng& rng) { return std::pair<std::size_t, std::size_t>{1 + rng.below(4), 1 + rng.below(5)}; };
  std::vector<Case> cases;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op,
                   std::function<std::vector<double>(Rng&, std::size_t)> init) {
    cases.push_back({name, [=](ParamSet& ps, Rng& rng) -> LossFn {
                       auto [r, c] = dims(rng);
                       ps.add("x", Shape::matrix(r, c), init(rng, r * c));
                       const std::uint64_t s = rng.next_u64();
                       return [op, s](Tape& t, const Binding& b) {
                         Rng w(s);
                         return readout(t, op(b[0]), w);
                       };
                     }});
  };
  auto gaussian = [](Rng& rng, std::size_t n) { return normals(rng, n); };
  unary("tanh", [](const Tensor& x) { return tanh(x); }, gaussian);
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, gaussian);
  unary("exp", [](const Tensor& x) { return exp(x); }, gaussian);
  unary("log", [](const Tensor& x) { return log(x); }, [](Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = 0.5 + 2.0 * rng.uniform();
    return v;
  });
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, gaussian);
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, gaussian);
  unary("neg", [](const Tensor& x) { return neg(x); }, gaussian);
  unary("softmax_row", [](const Tensor& x) { return softmax_row(x); }, gaussian);
  unary("log_softmax_row", [](const Tensor& x) { return log_softmax_row(x); }, gaussian);
  unary("sum", [](const Tensor& x) { return sum(mul(x, x)); }, gaussian);
  unary("mean", [](const Tensor& x) { return mean(mul(x, x)); }, gaussian);
  unary("clip_by_value", [](const Tensor& x) { return clip_by_value(x, -1.0, 1.0); },
        [](Rng& rng, std::size_t n) { return away_from(rng, n, {-1.0, 1.0}, 1e-3); });
  unary("slice_cols", [](const Tensor& x) { return slice_cols(x, 0, (x.cols() + 1) / 2); }, gaussian);
  unary("slice_rows", [](const Tensor& x) { return slice_rows(x, x.rows() / 2, x.rows()); }, gaussian);
  unary("gather_rows", [](const Tensor& x) {
    std::vector<std::size_t> rows{x.rows() - 1, 0, x.rows() - 1};
    return gather_rows(x, rows);
  }, gaussian);
  unary("pick", [](const Tensor& x) {
    std::vector<std::size_t> cols(x.rows());
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = (3 * i) % x.cols();
    return pick(x, cols);
  }, gaussian);

  auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op,
                    bool broadcast_b, bool separated) {
    cases.push_back({name, [=](ParamSet& ps, Rng& rng) -> LossFn {
                       auto [r, c] = dims(rng);
                       ps.add("a", Shape::matrix(r, c), normals(rng, r * c));
                       const std::size_t rb = broadcast_b ? 1 : r;
                       std::vector<double> bv = normals(rng, rb * c);
                       if (separated) {
                         // Keep |a - b| well above the probe step.
                         for (std::size_t i = 0; i < bv.size(); ++i) {
                           const double a = ps[0].value[i];
                           if (std::abs(a - bv[i]) < 1e-2) bv[i] = a + 0.5;
                         }
                       }
                       ps.add("b", Shape::matrix(rb, c), bv);
                       const std::uint64_t s = rng.next_u64();
                       return [op, s](Tape& t, const Binding& b) {
                         Rng w(s);
                         return readout(t, op(b[0], b[1]), w);
                       };
                     }});
  };
  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, false, false);
  binary("add_broadcast", [](const Tensor& a, const Tensor& b) { return add(a, b); }, true, false);
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, false, false);
  binary("sub_broadcast", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, true, false);
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, false, false);
  binary("minimum", [](const Tensor& a, const Tensor& b) { return minimum(a, b); }, false, true);
  binary("maximum", [](const Tensor& a, const Tensor& b) { return maximum(a, b); }, false, true);
  binary("concat_cols", [](const Tensor& a, const Tensor& b) {
    std::vector<Tensor> p{a, b, a};
    return concat_cols(p);
  }, false, false);
  binary("concat_rows", [](const Tensor& a, const Tensor& b) {
    std::vector<Tensor> p{b, a};
    return concat_rows(p);
  }, false, false);

  cases.push_back({"matmul", [](ParamSet& ps, Rng& rng) -> LossFn {
                     const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
                     ps.add("a", Shape::matrix(m, k), normals(rng, m * k));
                     ps.add("b", Shape::matrix(k, n), normals(rng, k * n));
                     const std::uint64_t s = rng.next_u64();
                     return [s](Tape& t, const Binding& b) {
                       Rng w(s);
                       return readout(t, matmul(b[0], b[1]), w);
                     };
                   }});
  cases.push_back({"additive_attention_scores", [](ParamSet& ps, Rng& rng) -> LossFn {
                     const std::size_t tr = 1 + rng.below(4), l = 1 + rng.below(6), d = 1 + rng.below(5);
                     ps.add("q", Shape::matrix(tr, d), normals(rng, tr * d));
                     ps.add("keys", Shape::matrix(l, d), normals(rng, l * d));
                     ps.add("v", Shape::vector(d), normals(rng, d));
                     const std::uint64_t s = rng.next_u64();
                     return [s](Tape& t, const Binding& b) {
                       Rng w(s);
                       return readout(t, softmax_row(additive_attention_scores(b[0], b[1], b[2])), w);
                     };
                   }});
  return cases;
}

}  // namespace

TEST_CASE("randomized gradient check over every op kind") {
  const auto cases = op_cases();
  int checked = 0;
  for (const Case& c : cases) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Rng rng = Rng::stream(seed, std::hash<std::string>{}(c.name));
      ParamSet ps;
      LossFn loss = c.make(ps, rng);
      auto report = grad_check(ps, loss, kTol);
      INFO(c.name << " seed " << seed << " worst " << report.worst);
      CHECK(report.passed);
      ++checked;
    }
  }
  CHECK(checked >= 100);
}

TEST_CASE("linear regression on four points passes") {
  Rng rng(5);
  ParamSet ps;
  ps.add("w", Shape::matrix(2, 1), normals(rng, 2));
  ps.add("b", Shape::matrix(1, 1), {0.1});
  const std::vector<double> x{0, 1, 1, 0, 1, 1, 2, -1};
  const std::vector<double> y{1, 2, 4, 0};
  auto loss = [&](Tape& t, const Binding& b) {
    Tensor xs = t.constant(Shape::matrix(4, 2), x);
    Tensor ys = t.constant(Shape::matrix(4, 1), y);
    Tensor err = sub(add(matmul(xs, b[0]), b[1]), ys);
    return mean(mul(err, err));
  };
  auto report = grad_check(ps, loss, kTol);
  CHECK(report.passed);
  CHECK(report.entries.size() == 2);
}

TEST_CASE("GRU cell with 8 hidden units over 5 steps passes") {
  Rng rng(6);
  ParamSet ps;
  const std::size_t in = 3, hidden = 8, steps = 5;
  nn::Gru gru = nn::add_gru(ps, "gru", in, hidden, rng);
  // Non-zero biases so every bias path is exercised.
  for (std::size_t idx : {gru.bx, gru.bh})
    for (double& v : ps[idx].value) v = 0.1 * rng.normal();
  const auto xs = normals(rng, steps * in);
  const auto w = normals(rng, hidden);
  auto loss = [&](Tape& t, const Binding& b) {
    Tensor gx = nn::gru_input(b, gru, t.constant(Shape::matrix(steps, in), xs));
    Tensor h = t.constant(Shape::matrix(1, hidden), std::vector<double>(hidden, 0.0));
    Tensor acc = t.constant(Shape::scalar(), {0.0});
    for (std::size_t s = 0; s < steps; ++s) {
      h = nn::gru_step(b, gru, slice_rows(gx, s, s + 1), h);
      acc = add(acc, sum(mul(h, t.constant(Shape::matrix(1, hidden), w))));
    }
    return acc;
  };
  auto report = grad_check(ps, loss, kTol);
  INFO("worst " << report.worst);
  CHECK(report.passed);
}

TEST_CASE("random three-layer net matches finite differences") {
  Rng rng(8);
  ParamSet ps;
  auto l1 = nn::add_linear(ps, "l1", 4, 6, rng);
  auto l2 = nn::add_linear(ps, "l2", 6, 5, rng);
  auto l3 = nn::add_linear(ps, "l3", 5, 3, rng);
  for (auto& p : {l1.b, l2.b, l3.b})
    for (double& v : ps[p].value) v = 0.1 * rng.normal();
  const auto x = normals(rng, 7 * 4);
  const std::vector<std::size_t> labels{0, 2, 1, 1, 0, 2, 2};
  auto loss = [&](Tape& t, const Binding& b) {
    Tensor h = tanh(nn::linear(b, l1, t.constant(Shape::matrix(7, 4), x)));
    h = sigmoid(nn::linear(b, l2, h));
    Tensor lp = log_softmax_row(nn::linear(b, l3, h));
    return neg(mean(pick(lp, labels)));
  };
  auto report = grad_check(ps, loss, kTol);
  CHECK(report.passed);
}

TEST_CASE("a corrupted backward rule is reported as a failure") {
  ParamSet ps;
  ps.add("x", Shape::vector(3), {0.5, -1.0, 2.0});
  // x^2 with a deliberately wrong derivative 3x.
  auto bad_square = [](const Tensor& x) {
    std::vector<double> y;
    for (double v : x.values()) y.push_back(v * v);
    const std::size_t ix = x.id();
    return x.tape().record(x.shape(), y, {x}, [ix](Tape& t, std::size_t out) {
      auto g = t.grad_of(out);
      auto xv = t.value(ix);
      auto gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 3.0 * xv[i];
    });
  };
  auto loss = [&](Tape&, const Binding& b) { return sum(bad_square(b[0])); };
  auto report = grad_check(ps, loss, kTol);
  CHECK_FALSE(report.passed);
  CHECK_FALSE(report.entries[0].passed);
  CHECK(report.worst > 0.1);
}

TEST_CASE("global-norm clipping rescales to the limit") {
  ParamGrads g{{3.0, 0.0}, {4.0}};
  const double before = clip_by_global_norm(g, 0.5);
  CHECK(before == doctest::Approx(5.0));
  CHECK(global_norm(g) == doctest::Approx(0.5));
  CHECK(g[0][0] == doctest::Approx(0.3));
  ParamGrads small{{0.1}};
  clip_by_global_norm(small, 0.5);
  CHECK(small[0][0] == 0.1);
}

TEST_CASE("Adam first step moves each weight by about lr against the gradient sign") {
  ParamSet ps;
  ps.add("w", Shape::vector(2), {1.0, 1.0});
  Adam opt(ps);
  opt.step(ps, {{0.5, -2.0}}, 0.01);
  CHECK(ps[0].value[0] == doctest::Approx(0.99).epsilon(1e-4));
  CHECK(ps[0].value[1] == doctest::Approx(1.01).epsilon(1e-4));
}

TEST_CASE("orthogonal init is orthogonal") {
  Rng rng(9);
  auto q = nn::orthogonal(16, rng);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 16; ++k) s += q[k * 16 + i] * q[k * 16 + j];
      CHECK(s == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
    }
}

TEST_CASE("packaged gradient-check suite passes at 1e-4") {
  const auto suite = dtsil::gradient_check_suite(kTol);
  CHECK(suite.size() >= 30);
  for (const auto& c : suite) {
    INFO(c.name << " worst " << c.report.worst);
    CHECK(c.report.passed);
  }
}
