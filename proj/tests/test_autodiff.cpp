#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "doctest.h"
#include "dtsil/autodiff.hpp"
#include "dtsil/rng.hpp"

using namespace dtsil;
using namespace dtsil::ad;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  Tensor x = tape.constant(Shape::vector(3), {0, 0, 0});
  auto y = vals(softmax_row(x));
  for (double v : y) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("identity times A is A") {
  Tape tape;
  Tensor eye = tape.constant(Shape::matrix(2, 2), {1, 0, 0, 1});
  std::vector<double> a{0.3, -1.7, 2.5, 4.0};
  Tensor A = tape.constant(Shape::matrix(2, 2), a);
  CHECK(vals(matmul(eye, A)) == a);
}

TEST_CASE("clip_by_value clamps to the interval") {
  Tape tape;
  Tensor x = tape.constant(Shape::vector(3), {-2, 0.5, 3});
  CHECK(vals(clip_by_value(x, -1, 1)) == std::vector<double>{-1, 0.5, 1});
}

TEST_CASE("gradient of sum is all ones") {
  Tape tape;
  Tensor x = tape.variable(Shape::vector(3), {0.2, -4, 7});
  auto g = tape.backward(sum(x));
  CHECK(std::vector<double>(g.of(x).begin(), g.of(x).end()) == std::vector<double>{1, 1, 1});
}

TEST_CASE("gradient of sum(x*x) at [1,2] is [2,4]") {
  Tape tape;
  Tensor x = tape.variable(Shape::vector(2), {1, 2});
  auto g = tape.backward(sum(mul(x, x)));
  CHECK(g.of(x)[0] == 2.0);
  CHECK(g.of(x)[1] == 4.0);
}

TEST_CASE("loss gradient with respect to itself is one") {
  Tape tape;
  Tensor x = tape.variable(Shape::scalar(), {3.0});
  Tensor y = scale(x, 1.0);
  auto g = tape.backward(y);
  CHECK(g.of(x)[0] == 1.0);
}

TEST_CASE("backward errors: consumed tape and non-scalar loss") {
  Tape tape;
  Tensor x = tape.variable(Shape::vector(2), {1, 2});
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
  Tensor s = sum(x);
  tape.backward(s);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(s), Error);
}

TEST_CASE("shape mismatches throw") {
  Tape tape;
  Tensor a = tape.constant(Shape::matrix(2, 3), std::vector<double>(6, 1.0));
  Tensor b = tape.constant(Shape::matrix(2, 2), std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(mul(a, b), ShapeError);
  CHECK_THROWS_AS(slice_cols(a, 2, 4), ShapeError);
  CHECK_THROWS_AS(tape.constant(Shape::matrix(2, 2), {1, 2, 3}), ShapeError);
  std::vector<std::size_t> bad{5};
  CHECK_THROWS_AS(gather_rows(a, bad), ShapeError);
}

TEST_CASE("non-finite outputs are rejected") {
  Tape tape;
  Tensor x = tape.variable(Shape::vector(2), {0.0, 1.0});
  CHECK_THROWS_AS(log(x), NonFiniteError);
  Tensor big = tape.constant(Shape::scalar(), {1000.0});
  CHECK_THROWS_AS(exp(big), NonFiniteError);
  CHECK_THROWS_AS(tape.constant(Shape::scalar(), {std::numeric_limits<double>::quiet_NaN()}),
                  Error);
}

TEST_CASE("row broadcast add sums gradients over rows") {
  Tape tape;
  Tensor a = tape.variable(Shape::matrix(3, 2), {1, 2, 3, 4, 5, 6});
  Tensor b = tape.variable(Shape::matrix(1, 2), {10, 20});
  Tensor y = add(a, b);
  CHECK(vals(y) == std::vector<double>{11, 22, 13, 24, 15, 26});
  auto g = tape.backward(sum(y));
  CHECK(g.of(b)[0] == 3.0);
  CHECK(g.of(b)[1] == 3.0);
}

TEST_CASE("softmax rows sum to one and stay positive") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(30);
    std::vector<double> x(r * c);
    for (double& v : x) v = 20.0 * rng.normal();
    Tape tape;
    auto y = vals(softmax_row(tape.constant(Shape::matrix(r, c), x)));
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        CHECK(y[i * c + j] >= 0.0);
        s += y[i * c + j];
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  // Moderate logits must stay strictly positive.
  Tape tape;
  auto y = vals(softmax_row(tape.constant(Shape::vector(3), {-30, 0, 30})));
  for (double v : y) CHECK(v > 0.0);
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Tape tape;
  Tensor x = tape.constant(Shape::matrix(2, 3), {0.1, -2, 3, 4, 4, 4});
  auto a = vals(log_softmax_row(x));
  auto b = vals(log(softmax_row(x)));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
}

TEST_CASE("pick, gather and concat route values") {
  Tape tape;
  Tensor a = tape.variable(Shape::matrix(3, 2), {1, 2, 3, 4, 5, 6});
  std::vector<std::size_t> cols{1, 0, 1};
  CHECK(vals(pick(a, cols)) == std::vector<double>{2, 3, 6});
  std::vector<std::size_t> rows{2, 2, 0};
  CHECK(vals(gather_rows(a, rows)) == std::vector<double>{5, 6, 5, 6, 1, 2});
  std::vector<Tensor> parts{a, a};
  CHECK(vals(concat_cols(parts)) == std::vector<double>{1, 2, 1, 2, 3, 4, 3, 4, 5, 6, 5, 6});
  CHECK(concat_rows(parts).rows() == 6);
  auto g = tape.backward(sum(gather_rows(a, rows)));
  CHECK(std::vector<double>(g.of(a).begin(), g.of(a).end()) ==
        std::vector<double>{1, 1, 0, 0, 2, 2});
}

TEST_CASE("clip gradient passes only strictly inside the interval") {
  Tape tape;
  Tensor x = tape.variable(Shape::vector(4), {-2, -1, 0.5, 3});
  auto g = tape.backward(sum(clip_by_value(x, -1, 1)));
  CHECK(std::vector<double>(g.of(x).begin(), g.of(x).end()) ==
        std::vector<double>{0, 0, 1, 0});
}

TEST_CASE("leaves unused by the loss get zero gradients") {
  Tape tape;
  Tensor x = tape.variable(Shape::vector(2), {1, 2});
  Tensor unused = tape.variable(Shape::vector(2), {3, 4});
  auto g = tape.backward(sum(x));
  CHECK(g.of(unused).size() == 2);
  CHECK(g.of(unused)[0] == 0.0);
}

TEST_CASE("grad-disabled tape records values without gradients") {
  Tape tape(false);
  Tensor x = tape.variable(Shape::vector(2), {1, 2});
  Tensor y = sum(mul(x, x));
  CHECK(y.item() == 5.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward and backward are bit-deterministic") {
  auto run = [] {
    Rng rng(11);
    std::vector<double> w(12 * 9), x(5 * 12), k(7 * 9), v(9);
    for (double& e : w) e = rng.normal();
    for (double& e : x) e = rng.normal();
    for (double& e : k) e = rng.normal();
    for (double& e : v) e = rng.normal();
    Tape tape;
    Tensor W = tape.variable(Shape::matrix(12, 9), w);
    Tensor X = tape.constant(Shape::matrix(5, 12), x);
    Tensor K = tape.variable(Shape::matrix(7, 9), k);
    Tensor V = tape.variable(Shape::vector(9), v);
    Tensor s = softmax_row(additive_attention_scores(tanh(matmul(X, W)), K, V));
    Tensor loss = sum(mul(s, s));
    auto g = tape.backward(loss);
    std::vector<double> out{loss.item()};
    for (const Tensor* t : {&W, &K, &V}) out.insert(out.end(), g.of(*t).begin(), g.of(*t).end());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}
