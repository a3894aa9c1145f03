#include <catch2/catch_amalgamated.hpp>

#include "dynrag/tensor.hpp"

using namespace dynrag;

namespace {

Tensor leaf_tensor(std::vector<double> data, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols, std::move(data));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and hand oracle") {
  Tape tape;
  Tensor a(2, 2, {3, -1, 2, 5});
  NodeId identity = tape.constant(Tensor(2, 2, {1, 0, 0, 1}));
  NodeId an = tape.constant(a);
  const Tensor& out = tape.value(tape.matmul(identity, an));
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.data[i] == a.data[i]);

  // [[1,2],[3,4]] x [[0],[1]] = [[2],[4]]
  NodeId m = tape.constant(Tensor(2, 2, {1, 2, 3, 4}));
  NodeId v = tape.constant(Tensor(2, 1, {0, 1}));
  const Tensor& prod = tape.value(tape.matmul(m, v));
  CHECK(prod.data[0] == 2.0);
  CHECK(prod.data[1] == 4.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  NodeId a = tape.constant(Tensor(2, 3, 1.0));
  NodeId b = tape.constant(Tensor(4, 5, 1.0));
  CHECK_THROWS_WITH(tape.matmul(a, b),
                    Catch::Matchers::ContainsSubstring("[2x3]") &&
                        Catch::Matchers::ContainsSubstring("[4x5]"));
}

TEST_CASE("matmul associativity on random tensors") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> dist(-2, 2);
  for (int iter = 0; iter < 20; ++iter) {
    std::size_t m = 1 + rng() % 4, k = 1 + rng() % 4, p = 1 + rng() % 4, q = 1 + rng() % 4;
    Tensor a(m, k), b(k, p), c(p, q);
    for (auto* t : {&a, &b, &c})
      for (double& v : t->data) v = dist(rng);
    Tape tape;
    NodeId an = tape.constant(a), bn = tape.constant(b), cn = tape.constant(c);
    const Tensor& left = tape.value(tape.matmul(tape.matmul(an, bn), cn));
    const Tensor& right = tape.value(tape.matmul(an, tape.matmul(bn, cn)));
    for (std::size_t i = 0; i < left.size(); ++i)
      CHECK(std::abs(left.data[i] - right.data[i]) < 1e-9);
  }
}

TEST_CASE("concat of row vectors") {
  Tape tape;
  NodeId a = tape.constant(Tensor::row({1, 2}));
  NodeId b = tape.constant(Tensor::row({3}));
  const Tensor& out = tape.value(tape.concat_cols(a, b));
  CHECK(out.cols == 3);
  CHECK(out.data == std::vector<double>{1, 2, 3});
}

TEST_CASE("concat gradient splits back by linearity") {
  Tensor a = leaf_tensor({1, 2, 3}, 1, 3);
  Tensor b = leaf_tensor({4, 5}, 1, 2);
  Tape tape;
  NodeId loss = tape.sum(tape.concat_cols(tape.leaf(a), tape.leaf(b)));
  tape.backward(loss);
  CHECK(a.grad == std::vector<double>{1, 1, 1});
  CHECK(b.grad == std::vector<double>{1, 1});
}

TEST_CASE("softmax fixtures") {
  Tape tape;
  const Tensor& uniform = tape.value(tape.softmax_rows(tape.constant(Tensor::row({0, 0, 0}))));
  for (double v : uniform.data) CHECK(std::abs(v - 1.0 / 3.0) < 1e-15);

  const Tensor& two = tape.value(tape.softmax_rows(tape.constant(Tensor::row({1, 0}))));
  CHECK(std::abs(two.data[0] - 0.7310585786300049) < 1e-6);
  CHECK(std::abs(two.data[1] - 0.2689414213699951) < 1e-6);

  // Max-subtraction keeps huge logits finite.
  const Tensor& big = tape.value(tape.softmax_rows(tape.constant(Tensor::row({1000, 0}))));
  CHECK(big.data[0] > 0.999999);
  CHECK(big.data[1] < 1e-6);
  CHECK(std::isfinite(big.data[0]));
}

TEST_CASE("softmax sums to one with positive entries (property)") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-50, 50);
  for (int iter = 0; iter < 200; ++iter) {
    std::size_t n = 1 + rng() % 12;
    Tensor v(1, n);
    for (double& x : v.data) x = dist(rng);
    Tape tape;
    const Tensor& y = tape.value(tape.softmax_rows(tape.constant(v)));
    double sum = 0;
    for (double x : y.data) {
      CHECK(x > 0.0);
      CHECK(x < 1.0 + 1e-15);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("cross entropy fixtures") {
  Tape tape;
  // uniform logits, V=4 -> ln 4
  NodeId u = tape.cross_entropy(tape.constant(Tensor::row({0, 0, 0, 0})), 1);
  CHECK(std::abs(tape.value(u).data[0] - std::log(4.0)) < 1e-12);
  // logits [1,2,3], target 2 -> ln(1 + e^-1 + e^-2)
  NodeId h = tape.cross_entropy(tape.constant(Tensor::row({1, 2, 3})), 2);
  CHECK(std::abs(tape.value(h).data[0] - 0.4076059644443806) < 1e-12);
  // saturated: logits [0, 50], target 1 -> ~0
  NodeId s = tape.cross_entropy(tape.constant(Tensor::row({0, 50})), 1);
  CHECK(tape.value(s).data[0] >= 0.0);
  CHECK(tape.value(s).data[0] < 1e-12);
}

TEST_CASE("cross entropy target out of range") {
  Tape tape;
  CHECK_THROWS_AS(tape.cross_entropy(tape.constant(Tensor::row({0, 0})), 2), IndexError);
}

TEST_CASE("cross entropy non-negative (property)") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> dist(-10, 10);
  for (int iter = 0; iter < 100; ++iter) {
    std::size_t n = 2 + rng() % 8;
    Tensor v(1, n);
    for (double& x : v.data) x = dist(rng);
    Tape tape;
    CHECK(tape.value(tape.cross_entropy(tape.constant(v), rng() % n)).data[0] >= 0.0);
  }
}

TEST_CASE("backward linear and quadratic identities") {
  Tensor x = leaf_tensor({1, -2, 3}, 1, 3);
  {
    Tape tape;
    tape.backward(tape.sum(tape.leaf(x)));
    CHECK(x.grad == std::vector<double>{1, 1, 1});
  }
  x.zero_grad();
  {
    // loss = x . x  ->  grad = 2x
    Tape tape;
    NodeId xn = tape.leaf(x);
    tape.backward(tape.sum(tape.mul(xn, xn)));
    CHECK(x.grad == std::vector<double>{2, -4, 6});
  }
}

TEST_CASE("repeated backward is a state error; non-scalar loss a contract error") {
  Tensor x = leaf_tensor({1, 2}, 1, 2);
  Tape tape;
  NodeId xn = tape.leaf(x);
  NodeId loss = tape.sum(xn);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), StateError);

  Tape tape2;
  CHECK_THROWS_AS(tape2.backward(tape2.constant(Tensor::row({1, 2}))), ContractError);
}

TEST_CASE("gradient accumulates across fan-out") {
  Tensor x = leaf_tensor({2}, 1, 1);
  Tape tape;
  NodeId xn = tape.leaf(x);
  // loss = x + x -> dloss/dx = 2
  tape.backward(tape.add(xn, xn));
  CHECK(x.grad[0] == 2.0);
}

TEST_CASE("grad_check trivial cases") {
  Tensor x = leaf_tensor({1.5, -0.5, 2.0}, 1, 3);
  auto sum_sq = [&](bool with_grad) {
    Tape tape;
    NodeId xn = tape.leaf(x);
    NodeId loss = tape.sum(tape.mul(xn, xn));
    double v = tape.value(loss).data[0];
    if (with_grad) tape.backward(loss);
    return v;
  };
  auto res = grad_check(sum_sq, {{"x", &x}}, 1e-5);
  CHECK(res.max_rel_err < 1e-8);

  auto constant_fn = [&](bool with_grad) {
    Tape tape;
    NodeId xn = tape.leaf(x);
    NodeId loss = tape.scale(tape.sum(xn), 0.0);
    double v = tape.value(loss).data[0];
    if (with_grad) tape.backward(loss);
    return v;
  };
  auto res0 = grad_check(constant_fn, {{"x", &x}}, 1e-5);
  CHECK(res0.max_rel_err == 0.0);
}

// Randomly composed graphs of the supported ops vs finite differences.
TEST_CASE("backward matches finite differences on random graphs (property)") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (int iter = 0; iter < 12; ++iter) {
    std::size_t n = 2 + rng() % 4;
    Tensor a(n, n), b(n, n), c(1, n);
    for (auto* t : {&a, &b, &c})
      for (double& v : t->data) v = dist(rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    c.set_requires_grad(true);
    std::size_t variant = rng() % 4;
    std::size_t target = rng() % n;
    auto f = [&](bool with_grad) {
      Tape tape;
      NodeId an = tape.leaf(a), bn = tape.leaf(b), cn = tape.leaf(c);
      NodeId x = tape.tanh_(tape.matmul(an, bn));
      x = tape.add_row(x, cn);
      NodeId loss;
      switch (variant) {
        case 0: loss = tape.sum(tape.mul(tape.softmax_rows(x), bn)); break;
        case 1: loss = tape.cross_entropy(tape.take_row(x, 0), target); break;
        case 2: loss = tape.sum(tape.mul_row(tape.layer_norm_rows(x), cn)); break;
        default: loss = tape.sum(tape.matmul(tape.transpose(x), x)); break;
      }
      double v = tape.value(loss).data[0];
      if (with_grad) tape.backward(loss);
      return v;
    };
    auto res = grad_check(f, {{"a", &a}, {"b", &b}, {"c", &c}}, 1e-5);
    INFO("variant " << variant << " iter " << iter);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite tensors enforced") {
  Tape tape;
  Tensor bad(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(tape.constant(bad), NumericError);
}
