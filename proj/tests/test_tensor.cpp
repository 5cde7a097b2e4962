#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssat/rng.hpp"
#include "ssat/tensor.hpp"

using namespace ssat;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<real>(rng.uniform(lo, hi));
  return t;
}

// FD-check the gradient of sum(apply(kind, inputs)) w.r.t. inputs[wrt]
real op_fd_error(OpKind kind, std::vector<Tensor> inputs, std::size_t wrt, const OpAttrs& attrs = {},
                 real eps = real{1e-5}) {
  Tensor point = inputs[wrt].clone();
  auto fn = [&, kind, wrt](const Tensor& x) {
    std::vector<Tensor> ins = inputs;
    ins[wrt] = x;
    return sum(apply(kind, ins, attrs));
  };
  return finite_difference_check(fn, point, eps);
}

}  // namespace

TEST_CASE("softmax of uniform logits is uniform") {
  Tensor x = Tensor::from({3}, {0, 0, 0});
  Tensor y = softmax(x);
  for (real v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("gelu fixes zero") {
  Tensor y = gelu(Tensor::from({1}, {0}));
  CHECK(y.values()[0] == 0.0);
}

TEST_CASE("matmul shape rules") {
  Rng rng(7);
  Tensor a = random_tensor(rng, {2, 3});
  Tensor b = random_tensor(rng, {3, 4});
  CHECK(matmul(a, b).shape() == Shape{2, 4});

  Tensor bad = random_tensor(rng, {2, 4});
  CHECK_THROWS_WITH_AS(matmul(a, bad), doctest::Contains("matmul"), Error);
}

TEST_CASE("unknown op kind is rejected") {
  CHECK_THROWS_WITH_AS(apply(static_cast<OpKind>(999), {Tensor::scalar(1)}),
                       doctest::Contains("unknown op_kind"), Error);
}

TEST_CASE("backward of x*x at x=3 yields 6") {
  Tensor x = Tensor::scalar(3).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = mul(x, x);
  GradientMap grads = tape.backward(loss);
  CHECK(grads.grad(x).item() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("softmax cross-entropy gradient is probabilities minus one-hot") {
  Rng rng(11);
  Tensor logits = random_tensor(rng, {5}, -2, 2).set_requires_grad(true);
  Tensor target = Tensor::from({5}, {0, 0, 1, 0, 0});

  Tape tape;
  TapeScope scope(tape);
  Tensor loss = scale(sum(mul(target, log_softmax(logits))), -1);
  GradientMap grads = tape.backward(loss);

  Tensor probs = softmax(logits.detached());
  const auto& g = grads.grad(logits).values();
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(g[i] == doctest::Approx(probs.values()[i] - target.values()[i]).epsilon(1e-12));
}

TEST_CASE("three-op chain matches finite differences") {
  Rng rng(13);
  Tensor a = random_tensor(rng, {4, 4});
  Tensor b = random_tensor(rng, {4, 4});
  auto fn = [&](const Tensor& x) { return sum(gelu(matmul(x, b))); };
  CHECK(finite_difference_check(fn, a, real{1e-5}) < 1e-6);
}

TEST_CASE("finite_difference_check basics") {
  Rng rng(17);
  Tensor w = random_tensor(rng, {6});

  SUBCASE("linear function is exact to round-off") {
    auto fn = [&](const Tensor& x) { return sum(mul(x, w)); };
    CHECK(finite_difference_check(fn, random_tensor(rng, {6}), real{1e-5}) < 1e-9);
  }
  SUBCASE("cubic") {
    auto fn = [](const Tensor& x) { return sum(power(x, 3)); };
    CHECK(finite_difference_check(fn, random_tensor(rng, {6}, 0.5, 2.0), real{1e-5}) < 1e-6);
  }
  SUBCASE("epsilon must be positive") {
    auto fn = [](const Tensor& x) { return sum(x); };
    CHECK_THROWS_AS(finite_difference_check(fn, w, 0), Error);
  }
}

TEST_CASE("backward contract errors") {
  Tensor x = Tensor::scalar(2).set_requires_grad(true);

  SUBCASE("non-scalar loss") {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = add(Tensor::from({2}, {1, 2}), x);
    CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("scalar"), Error);
  }
  SUBCASE("detached loss") {
    Tape tape;
    Tensor loss = Tensor::scalar(1);
    CHECK_THROWS_WITH_AS(tape.backward(loss), doctest::Contains("detached"), Error);
  }
  SUBCASE("second backward without reset errors, reset recovers") {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = mul(x, x);
    tape.backward(loss);
    CHECK_THROWS_WITH_AS(tape.backward(loss), doctest::Contains("consumed"), Error);
    tape.reset();
    Tensor loss2 = mul(x, x);
    CHECK(tape.backward(loss2).grad(x).item() == doctest::Approx(4.0));
  }
}

TEST_CASE("gradient accumulates over repeated use of a leaf") {
  Tensor x = Tensor::scalar(1.5).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = add(mul(x, x), scale(x, 3));  // x^2 + 3x -> 2x + 3 = 6
  CHECK(tape.backward(loss).grad(x).item() == doctest::Approx(6.0));
}

TEST_CASE("softmax rows are stochastic and shift invariant") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {4, 7}, -30, 30);
    Tensor y = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      real s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        const real v = y.values()[r * 7 + c];
        CHECK(v >= 0);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    const real shift = static_cast<real>(rng.uniform(-5, 5));
    Tensor xs = add(x, Tensor::full({7}, shift));
    Tensor ys = softmax(xs);
    for (std::size_t i = 0; i < y.numel(); ++i)
      CHECK(std::fabs(ys.values()[i] - y.values()[i]) < 1e-12);
  }
}

TEST_CASE("index_select accumulates over repeated indices") {
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = index_select(x, {1, 1, 2});
  CHECK(y.shape() == Shape{3, 2});
  GradientMap grads = tape.backward(sum(y));
  const auto& g = grads.grad(x).values();
  CHECK(g == std::vector<real>{0, 0, 2, 2, 1, 1});
}

TEST_CASE("concat splits gradients") {
  Tensor a = Tensor::from({1, 2}, {1, 2}).set_requires_grad(true);
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6}).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = concat(a, b, 0);
  CHECK(y.shape() == Shape{3, 2});
  Tensor loss = sum(mul(y, y.detached()));
  GradientMap grads = tape.backward(loss);
  CHECK(grads.grad(a).values() == std::vector<real>{1, 2});
  CHECK(grads.grad(b).values() == std::vector<real>{3, 4, 5, 6});
}

TEST_CASE("broadcast add over leading batch dims only") {
  Tensor big = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor small = Tensor::from({2}, {10, 20});
  Tensor y = add(big, small);
  CHECK(y.values() == std::vector<real>{11, 22, 13, 24});
  CHECK_THROWS_WITH_AS(add(big, Tensor::from({3}, {1, 2, 3})),
                       doctest::Contains("broadcastable"), Error);
}

TEST_CASE("constant inputs never enter the tape") {
  Tensor c = Tensor::from({2}, {1, 2});
  Tape tape;
  TapeScope scope(tape);
  Tensor y = add(c, c);
  CHECK(tape.num_records() == 0);
  CHECK_FALSE(y.requires_grad());
}

// the blanket gradient-correctness property: every op kind, random instances
TEST_CASE("every op kind passes the finite-difference oracle") {
  Rng rng(101);
  constexpr real kTol = real{1e-5};
  constexpr int kInstances = 5;

  for (int inst = 0; inst < kInstances; ++inst) {
    const std::size_t B = 1 + inst % 2;
    const std::size_t n = 3 + inst % 3;
    const std::size_t d = 4 + 2 * (inst % 2);

    for (OpKind kind : all_op_kinds) {
      CAPTURE(op_name(kind));
      CAPTURE(inst);
      OpAttrs attrs;
      std::vector<Tensor> inputs;
      switch (kind) {
        case OpKind::matmul:
          inputs = {random_tensor(rng, {B, n, d}), random_tensor(rng, {B, d, n})};
          break;
        case OpKind::linear:
          inputs = {random_tensor(rng, {B, n, d}), random_tensor(rng, {d + 1, d}),
                    random_tensor(rng, {d + 1})};
          break;
        case OpKind::add:
        case OpKind::mul:
          inputs = {random_tensor(rng, {B, n, d}), random_tensor(rng, {d})};
          break;
        case OpKind::scale:
          attrs.scalar = static_cast<real>(rng.uniform(-2, 2));
          inputs = {random_tensor(rng, {n, d})};
          break;
        case OpKind::scale_rows:
          attrs.weights.clear();
          for (std::size_t i = 0; i < B; ++i)
            attrs.weights.push_back(static_cast<real>(rng.uniform(-2, 2)));
          inputs = {random_tensor(rng, {B, n, d})};
          break;
        case OpKind::transpose:
          attrs.axis_a = 0;
          attrs.axis_b = 2;
          inputs = {random_tensor(rng, {B, n, d})};
          break;
        case OpKind::reshape:
          attrs.shape = {n * d};
          inputs = {random_tensor(rng, {n, d})};
          break;
        case OpKind::concat:
          attrs.axis_a = 1;
          inputs = {random_tensor(rng, {B, n, d}), random_tensor(rng, {B, 2, d})};
          break;
        case OpKind::index_select:
          attrs.indices = {0, 2, 2};
          inputs = {random_tensor(rng, {B, n, d})};
          break;
        case OpKind::scatter_tokens:
          attrs.indices = {1, 3};
          attrs.count = n + 2;
          inputs = {random_tensor(rng, {B, 2, d}), random_tensor(rng, {d})};
          break;
        case OpKind::prepend_token:
          inputs = {random_tensor(rng, {B, n, d}), random_tensor(rng, {d})};
          break;
        case OpKind::softmax:
        case OpKind::log_softmax:
          inputs = {random_tensor(rng, {B, n, d}, -3, 3)};
          break;
        case OpKind::layer_norm:
          attrs.scalar = real{1e-6};
          inputs = {random_tensor(rng, {B, n, d}), random_tensor(rng, {d}, 0.5, 1.5),
                    random_tensor(rng, {d})};
          break;
        case OpKind::gelu:
        case OpKind::exp:
          inputs = {random_tensor(rng, {n, d}, -2, 2)};
          break;
        case OpKind::log:
          inputs = {random_tensor(rng, {n, d}, 0.5, 3.0)};
          break;
        case OpKind::power:
          attrs.scalar = real{3};
          inputs = {random_tensor(rng, {n, d}, 0.5, 2.0)};
          break;
        case OpKind::sum:
        case OpKind::mean:
          inputs = {random_tensor(rng, {B, n, d})};
          break;
      }
      for (std::size_t wrt = 0; wrt < inputs.size(); ++wrt) {
        CAPTURE(wrt);
        CHECK(op_fd_error(kind, inputs, wrt, attrs) < kTol);
      }
    }
  }
}
