#include <doctest.h>

#include <cmath>

#include "kloc/autodiff.hpp"
#include "test_util.hpp"

using namespace kloc;
using namespace kloc::testutil;

TEST_CASE("matmul: identity and hand computation") {
  Tensor m = random_tensor({3, 3}, 11);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  Var prod = matmul(nullptr, make_constant(eye), make_constant(m));
  CHECK(max_abs_diff(prod->value, m) == 0.0);

  Var a = make_constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var b = make_constant(Tensor({2, 1}, {0, 1}));
  Var c = matmul(nullptr, a, b);
  CHECK(c->value.data[0] == doctest::Approx(2.0));
  CHECK(c->value.data[1] == doctest::Approx(4.0));
}

TEST_CASE("matmul: random case matches a triple-loop oracle") {
  // positive entries avoid cancellation, keeping the fp32 product within
  // honest relative-error range of the double oracle
  Tensor a = random_tensor({5, 7}, 21);
  Tensor b = random_tensor({7, 3}, 22);
  for (float& x : a.data) x = 0.1f + std::abs(x);
  for (float& x : b.data) x = 0.1f + std::abs(x);
  Var c = matmul(nullptr, make_constant(a), make_constant(b));

  // independent oracle: plain triple loop with double accumulation
  Tensor want = Tensor::zeros({5, 3});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 7; ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
      want.at(i, j) = static_cast<float>(s);
    }
  CHECK(max_rel_error(c->value, want) < 1e-6);
}

TEST_CASE("matmul: inner dimension mismatch raises a shape error") {
  Var a = make_constant(Tensor::zeros({2, 3}));
  Var b = make_constant(Tensor::zeros({4, 2}));
  CHECK_THROWS_AS(matmul(nullptr, a, b), Error);
  try {
    matmul(nullptr, a, b);
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Shape);
  }
}

TEST_CASE("softmax_rows: symmetry and row sums") {
  Var y = softmax_rows(nullptr, make_constant(Tensor({1, 3}, {0, 0, 0})));
  for (float v : y->value.data) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  Tensor r = random_tensor({6, 9}, 31, 3.0f);
  Var s = softmax_rows(nullptr, make_constant(r));
  for (int i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 9; ++j) sum += s->value.at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-5);
  }
}

TEST_CASE("layernorm: constant row with zero beta maps to zeros") {
  Var x = make_constant(Tensor({2, 4}, {5, 5, 5, 5, -1, -1, -1, -1}));
  Var g = make_constant(Tensor::full({4}, 1.0f));
  Var b = make_constant(Tensor::zeros({4}));
  Var y = layernorm(nullptr, x, g, b);
  for (float v : y->value.data) CHECK(std::abs(v) < 1e-5);
}

TEST_CASE("layernorm: rows have zero mean and unit variance before affine") {
  Tensor r = random_tensor({5, 16}, 41, 2.0f);
  Var y = layernorm(nullptr, make_constant(r), make_constant(Tensor::full({16}, 1.0f)),
                    make_constant(Tensor::zeros({16})));
  for (int i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += y->value.at(i, j);
    mean /= 16;
    for (int j = 0; j < 16; ++j) var += (y->value.at(i, j) - mean) * (y->value.at(i, j) - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("gelu matches a high-precision scalar reference") {
  Var y = gelu(nullptr, make_constant(Tensor({3}, {-3.0f, 0.0f, 3.0f})));
  auto ref = [](long double x) { return 0.5L * x * (1.0L + erfl(x / sqrtl(2.0L))); };
  CHECK(std::abs(y->value.data[0] - static_cast<double>(ref(-3.0L))) < 1e-5);
  CHECK(std::abs(y->value.data[1]) < 1e-7);
  CHECK(std::abs(y->value.data[2] - static_cast<double>(ref(3.0L))) < 1e-5);
}

TEST_CASE("elementwise ops reject non-finite values") {
  Tensor bad({2}, {1.0f, std::numeric_limits<float>::infinity()});
  CHECK_THROWS_AS(gelu(nullptr, make_constant(bad)), Error);
  CHECK_THROWS_AS(log_op(nullptr, make_constant(Tensor({1}, {0.0f}))), Error);  // log 0 -> -inf
  try {
    gelu(nullptr, make_constant(bad));
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Numeric);
  }
}

TEST_CASE("cross_entropy: saturated, analytic and oracle cases") {
  // target logit dominates -> loss ~ 0
  Tensor big = Tensor::zeros({1, 4});
  big.at(0, 2) = 1e4f;
  Var l0 = cross_entropy(nullptr, make_constant(big), {2});
  CHECK(l0->value.data[0] == doctest::Approx(0.0).epsilon(1e-6));

  // uniform logits over V=8 -> ln 8
  Var l1 = cross_entropy(nullptr, make_constant(Tensor::zeros({1, 8})), {5});
  CHECK(l1->value.data[0] == doctest::Approx(std::log(8.0)).epsilon(1e-6));

  // random 3x5 vs a direct log-sum-exp oracle
  Tensor r = random_tensor({3, 5}, 51, 2.0f);
  std::vector<int> targets = {4, 0, 2};
  Var l2 = cross_entropy(nullptr, make_constant(r), targets);
  double want = 0.0;
  for (int i = 0; i < 3; ++i) {
    double lse = 0.0;
    for (int j = 0; j < 5; ++j) lse += std::exp(static_cast<double>(r.at(i, j)));
    want += std::log(lse) - r.at(i, targets[i]);
  }
  want /= 3.0;
  CHECK(std::abs(l2->value.data[0] - want) < 1e-5);
  CHECK(l2->value.data[0] >= 0.0f);

  CHECK_THROWS_AS(cross_entropy(nullptr, make_constant(r), {4, 0, 5}), Error);  // target out of range
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST_CASE("backward: linear map gives all-ones gradient") {
  Tape tape;
  Var x = make_leaf(random_tensor({3, 4}, 61));
  Var loss = sum(&tape, x);
  tape.backward(loss);
  for (float g : x->grad_or_zero().data) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward: d(x*x)/dx at 3 is 6") {
  Tape tape;
  Var x = make_leaf(Tensor::scalar(3.0f));
  Var loss = mul(&tape, x, x);
  tape.backward(loss);
  CHECK(x->grad_or_zero().data[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: loss not on tape raises a graph error") {
  Tape tape;
  Var x = make_leaf(Tensor::scalar(1.0f));
  Var detached = sum(nullptr, x);
  CHECK_THROWS_AS(tape.backward(detached), Error);
}

TEST_CASE("backward: gradients of non-participating tensors are zero") {
  Tape tape;
  Var x = make_leaf(Tensor::scalar(2.0f));
  Var bystander = make_leaf(Tensor::scalar(5.0f));
  Var loss = mul(&tape, x, x);
  tape.backward(loss);
  CHECK(bystander->grad_or_zero().data[0] == 0.0f);
}

namespace {

// FD check under a random-weighted-sum loss (a plain sum is degenerate for
// softmax and layernorm, whose row sums are invariant). Leaves are shared
// across checks, so the analytic gradient is the delta this backward added.
// The 0.3 floor absorbs the fp32 forward noise on near-zero entries.
void check_grad(const Var& leaf, const std::function<Var(Tape*)>& build, double tol = 1e-3) {
  Var out_probe = build(nullptr);
  Var weights = make_constant(random_tensor(out_probe->value.shape, 4242, 1.0f));

  Tensor before = leaf->grad_or_zero();
  Tape tape;
  Var loss = sum(&tape, mul(&tape, build(&tape), weights));
  tape.backward(loss);
  Tensor analytic = leaf->grad_or_zero();
  for (size_t i = 0; i < analytic.data.size(); ++i) analytic.data[i] -= before.data[i];

  Tensor numeric = numeric_grad(
      leaf, [&]() { return sum(nullptr, mul(nullptr, build(nullptr), weights))->value.data[0]; });
  CHECK(max_rel_error(analytic, numeric, 0.3) < tol);
}

}  // namespace

TEST_CASE("finite differences agree for every primitive") {
  Var a = make_leaf(random_tensor({3, 4}, 71));
  Var b = make_leaf(random_tensor({4, 5}, 72));
  check_grad(a, [&](Tape* t) { return matmul(t, a, b); });
  check_grad(b, [&](Tape* t) { return matmul(t, a, b); });

  Var c = make_leaf(random_tensor({3, 4}, 73));
  check_grad(c, [&](Tape* t) { return mul(t, c, make_constant(random_tensor({3, 4}, 74))); });
  check_grad(c, [&](Tape* t) { return add(t, c, make_constant(random_tensor({3, 4}, 75))); });
  check_grad(c, [&](Tape* t) { return sub(t, make_constant(random_tensor({3, 4}, 76)), c); });
  check_grad(c, [&](Tape* t) { return gelu(t, c); });
  check_grad(c, [&](Tape* t) { return softmax_rows(t, c); });
  check_grad(c, [&](Tape* t) { return transpose(t, c); });
  check_grad(c, [&](Tape* t) { return scale(t, c, -1.7f); });
  check_grad(c, [&](Tape* t) { return slice_cols(t, c, 1, 3); });
  check_grad(c, [&](Tape* t) { return select_rows(t, c, {2, 0, 2}); });

  Var pos = make_leaf(random_tensor({2, 3}, 77, 0.3f));
  // keep log inputs positive
  for (float& x : pos->value.data) x = 1.0f + std::abs(x);
  check_grad(pos, [&](Tape* t) { return log_op(t, pos); });

  Var g = make_leaf(random_tensor({4}, 78));
  Var beta = make_leaf(random_tensor({4}, 79));
  Var x = make_leaf(random_tensor({3, 4}, 80));
  check_grad(x, [&](Tape* t) { return layernorm(t, x, g, beta); });
  check_grad(g, [&](Tape* t) { return layernorm(t, x, g, beta); });
  check_grad(beta, [&](Tape* t) { return layernorm(t, x, g, beta); });

  Var logits = make_leaf(random_tensor({3, 6}, 81, 2.0f));
  check_grad(logits, [&](Tape* t) { return cross_entropy(t, logits, {1, 5, 0}); });

  Var q = make_leaf(random_tensor({6, 4}, 82));
  Var k = make_leaf(random_tensor({6, 4}, 83));
  Var v = make_leaf(random_tensor({6, 4}, 84));
  check_grad(q, [&](Tape* t) { return causal_self_attention(t, q, k, v, 2, 3, 2); });
  check_grad(k, [&](Tape* t) { return causal_self_attention(t, q, k, v, 2, 3, 2); });
  check_grad(v, [&](Tape* t) { return causal_self_attention(t, q, k, v, 2, 3, 2); });

  Var row = make_leaf(random_tensor({4}, 85));
  Var base = make_leaf(random_tensor({3, 4}, 86));
  check_grad(row, [&](Tape* t) { return add_to_row(t, base, 1, row); });
  check_grad(base, [&](Tape* t) { return add_to_row(t, base, 1, row); });
}

TEST_CASE("replace_rows blocks gradient on replaced rows only") {
  Tape tape;
  Var x = make_leaf(random_tensor({3, 2}, 91));
  Var y = replace_rows(&tape, x, {1}, Tensor({1, 2}, {9.0f, 9.0f}));
  Var loss = sum(&tape, y);
  tape.backward(loss);
  const Tensor& g = x->grad_or_zero();
  CHECK(g.at(0, 0) == 1.0f);
  CHECK(g.at(1, 0) == 0.0f);
  CHECK(g.at(1, 1) == 0.0f);
  CHECK(g.at(2, 1) == 1.0f);
  CHECK(y->value.at(1, 0) == 9.0f);
}

TEST_CASE("forward replay is bit-identical") {
  Tensor a = random_tensor({4, 4}, 101);
  Tensor b = random_tensor({4, 4}, 102);
  Var c1 = gelu(nullptr, matmul(nullptr, make_constant(a), make_constant(b)));
  Var c2 = gelu(nullptr, matmul(nullptr, make_constant(a), make_constant(b)));
  CHECK(c1->value.data == c2->value.data);
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

TEST_CASE("optimizers: zero gradient leaves parameters unchanged") {
  Var p = make_leaf(Tensor::scalar(1.5f));
  std::vector<Var> params = {p};
  sgd_step(params, 0.1f);
  CHECK(p->value.data[0] == 1.5f);

  AdamState st;
  adam_step(params, st, AdamConfig{});
  CHECK(p->value.data[0] == 1.5f);
}

TEST_CASE("sgd: lr 0.1 with gradient 2 moves 1 to 0.8") {
  Var p = make_leaf(Tensor::scalar(1.0f));
  p->ensure_grad().data[0] = 2.0f;
  std::vector<Var> params = {p};
  sgd_step(params, 0.1f);
  CHECK(p->value.data[0] == doctest::Approx(0.8));
}

TEST_CASE("adam: 100 steps on (x-5)^2 converge from 0") {
  Var x = make_leaf(Tensor::scalar(0.0f));
  std::vector<Var> params = {x};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.2f;
  for (int i = 0; i < 100; ++i) {
    Tape tape;
    Var diff = add(&tape, x, make_constant(Tensor::scalar(-5.0f)));
    Var loss = mul(&tape, diff, diff);
    zero_grads(params);
    tape.backward(loss);
    adam_step(params, st, cfg);
  }
  CHECK(std::abs(x->value.data[0] - 5.0f) < 1e-2);
}

TEST_CASE("optimizers refuse non-finite gradients") {
  Var p = make_leaf(Tensor::scalar(1.0f));
  p->ensure_grad().data[0] = std::numeric_limits<float>::quiet_NaN();
  std::vector<Var> params = {p};
  CHECK_THROWS_AS(sgd_step(params, 0.1f), Error);
  CHECK(p->value.data[0] == 1.0f);  // step refused, value untouched
  AdamState st;
  CHECK_THROWS_AS(adam_step(params, st, AdamConfig{}), Error);
  CHECK(p->value.data[0] == 1.0f);
}
