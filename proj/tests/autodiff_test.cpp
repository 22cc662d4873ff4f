#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "mia/gradcheck.hpp"
#include "mia/objectives.hpp"
#include "support.hpp"

using namespace mia;
using mia::testing::random_tensor;

namespace {

Parameter make_param(const std::string& name, Tensor value) {
  Parameter p;
  p.name = name;
  p.grad = Tensor(value.shape());
  p.value = std::move(value);
  return p;
}

// Checks d/dx of sum(op(x...) * w) for a random projection w, over every entry of every input.
void check_primitive(const std::string& what, std::vector<Tensor> inputs,
                     const std::function<Var(Graph&, std::vector<Var>&)>& op, double tol = 1e-6) {
  CAPTURE(what);
  std::vector<Parameter> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back(make_param(what + std::to_string(i), inputs[i]));
  Graph g;
  std::vector<Var> vars;
  for (auto& p : params) vars.push_back(g.param(p));
  Var out = op(g, vars);
  g.evaluate();
  Rng rng(99);
  Var root = sum_all(mul(out, g.constant(random_tensor(out.shape(), rng))));
  std::vector<Parameter*> ptrs;
  std::size_t total = 0;
  for (auto& p : params) {
    ptrs.push_back(&p);
    total += p.value.numel();
  }
  auto r = finite_difference_check(g, root, ptrs, std::min<std::size_t>(total, 60), 1e-5, 3);
  CHECK(r.samples.size() > 0);
  CHECK(r.max_rel_error <= tol);
}

}  // namespace

TEST_CASE("forward values of basic ops") {
  Graph g;
  Var x = g.constant(Tensor::vector({-1.0, 0.0, 2.0}));
  Var r = relu(x);
  Var s = softmax(g.constant(Tensor::vector({0.0, 0.0})));
  Var c = cosine(g.constant(Tensor::vector({1.0, 0.0})), g.constant(Tensor::vector({1.0, 1.0})));
  g.evaluate();
  CHECK(r.value() == Tensor::vector({0.0, 0.0, 2.0}));
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));
  CHECK(c.value()[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-10));
}

TEST_CASE("backward of x*x and cosine at parallel vectors") {
  Parameter x = make_param("x", Tensor::vector({3.0}));
  Graph g;
  Var xv = g.param(x);
  Var f = mul(xv, xv);
  g.evaluate();
  g.backward(f);
  CHECK(x.grad[0] == doctest::Approx(6.0));

  Parameter a = make_param("a", Tensor::vector({0.3, -1.2, 2.0}));
  Graph h;
  Var av = h.param(a);
  Var cs = cosine(av, h.constant(a.value));
  h.evaluate();
  h.backward(cs);
  for (double v : a.grad.values()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("softmax cross-entropy gradient at uniform logits") {
  Parameter logits = make_param("logits", Tensor({1, 4}));
  Graph g;
  Var loss = softmax_cross_entropy(g.param(logits), {0});
  g.evaluate();
  g.backward(loss);
  CHECK(loss.value()[0] == doctest::Approx(std::log(4.0)));
  const double expected[] = {-0.75, 0.25, 0.25, 0.25};
  for (int k = 0; k < 4; ++k) CHECK(logits.grad[k] == doctest::Approx(expected[k]).epsilon(1e-12));
}

TEST_CASE("every primitive matches central differences") {
  Rng rng(5);
  auto R = [&](Shape s, double scale = 1.0) { return random_tensor(std::move(s), rng, scale); };
  Tensor positive = R({3, 4});
  for (auto& v : positive.values()) v = 0.5 + std::abs(v);

  check_primitive("add", {R({3, 4}), R({1, 4})}, [](Graph&, auto& v) { return add(v[0], v[1]); });
  check_primitive("sub", {R({3, 4}), R({3, 1})}, [](Graph&, auto& v) { return sub(v[0], v[1]); });
  check_primitive("mul", {R({3, 4}), R({3, 4})}, [](Graph&, auto& v) { return mul(v[0], v[1]); });
  check_primitive("scale", {R({5})}, [](Graph&, auto& v) { return scale(v[0], -2.5); });
  check_primitive("relu", {R({4, 5})}, [](Graph&, auto& v) { return relu(v[0]); });
  check_primitive("hinge", {R({4, 5})}, [](Graph&, auto& v) { return hinge(v[0]); });
  check_primitive("sigmoid", {R({6})}, [](Graph&, auto& v) { return sigmoid(v[0]); });
  check_primitive("tanh", {R({6})}, [](Graph&, auto& v) { return mia::tanh(v[0]); });
  check_primitive("exp", {R({6}, 0.5)}, [](Graph&, auto& v) { return mia::exp(v[0]); });
  check_primitive("log", {positive}, [](Graph&, auto& v) { return mia::log(v[0]); });
  check_primitive("matmul", {R({3, 4}), R({4, 2})}, [](Graph&, auto& v) { return matmul(v[0], v[1]); });
  check_primitive("matmul_t", {R({3, 4}), R({5, 4})}, [](Graph&, auto& v) { return matmul(v[0], v[1], true); });
  check_primitive("bmm", {R({2, 3, 4}), R({2, 4, 2})}, [](Graph&, auto& v) { return bmm(v[0], v[1]); });
  check_primitive("reshape", {R({2, 6})}, [](Graph&, auto& v) { return reshape(v[0], {3, 4}); });
  check_primitive("permute", {R({2, 3, 4})}, [](Graph&, auto& v) { return permute(v[0], {2, 0, 1}); });
  check_primitive("transpose", {R({2, 5})}, [](Graph&, auto& v) { return transpose(v[0]); });
  check_primitive("concat", {R({2, 3}), R({2, 2})}, [](Graph&, auto& v) { return concat({v[0], v[1]}, 1); });
  check_primitive("slice", {R({5, 3})}, [](Graph&, auto& v) { return slice(v[0], 0, 1, 3); });
  check_primitive("gather_rows", {R({4, 3})}, [](Graph&, auto& v) { return gather_rows(v[0], {2, 0, 2, 3}); });
  check_primitive("mean", {R({3, 4, 2})}, [](Graph&, auto& v) { return mean(v[0], 1); });
  check_primitive("sum_all", {R({3, 4})}, [](Graph&, auto& v) { return sum_all(v[0]); });
  check_primitive("softmax", {R({3, 5})}, [](Graph&, auto& v) { return softmax(v[0]); });
  check_primitive("l2_norm", {R({3, 5})}, [](Graph&, auto& v) { return l2_norm(v[0]); });
  check_primitive("normalize_rows", {R({3, 5})}, [](Graph&, auto& v) { return normalize_rows(v[0]); });
  check_primitive("cosine_rows", {R({3, 5}), R({3, 5})}, [](Graph&, auto& v) { return cosine_rows(v[0], v[1]); });
  check_primitive("cosine", {R({7}), R({7})}, [](Graph&, auto& v) { return cosine(v[0], v[1]); });
  check_primitive("conv2d", {R({2, 2, 6, 4}), R({3, 2, 3, 3}), R({3})},
                  [](Graph&, auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); });
  check_primitive("softmax_ce", {R({3, 4})},
                  [](Graph&, auto& v) { return softmax_cross_entropy(v[0], {1, 3, 0}); });
}

TEST_CASE("softmax rows are normalized and cosine is scale invariant") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    Tensor x = random_tensor({4, 7}, rng, 3.0);
    Var s = softmax(g.constant(x));
    Tensor a = random_tensor({9}, rng), b = random_tensor({9}, rng);
    Tensor a_scaled = a;
    const double c = 0.1 + 10.0 * rng.uniform();
    for (auto& v : a_scaled.values()) v *= c;
    Var c1 = cosine(g.constant(a), g.constant(b));
    Var c2 = cosine(g.constant(a_scaled), g.constant(b));
    g.evaluate();
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        const double p = s.value()[r * 7 + k];
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        sum += p;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    CHECK(std::abs(c1.value()[0] - c2.value()[0]) <= 1e-9);
  }
}

TEST_CASE("evaluation is pure and gradients accumulate across uses") {
  Rng rng(1);
  Parameter w = make_param("w", random_tensor({3, 3}, rng));
  Graph g;
  Var wv = g.param(w);
  Var y = sum_all(add(matmul(wv, wv), wv));
  g.evaluate();
  const Tensor first = y.value();
  g.evaluate();
  CHECK(bit_identical(first, y.value()));
  g.backward(y);
  const Tensor once = w.grad;
  g.backward(y);
  for (std::size_t i = 0; i < once.numel(); ++i) CHECK(w.grad[i] == doctest::Approx(2.0 * once[i]));
}

TEST_CASE("graph error reporting") {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({4, 2}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);

  Var x = g.input("x", {2});
  Var y = sum_all(x);
  CHECK_THROWS_AS(g.backward(y), GraphError);  // before evaluate
  CHECK_THROWS_AS(g.evaluate({{"x", Tensor({3})}}), ShapeError);
  CHECK_THROWS_AS(g.evaluate({{"nope", Tensor({2})}}), GraphError);
  g.evaluate({{"x", Tensor::vector({1.0, 2.0})}});
  CHECK_THROWS_AS(g.backward(x), GraphError);  // non-scalar root
  CHECK(y.value()[0] == 3.0);

  Graph h;
  Var z = mia::log(h.constant(Tensor::vector({0.0, 1.0})));
  try {
    h.evaluate();
    FAIL("expected a non-finite error");
  } catch (const NonFiniteError& e) {
    CHECK(e.node_id == z.id);
  }
}

TEST_CASE("finite-difference check is exact on a quadratic") {
  Rng rng(2);
  Parameter theta = make_param("theta", random_tensor({10}, rng));
  Graph g;
  Var t = g.param(theta);
  Var loss = sum_all(mul(t, t));
  auto r = finite_difference_check(g, loss, {&theta}, 10, 1e-5, 1);
  CHECK(r.samples.size() == 10);
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("finite-difference check catches a corrupted backward rule") {
  Rng rng(3);
  Parameter theta = make_param("theta", random_tensor({6}, rng));
  Graph g;
  Var t = g.param(theta);
  // x^2 whose backward claims 3x instead of 2x.
  Var sq = g.add_node(
      "bad_square", {t}, t.shape(),
      [](Graph& gr, Node& n) {
        n.value = gr.in(n, 0);
        for (auto& v : n.value.values()) v *= v;
      },
      [](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          const Tensor& x = gr.in(n, 0);
          for (std::size_t i = 0; i < x.numel(); ++i) (*gx)[i] += n.grad[i] * 3.0 * x[i];
        }
      });
  auto r = finite_difference_check(g, sum_all(sq), {&theta}, 6, 1e-5, 1);
  CHECK(r.max_rel_error > 1e-2);
}

TEST_CASE("reevaluate_from matches a full evaluation") {
  Rng rng(4);
  Parameter a = make_param("a", random_tensor({3, 3}, rng));
  Parameter b = make_param("b", random_tensor({3, 3}, rng));
  Graph g;
  Var out = sum_all(relu(add(matmul(g.param(a), g.param(b)), g.param(a))));
  g.evaluate();
  b.value[4] += 0.25;
  g.reevaluate_from(b);
  const double partial = out.value()[0];
  g.evaluate();
  CHECK(partial == out.value()[0]);
}
