#include <cmath>

#include "doctest.h"
#include "trajmae/autodiff.hpp"
#include "trajmae/params.hpp"

using namespace trajmae;
using namespace trajmae::ad;

TEST_CASE("matmul by identity returns the other operand") {
  RngStream rng(3);
  Graph g;
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  for (std::size_t k : {1u, 2u, 5u}) {
    Tensor a(Shape{3, k});
    for (auto& x : a.storage()) x = rng.normal();
    const Var out = matmul(g.constant(eye), g.constant(a));
    CHECK(out.value().shape() == a.shape());
    CHECK(out.value().storage() == a.storage());
  }
}

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  const Var s = softmax(g.constant(Tensor::vector({0.0, 0.0, 0.0})), 0);
  for (double p : s.value().storage()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("layer norm of a constant row is zero before the affine terms") {
  Graph g;
  const Var x = g.constant(Tensor(Shape{2, 4}, 7.5));
  const Var y = layer_norm(x, g.constant(Tensor(Shape{4}, 1.0)), g.constant(Tensor(Shape{4}, 0.0)));
  for (double v : y.value().storage()) CHECK(v == 0.0);
  CHECK(y.value().all_finite());
}

TEST_CASE("shape contract violations throw") {
  Graph g;
  const Var a = g.constant(Tensor(Shape{2, 3}));
  const Var b = g.constant(Tensor(Shape{2, 3}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, g.constant(Tensor(Shape{4}))), ShapeError);
}

TEST_CASE("gradient of sum is all ones") {
  Graph g;
  const Var p = g.variable(Tensor(Shape{3, 2}, 0.25));
  g.backward(sum(p));
  for (double d : g.grad(p)) CHECK(d == 1.0);
}

TEST_CASE("gradient of an unrelated parameter is zero") {
  Graph g;
  const Var p = g.variable(Tensor(Shape{4}, 1.0));
  const Var q = g.variable(Tensor(Shape{4}, 2.0));
  g.backward(sum(mul(q, q)));
  for (double d : g.grad(p)) CHECK(d == 0.0);
}

namespace {

double two_layer_loss(const std::vector<Tensor>& w, Graph& g, std::vector<Var>* vars) {
  std::vector<Var> v;
  for (const auto& t : w) v.push_back(g.variable(t));
  if (vars) *vars = v;
  Tensor x(Shape{5, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(1.7 * static_cast<double>(i) + 0.3);
  const Var h = layer_norm(linear(g.constant(x), v[0], v[1]), v[2], v[3]);
  const Var o = linear(mul(h, h), v[4], v[5]);
  const Var loss = mean(huber(o, 0.5));
  if (vars) g.backward(loss);
  return loss.value().item();
}

}  // namespace

TEST_CASE("reverse mode matches central differences on a small network") {
  RngStream rng(11);
  std::vector<Tensor> w{Tensor(Shape{3, 4}), Tensor(Shape{4}), Tensor(Shape{4}), Tensor(Shape{4}),
                        Tensor(Shape{4, 2}), Tensor(Shape{2})};
  for (auto& t : w) {
    for (auto& x : t.storage()) x = 0.5 * rng.normal();
  }
  Graph g;
  std::vector<Var> vars;
  two_layer_loss(w, g, &vars);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::vector<double> analytic = g.grad(vars[i]);
    for (std::size_t j = 0; j < w[i].size(); ++j) {
      auto plus = w, minus = w;
      plus[i][j] += h;
      minus[i][j] -= h;
      Graph gp, gm;
      const double numeric = (two_layer_loss(plus, gp, nullptr) - two_layer_loss(minus, gm, nullptr)) / (2 * h);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("attention does not depend on key row order") {
  RngStream rng(5);
  Tensor q(Shape{3, 4}), k(Shape{5, 4}), v(Shape{5, 4});
  for (Tensor* t : {&q, &k, &v}) {
    for (auto& x : t->storage()) x = rng.normal();
  }
  AttentionLayout fwd, rev;
  std::vector<std::size_t> qs{0, 1, 2}, ks{0, 1, 2, 3, 4}, kr{4, 3, 2, 1, 0};
  fwd.add_group(qs, ks);
  rev.add_group(qs, kr);
  Graph g;
  const Var a = attention(g.constant(q), g.constant(k), g.constant(v), fwd, 2);
  const Var b = attention(g.constant(q), g.constant(k), g.constant(v), rev, 2);
  CHECK(a.value().storage() == b.value().storage());
}

TEST_CASE("Adam leaves parameters untouched under zero gradients") {
  ParamStore store;
  store.add("w", Tensor::vector({1.0, -2.0, 3.5}));
  const ParamStore before = store;
  for (int i = 0; i < 10; ++i) adam_step(store, GradMap{{"w", {0.0, 0.0, 0.0}}}, 1e-2);
  CHECK(store.value("w").storage() == before.value("w").storage());
}

TEST_CASE("first bias-corrected Adam step moves by lr") {
  ParamStore store;
  store.add("p", Tensor::scalar(0.5));
  adam_step(store, GradMap{{"p", {1.0}}}, 1e-3);
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
  CHECK(store.value("p").item() == doctest::Approx(0.5 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("identical Adam runs are bit identical") {
  auto run = [] {
    ParamStore s;
    RngStream init(9);
    s.add("a", init_normal(Shape{4, 3}, 0.1, init));
    RngStream gr(10);
    for (int i = 0; i < 20; ++i) {
      std::vector<double> grad(12);
      for (auto& x : grad) x = gr.normal();
      adam_step(s, GradMap{{"a", grad}}, 3e-3);
    }
    return s;
  };
  CHECK(run() == run());
}

TEST_CASE("rng streams are reproducible and tags separate them") {
  RngStream a(42, "x"), b(42, "x"), c(42, "y");
  bool differs = false;
  for (int i = 0; i < 16; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    differs = differs || va != c.next_u64();
  }
  CHECK(differs);
  RngStream r(7);
  r.uniform();
  RngStream restored = RngStream::from_state(r.key(), r.counter());
  CHECK(restored.next_u64() == r.next_u64());
}
