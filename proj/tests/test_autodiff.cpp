#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "ptopk/autodiff.hpp"
#include "ptopk/nn.hpp"
#include "ptopk/perturbed.hpp"
#include "ptopk/rng.hpp"

using namespace ptopk;

namespace {

Tensor rand_tensor(Uniform64& u, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<float>(lo + (hi - lo) * u.next_open01());
  return t;
}

// Norm-wise comparison of the tape gradient against central differences.
void gradcheck(const std::function<Var(Tape&, Var)>& build, const Tensor& x, double tol = 1e-3,
               double step = 1e-3) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var out = build(tape, xv);
  tape.backward(out);
  const Tensor& g = tape.grad(xv);

  Tensor fd = finite_difference(
      [&](const Tensor& xt) {
        Tape t2;
        Var x2 = t2.leaf(xt);
        return t2.scalar(build(t2, x2));
      },
      x, step);

  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < g.size(); ++i) {
    const double d = static_cast<double>(g[i]) - fd[i];
    num += d * d;
    den += static_cast<double>(fd[i]) * fd[i];
  }
  const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-6);
  INFO("relative gradient error " << rel);
  REQUIRE(rel <= tol);
}

// Scalarize a tensor-valued node against fixed weights.
Var pin(Tape& t, Var v, uint64_t key) {
  Uniform64 u(key);
  const int64_t n = t.value(v).size();
  Tensor w = rand_tensor(u, {static_cast<int>(n)}, -1.0, 1.0);
  Var flat_v = reshape(v, {static_cast<int>(n)});
  return dot(flat_v, t.leaf(w));
}

}  // namespace

TEST_CASE("backprop closed-form cases") {
  SECTION("sum gives all ones") {
    Tape t;
    Var w = t.leaf(Tensor({4}, {0.3f, -0.5f, 2.0f, 1.0f}));
    t.backward(sum_all(w));
    for (int i = 0; i < 4; ++i) REQUIRE(t.grad(w)[i] == 1.0f);
  }

  SECTION("dot(w, w)/2 gives w back") {
    Tape t;
    Tensor init({3}, {0.25f, -1.5f, 0.75f});
    Var w = t.leaf(init);
    t.backward(scale(dot(w, w), 0.5f));
    REQUIRE(max_abs_diff(t.grad(w), init) < 1e-6);
  }

  SECTION("non-scalar roots are rejected") {
    Tape t;
    Var w = t.leaf(Tensor({3}));
    REQUIRE_THROWS_AS(t.backward(w), std::invalid_argument);
  }

  SECTION("forward references are rejected at construction") {
    Tape t;
    (void)t.leaf(Tensor({1}));
    REQUIRE_THROWS_AS(t.append(Tensor({1}), "bogus", {3}, nullptr), std::invalid_argument);
  }
}

TEST_CASE("backprop linearity over random graphs") {
  Uniform64 u(555);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_tensor(u, {5});
    const float a = static_cast<float>(u.next_open01() * 4.0 - 2.0);
    const float b = static_cast<float>(u.next_open01() * 4.0 - 2.0);

    auto f = [](Tape& t, Var v) { return dot(v, relu(v)); };
    auto g = [](Tape& t, Var v) { return logsumexp1d(v); };

    Tape t1;
    Var v1 = t1.leaf(x);
    t1.backward(add(scale(f(t1, v1), a), scale(g(t1, v1), b)));

    Tape t2;
    Var v2 = t2.leaf(x);
    t2.backward(f(t2, v2));
    Tape t3;
    Var v3 = t3.leaf(x);
    t3.backward(g(t3, v3));

    for (int64_t i = 0; i < x.size(); ++i) {
      const double want = a * static_cast<double>(t2.grad(v2)[i]) + b * t3.grad(v3)[i];
      REQUIRE(std::abs(t1.grad(v1)[i] - want) < 1e-4);
    }
  }
}

TEST_CASE("primitive gradients match finite differences") {
  Uniform64 u(808);

  SECTION("elementwise and reductions") {
    Tensor x = rand_tensor(u, {6});
    gradcheck([](Tape& t, Var v) { return pin(t, add(v, scale(v, 0.5f)), 1); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, sub(v, scale(v, -2.0f)), 2); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, mul(v, add_const(v, 2.0f)), 3); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, vexp(v), 4); }, x);
    gradcheck([](Tape& t, Var v) { return sum_all(mul(v, v)); }, x);
    gradcheck([](Tape& t, Var v) { return mean_all(mul(v, v)); }, x);
    gradcheck([](Tape& t, Var v) { return logsumexp1d(v); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, sub_bscalar(v, logsumexp1d(v)), 5); }, x);
    gradcheck([](Tape& t, Var v) { return get_elem(mul(v, v), 3); }, x);
    // composition with small gradient components; step widened for fp32 noise
    gradcheck([](Tape& t, Var v) { return softmax_entropy(v); }, x, 1e-3, 5e-3);
    gradcheck([](Tape& t, Var v) { return cross_entropy(v, 2); }, x);

    // relu away from the kink
    Tensor xr = rand_tensor(u, {8});
    for (int64_t i = 0; i < xr.size(); ++i)
      if (std::abs(xr[i]) < 0.05f) xr[i] = 0.25f;
    gradcheck([](Tape& t, Var v) { return pin(t, relu(v), 6); }, xr);
  }

  SECTION("shape ops") {
    Tensor x = rand_tensor(u, {3, 4});
    gradcheck([](Tape& t, Var v) { return pin(t, reshape(v, {4, 3}), 7); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, transpose2d(v), 8); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, select_row(v, 1), 9); }, x);
    gradcheck(
        [](Tape& t, Var v) {
          return pin(t, stack_rows({select_row(v, 2), select_row(v, 0)}), 10);
        },
        x);
    gradcheck([](Tape& t, Var v) { return pin(t, concat_cols(v, mul(v, v)), 11); }, x);
  }

  SECTION("matmul") {
    Tensor x = rand_tensor(u, {3, 4});
    Uniform64 uw(99);
    Tensor w = rand_tensor(uw, {4, 2});
    Tensor w2 = rand_tensor(uw, {2, 3});
    gradcheck([&](Tape& t, Var v) { return pin(t, matmul(v, t.leaf(w)), 12); }, x);
    gradcheck([&](Tape& t, Var v) { return pin(t, matmul(t.leaf(w2), v), 13); }, x);
  }

  SECTION("row reductions and broadcasts") {
    Tensor x = rand_tensor(u, {4, 5});
    gradcheck([](Tape& t, Var v) { return pin(t, mean_rows(v), 14); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, lse_rows(v), 15); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, lse_cols(v), 16); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, bcast_add_col(v, lse_rows(v)), 17); }, x);
    gradcheck([](Tape& t, Var v) { return pin(t, bcast_add_row(v, lse_cols(v)), 18); }, x);

    // max_rows away from ties
    Tensor xm({3, 3}, {0.9f, -0.2f, 0.4f, 0.1f, 0.6f, -0.8f, -0.5f, 0.2f, 0.9f});
    gradcheck([](Tape& t, Var v) { return pin(t, max_rows(v), 19); }, xm);
  }

  SECTION("conv and pooling") {
    Tensor x = rand_tensor(u, {5, 5, 2});
    Uniform64 uw(123);
    Tensor w = rand_tensor(uw, {3, 3, 2, 3}, -0.5, 0.5);
    Tensor b = rand_tensor(uw, {3}, -0.2, 0.2);
    gradcheck([&](Tape& t, Var v) { return pin(t, conv2d_same(v, t.leaf(w), t.leaf(b)), 20); }, x);
    gradcheck([&](Tape& t, Var v) { return pin(t, conv2d_same(t.leaf(x), v, t.leaf(b)), 21); }, w);
    gradcheck([&](Tape& t, Var v) { return pin(t, conv2d_same(t.leaf(x), t.leaf(w), v), 22); }, b);
    gradcheck([](Tape& t, Var v) { return pin(t, avg_pool2d(v, 2, 2), 23); }, x);

    Tensor xp = rand_tensor(u, {4, 4, 1});
    gradcheck([](Tape& t, Var v) { return pin(t, max_pool2d(v, 2, 2), 24); }, xp);
  }

  SECTION("normalize_scores node") {
    Tensor x({5}, {0.9f, 0.1f, 0.5f, 0.3f, 0.7f});  // distinct, away from ties
    gradcheck([](Tape& t, Var v) { return pin(t, normalize_scores_node(v), 25); }, x, 2e-3);
  }
}

TEST_CASE("two-layer perceptron gradients match finite differences") {
  Uniform64 u(4242);
  Tensor x = rand_tensor(u, {4});
  Tensor w1 = rand_tensor(u, {5, 4});
  Tensor b1 = rand_tensor(u, {5}, -0.3, 0.3);
  Tensor w2 = rand_tensor(u, {1, 5});
  Tensor b2 = rand_tensor(u, {1}, -0.3, 0.3);

  auto net = [&](Tape& t, Var xv, Var w1v, Var b1v, Var w2v, Var b2v) {
    Var h = relu(affine(w1v, xv, b1v));
    return get_elem(affine(w2v, h, b2v), 0);
  };

  auto check_wrt = [&](int which, const Tensor& init) {
    gradcheck(
        [&, which](Tape& t, Var v) {
          Var xv = which == 0 ? v : t.leaf(x);
          Var w1v = which == 1 ? v : t.leaf(w1);
          Var b1v = which == 2 ? v : t.leaf(b1);
          Var w2v = which == 3 ? v : t.leaf(w2);
          Var b2v = which == 4 ? v : t.leaf(b2);
          return net(t, xv, w1v, b1v, w2v, b2v);
        },
        init);
  };
  check_wrt(0, x);
  check_wrt(1, w1);
  check_wrt(2, b1);
  check_wrt(3, w2);
  check_wrt(4, b2);
}
