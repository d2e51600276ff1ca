#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "fieldseg/autodiff.hpp"
#include "fieldseg/optim.hpp"
#include "fieldseg/rng.hpp"
#include "fieldseg/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace fieldseg;
using testsupport::check_gradients;

namespace {
Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}
}  // namespace

TEST_CASE("tensor shape bookkeeping and errors") {
  Tensor t({2, 3}, 1.5);
  REQUIRE(t.numel() == 6);
  REQUIRE(t.at(1, 2) == 1.5);
  REQUIRE_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), ShapeError);
  REQUIRE_THROWS_AS(t.item(), ShapeError);
  REQUIRE(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("forward values: product, softmax symmetry, stop_gradient identity") {
  auto x = ad::Var::leaf(Tensor::scalar(3.0), true);
  REQUIRE(ad::mul(x, x).value().item() == Catch::Approx(9.0));

  auto z = ad::Var::leaf(Tensor({3}, {0.0, 0.0, 0.0}), true);
  Tensor sm = ad::softmax_last(z).value();
  for (int i = 0; i < 3; ++i) REQUIRE(sm[i] == Catch::Approx(1.0 / 3.0));

  auto y = ad::Var::leaf(Tensor::scalar(2.0), true);
  REQUIRE(ad::mul(ad::stop_gradient(y), y).value().item() == Catch::Approx(4.0));
}

TEST_CASE("reverse mode: x^2, fan-out accumulation, stop_gradient") {
  auto x = ad::Var::leaf(Tensor::scalar(3.0), true);
  ad::Var loss = ad::mul(x, x);
  ad::backward(loss);
  REQUIRE(x.grad().item() == Catch::Approx(6.0));

  // d(sg(x) * x)/dx = sg(x) = x, not 2x.
  auto y = ad::Var::leaf(Tensor::scalar(2.0), true);
  ad::Var loss2 = ad::mul(ad::stop_gradient(y), y);
  ad::backward(loss2);
  REQUIRE(y.grad().item() == Catch::Approx(2.0));

  // Fan-out: z used twice sums gradients.
  auto z = ad::Var::leaf(Tensor::scalar(1.5), true);
  ad::Var l3 = ad::add(ad::mul(z, z), ad::scale(z, 4.0));
  ad::backward(l3);
  REQUIRE(z.grad().item() == Catch::Approx(2.0 * 1.5 + 4.0));
}

TEST_CASE("backward rejects non-scalar roots and mismatched shapes error") {
  auto a = ad::Var::leaf(Tensor({2}, {1.0, 2.0}), true);
  REQUIRE_THROWS_AS(ad::backward(a), ShapeError);
  auto b = ad::Var::leaf(Tensor({3}, {1.0, 2.0, 3.0}), true);
  REQUIRE_THROWS_AS(ad::add(a, b), ShapeError);
  REQUIRE_THROWS_AS(ad::matmul(a, b), ShapeError);
}

TEST_CASE("clamp gradient passes on the closed interval only") {
  auto x = ad::Var::leaf(Tensor({4}, {-1.0, 0.0, 0.5, 2.0}), true);
  ad::Var loss = ad::sum_all(ad::clamp(x, 0.0, 1.0));
  ad::backward(loss);
  Tensor g = x.grad();
  REQUIRE(g[0] == 0.0);  // below the interval
  REQUIRE(g[1] == 1.0);  // exactly on the boundary: interior-side gradient
  REQUIRE(g[2] == 1.0);
  REQUIRE(g[3] == 0.0);  // above
}

TEST_CASE("elementwise and reduction ops match finite differences") {
  Rng rng(11);
  ParamStore store;
  store.add("a", random_tensor({3, 4}, rng, 0.2, 1.5));
  store.add("b", random_tensor({3, 4}, rng, 0.2, 1.5));
  store.add("bias", random_tensor({4}, rng));

  check_gradients(store, [&] {
    using namespace ad;
    Var a = store.var("a");
    Var b = store.var("b");
    Var t = mul(add(a, b), sub(a, scale(b, 0.5)));
    t = add_bias(t, store.var("bias"));
    t = mul(ad::exp(scale(t, 0.3)), ad::log(add_scalar(mul(t, t), 1.0)));
    return mean_all(t);
  });
}

TEST_CASE("relu softplus sigmoid abs clamp match finite differences") {
  Rng rng(13);
  ParamStore store;
  // Offsets keep values away from the relu/abs/clamp kinks.
  store.add("x", random_tensor({2, 5}, rng, 0.3, 1.2));
  store.add("y", random_tensor({2, 5}, rng, -1.2, -0.3));

  check_gradients(store, [&] {
    using namespace ad;
    Var x = store.var("x");
    Var y = store.var("y");
    Var t = add(relu(x), softplus(y));
    t = add(t, sigmoid(mul(x, y)));
    t = add(t, ad::abs(y));
    t = add(t, clamp(x, 0.0, 1.0));
    return sum_all(t);
  });
}

TEST_CASE("matmul concat gather reshape match finite differences") {
  Rng rng(17);
  ParamStore store;
  store.add("w1", random_tensor({4, 3}, rng));
  store.add("w2", random_tensor({5, 3}, rng));
  Tensor input = random_tensor({2, 4}, rng);
  Tensor input2 = random_tensor({2, 5}, rng);

  check_gradients(store, [&] {
    using namespace ad;
    Var a = matmul(Var::constant(input), store.var("w1"));    // [2,3]
    Var b = matmul(Var::constant(input2), store.var("w2"));   // [2,3]
    Var c = concat_last(a, b);                                // [2,6]
    Var d = reshape(c, {4, 3});
    Var picked = gather_last(d, {0, 2, 1, 0});
    return sum_all(mul(picked, picked));
  });
}

TEST_CASE("softmax and cross-entropy match finite differences") {
  Rng rng(19);
  ParamStore store;
  store.add("logits", random_tensor({6, 4}, rng, -2.0, 2.0));
  std::vector<int> targets{0, 3, 1, 255, 2, 0};

  check_gradients(store, [&] {
    using namespace ad;
    return cross_entropy_softmax(store.var("logits"), targets, 255);
  });

  check_gradients(store, [&] {
    using namespace ad;
    Var p = softmax_last(store.var("logits"));
    Var picked = gather_last(p, {0, 3, 1, 2, 2, 0});
    return neg(mean_all(ad::log(clamp_min(picked, 1e-10))));
  });
}

TEST_CASE("cross entropy ignores rows and handles all-ignored batches") {
  auto logits = ad::Var::leaf(Tensor({2, 3}, {5.0, 0.0, 0.0, 0.0, 5.0, 0.0}), true);
  ad::Var l = ad::cross_entropy_softmax(logits, {255, 255}, 255);
  REQUIRE(l.value().item() == 0.0);
  ad::backward(l);
  for (std::int64_t i = 0; i < 6; ++i) REQUIRE(logits.grad()[i] == 0.0);
}

TEST_CASE("composite weights hand values and finite differences") {
  // sigma*delta = 0.5 per sample: alpha = 1 - e^-0.5 = 0.39347, and
  // w2 = (1 - alpha1) * alpha2 = 0.23865.
  auto sigma = ad::Var::leaf(Tensor({1, 2}, {0.5, 0.5}), true);
  Tensor delta({1, 2}, {1.0, 1.0});
  ad::Var w = ad::composite_weights(sigma, delta);
  REQUIRE(w.value().at(0, 0) == Catch::Approx(0.39347).margin(1e-5));
  REQUIRE(w.value().at(0, 1) == Catch::Approx(0.23865).margin(1e-5));

  Rng rng(23);
  ParamStore store;
  store.add("sigma", random_tensor({3, 6}, rng, 0.05, 2.0));
  Tensor d = random_tensor({3, 6}, rng, 0.05, 0.5);
  Tensor coeff = random_tensor({3, 6}, rng);
  check_gradients(store, [&] {
    using namespace ad;
    Var w2 = composite_weights(store.var("sigma"), d);
    return sum_all(mul_const(w2, coeff));
  });
}

TEST_CASE("composite weights backward survives opaque samples") {
  // A saturated sample (alpha ~ 1) must not produce NaNs.
  auto sigma = ad::Var::leaf(Tensor({1, 3}, {0.5, 80.0, 0.5}), true);
  Tensor delta({1, 3}, {1.0, 1.0, 1.0});
  ad::Var loss = ad::sum_all(ad::composite_weights(sigma, delta));
  ad::backward(loss);
  for (int i = 0; i < 3; ++i) REQUIRE(std::isfinite(sigma.grad()[i]));
}

TEST_CASE("weighted reductions and row normalization match finite differences") {
  Rng rng(29);
  ParamStore store;
  store.add("w", random_tensor({2, 4}, rng, 0.05, 0.8));
  store.add("x", random_tensor({2, 4, 3}, rng, 0.1, 1.0));
  Tensor tvals = random_tensor({2, 4}, rng, 0.5, 4.0);

  check_gradients(store, [&] {
    using namespace ad;
    Var ws = weighted_sum(store.var("w"), store.var("x"));      // [2,3]
    Var wr = weighted_reduce(store.var("w"), tvals);            // [2]
    Var norm = l1_normalize_rows(ws, 1e-8);
    return add(sum_all(mul(norm, norm)), mean_all(wr));
  });
}

TEST_CASE("l1_normalize_rows uniform fallback has zero gradient") {
  auto x = ad::Var::leaf(Tensor({2, 4}, {0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0}), true);
  ad::Var n = ad::l1_normalize_rows(x, 1e-8);
  for (int j = 0; j < 4; ++j) REQUIRE(n.value().at(0, j) == Catch::Approx(0.25));
  ad::Var loss = ad::sum_all(ad::mul(n, n));
  ad::backward(loss);
  for (int j = 0; j < 4; ++j) REQUIRE(x.grad().at(0, j) == 0.0);
}

TEST_CASE("batchnorm train/eval match finite differences and update stats") {
  Rng rng(31);
  ParamStore store;
  store.add("x", random_tensor({6, 3}, rng, -1.0, 1.0));
  store.add("gamma", random_tensor({3}, rng, 0.5, 1.5));
  store.add("beta", random_tensor({3}, rng, -0.5, 0.5));

  ad::BatchNormStats stats{Tensor::zeros({3}), Tensor::full({3}, 1.0)};
  check_gradients(store, [&] {
    ad::BatchNormStats scratch = stats;  // keep running stats fixed across FD evals
    using namespace ad;
    Var y = batchnorm_train(store.var("x"), store.var("gamma"), store.var("beta"), scratch, 0.9);
    return mean_all(mul(y, y));
  });

  ad::BatchNormStats st{Tensor::zeros({3}), Tensor::full({3}, 1.0)};
  {
    ad::NoGradGuard ng;
    ad::batchnorm_train(store.var("x"), store.var("gamma"), store.var("beta"), st, 0.9);
  }
  bool moved = false;
  for (int j = 0; j < 3; ++j) moved |= (st.running_mean[j] != 0.0);
  REQUIRE(moved);

  check_gradients(store, [&] {
    using namespace ad;
    Var y = batchnorm_eval(store.var("x"), store.var("gamma"), store.var("beta"), st);
    return mean_all(mul(y, y));
  });
}

TEST_CASE("gradients of untouched parameters are zero tensors") {
  ParamStore store;
  store.add("used", Tensor::scalar(2.0));
  store.add("unused", Tensor({3}, {1.0, 2.0, 3.0}));
  store.zero_grad();
  ad::Var loss = ad::mul(store.var("used"), store.var("used"));
  ad::backward(loss);
  auto grads = store.gradients();
  REQUIRE(grads.at("used").item() == Catch::Approx(4.0));
  for (std::int64_t i = 0; i < 3; ++i) REQUIRE(grads.at("unused")[i] == 0.0);
}

TEST_CASE("no-grad mode builds no graph") {
  auto x = ad::Var::leaf(Tensor::scalar(3.0), true);
  ad::NoGradGuard ng;
  ad::Var y = ad::mul(x, x);
  REQUIRE_FALSE(y.requires_grad());
  REQUIRE(y.value().item() == Catch::Approx(9.0));
}

TEST_CASE("finite differences on a constant program are zero") {
  ParamStore store;
  store.add("p", Tensor({2}, {1.0, 2.0}));
  auto grads = finite_difference_gradient(store, [] { return 7.5; }, 1e-5);
  REQUIRE(grads.at("p")[0] == 0.0);
  REQUIRE(grads.at("p")[1] == 0.0);
}
