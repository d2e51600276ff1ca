#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "fieldseg/losses.hpp"
#include "fieldseg/rng.hpp"
#include "support/gradcheck.hpp"

using namespace fieldseg;
using Catch::Approx;

TEST_CASE("color loss is the squared error summed over channels") {
  ad::Var rendered = ad::Var::constant(Tensor({1, 3}, {1.0, 1.0, 1.0}));
  Tensor target({1, 3}, {0.0, 0.0, 0.0});
  ad::Var l = loss_rgb(rendered, target);
  REQUIRE(l.value().shape() == Shape{1});
  REQUIRE(l.value()[0] == Approx(3.0));

  ad::Var same = loss_rgb(rendered, Tensor({1, 3}, {1.0, 1.0, 1.0}));
  REQUIRE(same.value()[0] == Approx(0.0));
}

TEST_CASE("depth loss is masked l1") {
  ad::Var rendered = ad::Var::constant(Tensor({3}, {1.5, 2.5, 9.0}));
  Tensor target({3}, {2.0, 2.5, 0.0});  // third ray has no sensor reading
  ad::Var l = loss_depth(rendered, target);
  REQUIRE(l.value()[0] == Approx(0.5));
  REQUIRE(l.value()[1] == Approx(0.0));
  REQUIRE(l.value()[2] == 0.0);
}

TEST_CASE("semantic loss is the negative log probability of the target") {
  // Uniform over 6 classes.
  ad::Var dist = ad::Var::constant(Tensor::full({2, 6}, 1.0 / 6.0));
  ad::Var l = loss_semantic_nll(dist, {3, 255}, 255);
  REQUIRE(l.value()[0] == Approx(std::log(6.0)).epsilon(1e-9));
  REQUIRE(l.value()[1] == 0.0);  // ignore id contributes nothing
}

TEST_CASE("semantic loss stays finite on a zero probability") {
  ad::Var dist = ad::Var::constant(Tensor({1, 2}, {0.0, 1.0}));
  ad::Var l = loss_semantic_nll(dist, {0}, 255);
  REQUIRE(std::isfinite(l.value()[0]));
  REQUIRE(l.value()[0] == Approx(-std::log(1e-10)));
}

TEST_CASE("semantic loss rejects out-of-range classes") {
  ad::Var dist = ad::Var::constant(Tensor::full({1, 4}, 0.25));
  REQUIRE_THROWS(loss_semantic_nll(dist, {4}, 255));
  REQUIRE_THROWS(loss_semantic_nll(dist, {-1}, 255));
}

TEST_CASE("total loss applies the documented weights") {
  ad::Var rgb = ad::Var::constant(Tensor({1}, {1.0}));
  ad::Var d = ad::Var::constant(Tensor({1}, {1.0}));
  ad::Var s = ad::Var::constant(Tensor({1}, {1.0}));
  LossConfig cfg;
  REQUIRE(total_loss(rgb, d, s, cfg).value().item() == Approx(1.14));

  SECTION("linear in the weights") {
    LossConfig c2 = cfg;
    c2.w_d = 0.2;
    c2.w_s = 0.08;
    REQUIRE(total_loss(rgb, d, s, c2).value().item() == Approx(1.28));
  }

  SECTION("mean vs sum over rays") {
    ad::Var rgb2 = ad::Var::constant(Tensor({2}, {1.0, 3.0}));
    ad::Var z = ad::Var::constant(Tensor::zeros({2}));
    REQUIRE(total_loss(rgb2, z, z, cfg).value().item() == Approx(2.0));
    LossConfig c3 = cfg;
    c3.reduction = Reduction::kSum;
    REQUIRE(total_loss(rgb2, z, z, c3).value().item() == Approx(4.0));
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(404);
  ParamStore store;
  Tensor raw({4, 3});
  for (std::int64_t i = 0; i < raw.numel(); ++i) raw[i] = rng.normal(0.0, 1.0);
  store.add("rgb", raw);
  Tensor dep({4});
  for (std::int64_t i = 0; i < dep.numel(); ++i) dep[i] = rng.uniform(1.0, 3.0);
  store.add("depth", dep);
  Tensor logits({4, 6});
  for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.normal(0.0, 1.0);
  store.add("logits", logits);

  Tensor rgb_t({4, 3});
  for (std::int64_t i = 0; i < rgb_t.numel(); ++i) rgb_t[i] = rng.uniform();
  Tensor dep_t({4}, {2.0, 0.0, 1.3, 2.7});
  std::vector<int> classes{0, 5, 255, 2};

  LossConfig cfg;
  testsupport::check_gradients(store, [&] {
    ad::Var lr = loss_rgb(store.var("rgb"), rgb_t);
    ad::Var ld = loss_depth(store.var("depth"), dep_t);
    ad::Var dist = ad::softmax_last(store.var("logits"));
    ad::Var ls = loss_semantic_nll(dist, classes, 255);
    return total_loss(lr, ld, ls, cfg);
  });
}

TEST_CASE("2d cross entropy averages over valid pixels only") {
  ad::Var dist = ad::Var::constant(Tensor({3, 2}, {0.5, 0.5, 0.9, 0.1, 0.25, 0.75}));
  CrossEntropy2d ce = cross_entropy_2d(dist, {0, 255, 1}, 255);
  REQUIRE(ce.valid == 2);
  double expect = 0.5 * (-std::log(0.5) - std::log(0.75));
  REQUIRE(ce.loss.value().item() == Approx(expect).epsilon(1e-9));

  CrossEntropy2d none = cross_entropy_2d(dist, {255, 255, 255}, 255);
  REQUIRE(none.valid == 0);
  REQUIRE(none.loss.value().item() == 0.0);
}

TEST_CASE("2d cross entropy gradient matches finite differences") {
  Rng rng(77);
  ParamStore store;
  Tensor logits({5, 4});
  for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.normal(0.0, 1.5);
  store.add("logits", logits);
  std::vector<int> targets{1, 3, 255, 0, 2};

  testsupport::check_gradients(store, [&] {
    ad::Var dist = ad::softmax_last(store.var("logits"));
    return cross_entropy_2d(dist, targets, 255).loss;
  });
}
