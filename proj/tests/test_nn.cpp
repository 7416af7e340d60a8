#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "plntree/nn.hpp"

using namespace plntree;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.v) x = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("mlp with zero hidden layers and identity weights is the identity") {
  ParamStore store;
  Rng rng(1);
  Mlp m = Mlp::create(store, "id", {3, 3, 0, 0}, rng);
  store.value(m.weights[0]) = Tensor::eye(3);
  store.value(m.biases[0]) = Tensor({3});
  Tape t;
  Bound p = bind_params(t, store);
  Tensor x = random_tensor({4, 3}, rng);
  Var y = m.forward(t, p, t.leaf(x));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(t.val(y).v[size_t(i)] == x.v[size_t(i)]);
}

TEST_CASE("mlp forward is deterministic under a fixed seed") {
  auto build = [] {
    ParamStore store;
    Rng rng(77);
    Mlp m = Mlp::create(store, "net", {5, 2, 2, 8}, rng);
    Tape t;
    Bound p = bind_params(t, store);
    Tensor x({2, 5});
    for (std::int64_t i = 0; i < 10; ++i) x.v[size_t(i)] = 0.1 * static_cast<double>(i);
    return t.val(m.forward(t, p, t.leaf(x))).v;
  };
  CHECK(build() == build());
}

TEST_CASE("mlp rank-1 input equals single-row batch") {
  ParamStore store;
  Rng rng(5);
  Mlp m = Mlp::create(store, "net", {4, 3, 1, 6}, rng);
  Tape t;
  Bound p = bind_params(t, store);
  Tensor x = random_tensor({4}, rng);
  Tensor xb({1, 4});
  xb.v = x.v;
  Var y1 = m.forward(t, p, t.leaf(x));
  Var y2 = m.forward(t, p, t.leaf(xb));
  for (int i = 0; i < 3; ++i) CHECK(t.val(y1).at(i) == t.val(y2).at(0, i));
}

TEST_CASE("mlp gradient check") {
  ParamStore store;
  Rng rng(9);
  Mlp m = Mlp::create(store, "net", {3, 2, 2, 5}, rng);
  Tensor x = random_tensor({2, 3}, rng);
  std::vector<Tensor> point;
  for (const auto& e : store.entries) point.push_back(e.value);
  point.push_back(x);
  auto f = [&](Tape& t, const std::vector<Var>& v) {
    ParamStore s2 = store;
    Bound p;
    p.tape = &t;
    for (size_t i = 0; i + 1 < v.size(); ++i) p.vars.push_back(v[i]);
    return t.sum(t.mul(m.forward(t, p, v.back()), m.forward(t, p, v.back())));
  };
  CHECK(grad_check(f, point) < 1e-5);
}

TEST_CASE("gru prefix property and length-1 sequences") {
  ParamStore store;
  Rng rng(13);
  GruSpec spec{4, 6, 2, 5, EmbedderKind::Gru};
  GruEncoder g = GruEncoder::create(store, "emb", spec, rng);

  std::vector<Tensor> xs;
  for (int i = 0; i < 3; ++i) xs.push_back(random_tensor({2, 4}, rng));

  Tape t;
  Bound p = bind_params(t, store);
  std::vector<Var> steps;
  for (const auto& x : xs) steps.push_back(t.leaf(x));
  auto full = g.encode_prefixes(t, p, steps);
  REQUIRE(full.size() == 3);

  // Standalone encodings of each prefix match the intermediate states exactly.
  for (size_t len = 1; len <= 3; ++len) {
    Tape t2;
    Bound p2 = bind_params(t2, store);
    std::vector<Var> sub;
    for (size_t i = 0; i < len; ++i) sub.push_back(t2.leaf(xs[i]));
    auto enc = g.encode_prefixes(t2, p2, sub);
    CHECK(t2.val(enc.back()).v == t.val(full[len - 1]).v);
  }

  CHECK_THROWS_AS(g.encode_prefixes(t, p, {}), std::invalid_argument);
}

TEST_CASE("gru gradient check through two steps") {
  ParamStore store;
  Rng rng(21);
  GruSpec spec{3, 4, 1, 3, EmbedderKind::Gru};
  GruEncoder g = GruEncoder::create(store, "emb", spec, rng);
  std::vector<Tensor> point;
  for (const auto& e : store.entries) point.push_back(e.value);
  point.push_back(random_tensor({2, 3}, rng));
  point.push_back(random_tensor({2, 3}, rng));
  auto f = [&](Tape& t, const std::vector<Var>& v) {
    Bound p;
    p.tape = &t;
    for (size_t i = 0; i + 2 < v.size(); ++i) p.vars.push_back(v[i]);
    auto e = g.encode_prefixes(t, p, {v[v.size() - 2], v.back()});
    return t.sum(t.mul(e.back(), e.back()));
  };
  CHECK(grad_check(f, point) < 1e-4);
}

TEST_CASE("lstm variant runs and differs from gru") {
  ParamStore s1, s2;
  Rng r1(3), r2(3);
  GruEncoder g = GruEncoder::create(s1, "e", {3, 4, 1, 2, EmbedderKind::Gru}, r1);
  GruEncoder l = GruEncoder::create(s2, "e", {3, 4, 1, 2, EmbedderKind::Lstm}, r2);
  Rng rng(4);
  Tensor x = random_tensor({1, 3}, rng);
  Tape t1, t2;
  Bound p1 = bind_params(t1, s1), p2 = bind_params(t2, s2);
  auto e1 = g.encode_prefixes(t1, p1, {t1.leaf(x)});
  auto e2 = l.encode_prefixes(t2, p2, {t2.leaf(x)});
  CHECK(t1.val(e1[0]).numel() == 2);
  CHECK(t2.val(e2[0]).numel() == 2);
}

TEST_CASE("tempered sigmoid") {
  TemperedSigmoid ts(-100.0, 25.0, 1.0);

  SUBCASE("midpoint is fixed") {
    CHECK(ts.bound(-37.5) == doctest::Approx(-37.5).epsilon(1e-12));
  }
  SUBCASE("large inputs approach but never reach the bounds") {
    CHECK(ts.bound(1e4) < 25.0);
    CHECK(ts.bound(1e4) == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(ts.bound(-1e4) > -100.0);
  }
  SUBCASE("value at zero") {
    const double expect = -100.0 + 125.0 / (1.0 + std::exp(-37.5));
    CHECK(std::fabs(ts.bound(0.0) - expect) < 1e-10);
    CHECK(std::fabs(ts.bound(0.0) - 25.0) < 1e-10);
    CHECK(ts.bound(0.0) < 25.0);
  }
  SUBCASE("graph version matches scalar version and stays inside (m, M)") {
    Rng rng(31);
    Tape t;
    for (int i = 0; i < 200; ++i) {
      const double x = rng.uniform(-300.0, 300.0);
      Var b = ts.bound(t, t.leaf(Tensor::scalar(x)));
      const double y = t.val(b).v[0];
      CHECK(y == doctest::Approx(ts.bound(x)).epsilon(1e-12));
      CHECK(y > -100.0);
      CHECK(y < 25.0);
    }
  }
  SUBCASE("invalid construction") {
    CHECK_THROWS_AS(TemperedSigmoid(1.0, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(TemperedSigmoid(0.0, 1.0, -1.0), std::invalid_argument);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamStore store;
    store.add("x", Tensor::vec({1.0, -2.0}));
    AdamState adam;
    adam.init(store);
    CHECK(adam.update(store, {Tensor({2})}));
    CHECK(store.value(0).v == std::vector<double>{1.0, -2.0});
  }

  SUBCASE("non-finite gradient rejects the step") {
    ParamStore store;
    store.add("x", Tensor::vec({1.0}));
    AdamState adam;
    adam.init(store);
    Tensor g({1});
    g.v[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(adam.update(store, {g}));
    CHECK(store.value(0).v[0] == 1.0);
    CHECK(adam.step == 0);
  }

  SUBCASE("first step magnitude is about lr * sign(g)") {
    ParamStore store;
    store.add("x", Tensor::vec({0.0, 0.0}));
    AdamState adam;
    adam.cfg.lr = 1e-3;
    adam.init(store);
    CHECK(adam.update(store, {Tensor::vec({0.3, -250.0})}));
    CHECK(store.value(0).v[0] == doctest::Approx(-1e-3).epsilon(1e-4));
    CHECK(store.value(0).v[1] == doctest::Approx(1e-3).epsilon(1e-4));
  }

  SUBCASE("quadratic bowl converges") {
    ParamStore store;
    store.add("x", Tensor::vec({5.0}));
    AdamState adam;
    adam.cfg.lr = 1e-1;
    adam.init(store);
    for (int i = 0; i < 500; ++i) {
      Tensor g({1});
      g.v[0] = 2.0 * store.value(0).v[0];
      CHECK(adam.update(store, {g}));
    }
    CHECK(std::fabs(store.value(0).v[0]) < 1e-2);
  }

  SUBCASE("trainable mask freezes entries") {
    ParamStore store;
    store.add("a", Tensor::vec({1.0}));
    store.add("b", Tensor::vec({1.0}));
    AdamState adam;
    adam.init(store);
    std::vector<char> mask{1, 0};
    CHECK(adam.update(store, {Tensor::vec({1.0}), Tensor::vec({1.0})}, &mask));
    CHECK(store.value(0).v[0] != 1.0);
    CHECK(store.value(1).v[0] == 1.0);
  }
}
