#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "plntree/autodiff.hpp"
#include "plntree/rng.hpp"

using namespace plntree;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.v) x = scale * rng.normal();
  return t;
}

Tensor random_spd(std::int64_t d, Rng& rng) {
  Tensor a = random_tensor({d, d}, rng, 0.5);
  Tensor spd({d, d});
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::int64_t k = 0; k < d; ++k) s += a.at(i, k) * a.at(j, k);
      spd.at(i, j) = s;
    }
    spd.at(i, i) += 0.5 + d * 0.25;
  }
  return spd;
}

}  // namespace

TEST_CASE("softmax basics") {
  Tape t;
  Var z = t.leaf(Tensor::vec({0.0, 0.0}), false);
  Var p = t.softmax(z);
  CHECK(t.val(p).at(0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(t.val(p).at(1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("softmax translation invariance") {
  Rng rng(7);
  for (int rep = 0; rep < 25; ++rep) {
    Tensor z = random_tensor({6}, rng, 2.0);
    Tensor zc = z;
    const double c = rng.uniform(-5.0, 5.0);
    for (auto& x : zc.v) x += c;
    Tape t;
    Var p1 = t.softmax(t.leaf(z));
    Var p2 = t.softmax(t.leaf(zc));
    for (std::int64_t i = 0; i < 6; ++i)
      CHECK(std::fabs(t.val(p1).at(i) - t.val(p2).at(i)) < 1e-12);
  }
}

TEST_CASE("logsumexp overflow safety") {
  Tape t;
  Var z = t.leaf(Tensor::vec({1000.0, 1000.0}));
  Var l = t.logsumexp(z);
  CHECK(t.val(l).v[0] == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
  CHECK(std::isfinite(t.val(l).v[0]));
}

TEST_CASE("logdet of identity and diagonal") {
  Tape t;
  Var i3 = t.leaf(Tensor::eye(3));
  CHECK(t.val(t.logdet_via_cholesky(i3)).v[0] == doctest::Approx(0.0).epsilon(1e-14));
  Var d = t.leaf(Tensor::mat(2, 2, {2.0, 0.0, 0.0, 3.0}));
  CHECK(t.val(t.logdet_via_cholesky(d)).v[0] == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("cholesky reconstructs SPD input") {
  Rng rng(11);
  for (std::int64_t d : {2, 5, 16, 64, 128}) {
    Tensor spd = random_spd(d, rng);
    Tape t;
    Var l = t.cholesky(t.leaf(spd));
    const Tensor& lv = t.val(l);
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < d; ++i)
      for (std::int64_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::int64_t k = 0; k < d; ++k) s += lv.at(i, k) * lv.at(j, k);
        num += (s - spd.at(i, j)) * (s - spd.at(i, j));
        den += spd.at(i, j) * spd.at(i, j);
      }
    CHECK(std::sqrt(num / den) < 1e-10);
  }
}

TEST_CASE("cholesky failure reports leading minor") {
  Tape t;
  Var bad = t.leaf(Tensor::mat(2, 2, {1.0, 2.0, 2.0, 1.0}));
  CHECK_THROWS_WITH_AS(t.cholesky(bad), doctest::Contains("leading minor 2"), NumericalError);
}

TEST_CASE("simple gradients") {
  SUBCASE("x^2 at 3") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0), true);
    Var y = t.mul(x, x);
    t.backward(y);
    CHECK(t.grad(x).v[0] == doctest::Approx(6.0).epsilon(1e-14));
  }
  SUBCASE("logsumexp gradient is softmax") {
    Tape t;
    Var z = t.leaf(Tensor::vec({1.0, 2.0, 3.0}), true);
    Var l = t.logsumexp(z);
    t.backward(l);
    Tape t2;
    const Tensor& p = t2.val(t2.softmax(t2.leaf(Tensor::vec({1.0, 2.0, 3.0}))));
    for (int i = 0; i < 3; ++i) CHECK(t.grad(z).at(i) == doctest::Approx(p.at(i)).epsilon(1e-12));
  }
  SUBCASE("logdet gradient is inverse") {
    Tape t;
    Var s = t.leaf(Tensor::mat(2, 2, {2.0, 0.0, 0.0, 3.0}), true);
    t.backward(t.logdet_via_cholesky(s));
    CHECK(t.grad(s).at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(t.grad(s).at(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(std::fabs(t.grad(s).at(0, 1)) < 1e-12);
  }
  SUBCASE("detached leaf gets zero gradient, not an error") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(2.0), true);
    Var unused = t.leaf(Tensor::scalar(5.0), true);
    t.backward(t.mul(x, x));
    CHECK(t.grad(unused).v[0] == 0.0);
  }
  SUBCASE("non-scalar backward throws") {
    Tape t;
    Var x = t.leaf(Tensor::vec({1.0, 2.0}), true);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
  }
}

TEST_CASE("grad_check: polynomials are near-exact") {
  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var x = v[0];
    return t.sum(t.add(t.mul(x, x), t.scale(x, 3.0)));
  };
  Rng rng(3);
  CHECK(grad_check(f, {random_tensor({4}, rng)}) < 1e-8);
}

TEST_CASE("grad_check: softmax-matmul chain") {
  Rng rng(5);
  Tensor w = random_tensor({4, 3}, rng, 0.7);
  Tensor x = random_tensor({2, 4}, rng);
  auto f = [](Tape& t, const std::vector<Var>& v) {
    return t.sum(t.mul(t.softmax(t.matmul(v[0], v[1])), t.softmax(t.matmul(v[0], v[1]))));
  };
  CHECK(grad_check(f, {x, w}) < 1e-6);
}

TEST_CASE("grad_check: every primitive") {
  Rng rng(17);

  SUBCASE("elementwise and broadcasts") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor row = random_tensor({4}, rng);
    Tensor s = random_tensor({}, rng);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      Var u = t.add(t.mul(v[0], v[1]), v[2]);           // [3,4]*[3,4] + [4]
      Var w = t.sub(u, t.mul(v[3], v[0]));              // scalar * tensor
      return t.sum(t.mul(w, w));
    };
    CHECK(grad_check(f, {a, b, row, s}) < 1e-7);
  }

  SUBCASE("unary chain") {
    Tensor a = random_tensor({5}, rng, 0.5);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      Var u = t.tanh(v[0]);
      Var w = t.sigmoid(t.softplus(u));
      return t.sum(t.log(t.add(t.exp(w), t.constant(1.0))));
    };
    CHECK(grad_check(f, {a}) < 1e-7);
  }

  SUBCASE("clamp and vmax subgradients away from kinks") {
    Tensor a = Tensor::vec({-2.0, 0.3, 2.5});
    Tensor b = Tensor::vec({0.1, -0.4, 2.0});
    auto f = [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.add(t.clamp(v[0], -1.0, 1.0), t.vmax(v[0], v[1])));
    };
    CHECK(grad_check(f, {a, b}) < 1e-7);
  }

  SUBCASE("concat, slice, gather") {
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 2}, rng);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      Var c = t.concat_cols(v[0], v[1]);
      Var s = t.slice_cols(c, 1, 3);
      Var g = t.gather_cols(c, {4, 0, 2});
      return t.sum(t.mul(s, g));
    };
    CHECK(grad_check(f, {a, b}) < 1e-7);
  }

  SUBCASE("outer, diag, trace, pack_lower") {
    Tensor x = random_tensor({2, 3}, rng);
    Tensor p = random_tensor({2, 6}, rng);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      Var o = t.outer(v[0]);                      // [2,3,3]
      Var l = t.pack_lower(v[1], 3);              // [2,3,3]
      Var m = t.add(o, t.diag_embed(t.diag_part(l)));
      return t.sum(t.add(t.trace(m), t.sum_axis(t.diag_part(o), 1)));
    };
    CHECK(grad_check(f, {x, p}) < 1e-7);
  }

  SUBCASE("cholesky") {
    Tensor spd = random_spd(4, rng);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.mul(t.cholesky(v[0]), t.cholesky(v[0])));
    };
    CHECK(grad_check(f, {spd}) < 1e-6);
  }

  SUBCASE("logdet gradient is the inverse, analytically") {
    Tensor spd = random_spd(5, rng);
    Tape t;
    Var s = t.leaf(spd, true);
    t.backward(t.logdet_via_cholesky(s));
    Tensor l = cholesky_spd(spd, 0.0, 0.0);
    Tensor inv = spd_inverse_from_chol(l);
    for (std::int64_t i = 0; i < 5; ++i)
      for (std::int64_t j = 0; j < 5; ++j)
        CHECK(t.grad(s).at(i, j) == doctest::Approx(inv.at(i, j)).epsilon(1e-8));
  }

  SUBCASE("tri_solve, both modes, vector and matrix rhs") {
    Tensor spd = random_spd(4, rng);
    Tensor l = cholesky_spd(spd, 0.0, 0.0);
    Tensor rhs_v = random_tensor({4}, rng);
    Tensor rhs_m = random_tensor({4, 2}, rng);
    auto f1 = [](Tape& t, const std::vector<Var>& v) {
      Var y = t.tri_solve(v[0], v[1], false);
      return t.sum(t.mul(y, y));
    };
    auto f2 = [](Tape& t, const std::vector<Var>& v) {
      Var y = t.tri_solve(v[0], v[1], true);
      return t.sum(t.mul(y, y));
    };
    // Zero out the upper triangle so FD does not probe unread entries.
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = i + 1; j < 4; ++j) l.at(i, j) = 0.0;
    CHECK(grad_check(f1, {l, rhs_v}) < 1e-6);
    CHECK(grad_check(f2, {l, rhs_m}) < 1e-6);
  }

  SUBCASE("batched matmul and batched cholesky") {
    Tensor a = random_tensor({2, 3, 4}, rng, 0.5);
    Tensor b = random_tensor({2, 4, 3}, rng, 0.5);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      Var m = t.matmul(v[0], v[1]);  // [2,3,3]
      Var spd = t.add(t.matmul(m, m), t.constant([] {
                        Tensor e({2, 3, 3});
                        for (std::int64_t bb = 0; bb < 2; ++bb)
                          for (std::int64_t i = 0; i < 3; ++i) e.at(bb, i, i) = 4.0;
                        return e;
                      }()));
      // matmul(m, m) is not symmetric; symmetrize through the op contract.
      Var sym = t.scale(t.add(spd, t.constant(0.0)), 1.0);
      Var l = t.cholesky(sym);
      return t.sum(t.mul(l, l));
    };
    const double err = grad_check(f, {a, b});
    CHECK(err < 1e-5);
  }

  SUBCASE("softmax and logsumexp rank-2") {
    Tensor z = random_tensor({3, 4}, rng, 1.5);
    auto f = [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.add(t.logsumexp(v[0]), t.sum_axis(t.mul(t.softmax(v[0]), v[0]), 1)));
    };
    CHECK(grad_check(f, {z}) < 1e-6);
  }
}

TEST_CASE("gradients accumulate over reused nodes") {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0), true);
  Var y = t.add(t.mul(x, x), t.mul(x, x));
  t.backward(y);
  CHECK(t.grad(x).v[0] == doctest::Approx(8.0).epsilon(1e-14));
}
