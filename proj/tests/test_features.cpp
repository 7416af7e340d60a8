#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "plntree/features.hpp"

using namespace plntree;

namespace {

TreeLayout two_by_two() { return make_tree({2, 4}, {{0, 0, 1, 1}}); }

LatentState state_of(std::vector<std::vector<double>> z) {
  LatentState s;
  s.z = std::move(z);
  return s;
}

}  // namespace

TEST_CASE("project_latents centers each sibling block, layer 1 untouched") {
  TreeLayout tree = make_tree({1, 3}, {{0, 0, 0}});
  LatentState s = state_of({{2.5}, {1.0, 1.0, 1.0}});
  LatentState p = project_latents(tree, s);
  CHECK(p.z[0][0] == 2.5);
  for (double v : p.z[1]) CHECK(std::fabs(v) < 1e-15);

  LatentState s2 = state_of({{0.0}, {1.0, 2.0, 3.0}});
  LatentState p2 = project_latents(tree, s2);
  CHECK(p2.z[1][0] == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(p2.z[1][1] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(p2.z[1][2] == doctest::Approx(1.0).epsilon(1e-14));

  LatentState twice = project_latents(tree, p2);
  CHECK(twice.z == p2.z);
}

TEST_CASE("projected blocks sum to zero on random states") {
  TreeLayout tree = make_tree({2, 5, 9}, {{0, 0, 0, 1, 1}, {0, 0, 1, 2, 2, 3, 3, 4, 4}});
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    LatentState s;
    s.z.resize(3);
    for (int l = 0; l < 3; ++l) {
      s.z[static_cast<size_t>(l)].resize(static_cast<size_t>(tree.layer_sizes[static_cast<size_t>(l)]));
      for (auto& v : s.z[static_cast<size_t>(l)]) v = rng.normal(0.0, 3.0);
    }
    LatentState p = project_latents(tree, s);
    for (int l = 1; l < 3; ++l)
      for (const auto& group : tree.children[static_cast<size_t>(l - 1)]) {
        double sum = 0.0;
        for (int j : group) sum += p.z[static_cast<size_t>(l)][static_cast<size_t>(j)];
        CHECK(std::fabs(sum) < 1e-12);
      }
  }
}

TEST_CASE("latent proportions: symmetry, direct softmax, compositionality") {
  TreeLayout tree = two_by_two();

  auto v = latent_proportions(tree, state_of({{0.0, 0.0}, {0.0, 0.0, 0.0, 0.0}}));
  CHECK(v[0][0] == doctest::Approx(0.5).epsilon(1e-14));
  for (double x : v[1]) CHECK(x == doctest::Approx(0.25).epsilon(1e-14));

  auto v2 = latent_proportions(tree, state_of({{std::log(1.0), std::log(3.0)}, {0, 0, 0, 0}}));
  CHECK(v2[0][0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(v2[0][1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(9);
  for (int rep = 0; rep < 30; ++rep) {
    LatentState s = state_of({{rng.normal(), rng.normal()},
                              {rng.normal(), rng.normal(), rng.normal(), rng.normal()}});
    auto vp = latent_proportions(tree, s);
    double l0 = vp[0][0] + vp[0][1];
    double l1 = vp[1][0] + vp[1][1] + vp[1][2] + vp[1][3];
    CHECK(std::fabs(l0 - 1.0) < 1e-12);
    CHECK(std::fabs(l1 - 1.0) < 1e-12);
    CHECK(std::fabs(vp[1][0] + vp[1][1] - vp[0][0]) < 1e-12);
    CHECK(std::fabs(vp[1][2] + vp[1][3] - vp[0][1]) < 1e-12);
    for (const auto& layer : vp)
      for (double x : layer) {
        CHECK(x > 0.0);
        CHECK(x < 1.0);
      }

    // Per-block constant shifts leave the proportions unchanged.
    LatentState shifted = s;
    const double c1 = rng.uniform(-4.0, 4.0), c2 = rng.uniform(-4.0, 4.0), c0 = rng.uniform(-4.0, 4.0);
    shifted.z[0][0] += c0;
    shifted.z[0][1] += c0;
    shifted.z[1][0] += c1;
    shifted.z[1][1] += c1;
    shifted.z[1][2] += c2;
    shifted.z[1][3] += c2;
    auto vs = latent_proportions(tree, shifted);
    for (size_t l = 0; l < vp.size(); ++l)
      for (size_t k = 0; k < vp[l].size(); ++k) CHECK(std::fabs(vp[l][k] - vs[l][k]) < 1e-12);
  }
}

TEST_CASE("clr: uniform to zero, direct values, scale invariance") {
  auto z = clr({0.25, 0.25, 0.25, 0.25});
  for (double v : z) CHECK(std::fabs(v) < 1e-15);

  const double s = 1.0 + std::exp(2.0);
  auto z2 = clr({1.0 / s, std::exp(2.0) / s});
  CHECK(z2[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(z2[1] == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x{rng.uniform(0.1, 5.0), rng.uniform(0.1, 5.0), rng.uniform(0.1, 5.0)};
    const double alpha = rng.uniform(0.5, 10.0);
    auto a = clr(x);
    std::vector<double> xs = x;
    for (auto& v : xs) v *= alpha;
    auto b = clr(xs);
    for (size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
    double sum = 0.0;
    for (double v : a) sum += v;
    CHECK(std::fabs(sum) < 1e-12);
  }

  CHECK_THROWS_AS(clr({0.5, 0.0}), DataError);
}

TEST_CASE("lp_clr equals clr after latent_proportions, layers sum to zero") {
  TreeLayout tree = two_by_two();
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    LatentState s = state_of({{rng.normal(), rng.normal()},
                              {rng.normal(), rng.normal(), rng.normal(), rng.normal()}});
    auto direct = lp_clr(tree, s);
    auto manual_v = latent_proportions(tree, s);
    for (size_t l = 0; l < direct.size(); ++l) {
      auto manual = clr(manual_v[l]);
      CHECK(direct[l] == manual);
      double sum = 0.0;
      for (double v : direct[l]) sum += v;
      CHECK(std::fabs(sum) < 1e-12);
    }
    // The symmetric state maps to all-zero features.
    auto zeroed = lp_clr(tree, state_of({{0, 0}, {0, 0, 0, 0}}));
    for (const auto& layer : zeroed)
      for (double v : layer) CHECK(std::fabs(v) < 1e-14);
    // Leaf restriction.
    CHECK(ltp_clr(tree, s) == direct.back());
  }
}

TEST_CASE("proj_pln equals clr of softmax") {
  CHECK(proj_pln({3.0, 3.0, 3.0}) == std::vector<double>{0.0, 0.0, 0.0});
  auto p = proj_pln({1.0, 2.0, 3.0});
  CHECK(p[0] == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(p[2] == doctest::Approx(1.0).epsilon(1e-14));

  Rng rng(5);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<double> z{rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 2)};
    auto a = proj_pln(z);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> sm(z.size());
    double s = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
      sm[i] = std::exp(z[i] - mx);
      s += sm[i];
    }
    for (auto& v : sm) v /= s;
    auto b = clr(sm);
    for (size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
  }
}

TEST_CASE("count features: proportions and pseudocounted clr") {
  TreeLayout tree = two_by_two();
  HierarchicalCounts c = lift_leaf_counts(tree, {3, 1, 0, 4});
  auto props = count_features(tree, c, FeatureKind::Proportions);
  CHECK(props[0][0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(props[1][2] == 0.0);
  auto cl = count_features(tree, c, FeatureKind::Clr);
  double sum = 0.0;
  for (double v : cl[1]) sum += v;
  CHECK(std::fabs(sum) < 1e-12);  // pseudocount makes every entry positive
}
