#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "plntree/diversity.hpp"

using namespace plntree;

TEST_CASE("shannon and simpson") {
  CHECK(shannon({0.25, 0.25, 0.25, 0.25}) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(simpson({0.25, 0.25, 0.25, 0.25}) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(shannon({0.0, 1.0, 0.0}) == 0.0);
  CHECK(simpson({0.0, 1.0, 0.0}) == 1.0);
  CHECK(shannon({0.5, 0.25, 0.25}) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-12));
  CHECK(simpson({0.5, 0.25, 0.25}) == doctest::Approx(0.375).epsilon(1e-12));
  // Zero-padding leaves both indices unchanged.
  CHECK(shannon({0.5, 0.25, 0.25, 0.0, 0.0}) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-12));
  CHECK(simpson({0.5, 0.25, 0.25, 0.0}) == doctest::Approx(0.375).epsilon(1e-12));
  // Unnormalized inputs are renormalized.
  CHECK(shannon({2.0, 1.0, 1.0}) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(shannon({0.5, -0.1}), DataError);
}

TEST_CASE("bray-curtis") {
  CHECK(bray_curtis<std::int64_t>({3, 5, 2}, {3, 5, 2}) == doctest::Approx(0.0));
  CHECK(bray_curtis<std::int64_t>({3, 0, 2}, {0, 4, 0}) == doctest::Approx(1.0));
  CHECK(bray_curtis<std::int64_t>({2, 2}, {2, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(bray_curtis<std::int64_t>({2, 2}, {2, 0}) ==
        doctest::Approx(bray_curtis<std::int64_t>({2, 0}, {2, 2})));
  CHECK_THROWS_AS(bray_curtis<std::int64_t>({0, 0}, {0, 0}), DataError);
}

TEST_CASE("1-D distances: exact small cases") {
  CHECK(wasserstein_1d({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == doctest::Approx(0.0));
  CHECK(ks_statistic({1.0, 2.0}, {1.0, 2.0}) == doctest::Approx(0.0));
  CHECK(tv_hist({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == doctest::Approx(0.0));
  CHECK(kl_hist({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == doctest::Approx(0.0).epsilon(1e-9));

  CHECK(wasserstein_1d({0.0}, {1.0}) == doctest::Approx(1.0));
  CHECK(ks_statistic({0.0}, {1.0}) == doctest::Approx(1.0));

  // 2N points at zero vs N at zero mixed with N at one.
  const int N = 8;
  std::vector<double> a(2 * N, 0.0), b;
  for (int i = 0; i < N; ++i) {
    b.push_back(0.0);
    b.push_back(1.0);
  }
  CHECK(wasserstein_1d(a, b) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("wasserstein_1d equals the exact transport cost on 1-D point sets") {
  Rng rng(3);
  for (int rep = 0; rep < 15; ++rep) {
    const int na = 1 + static_cast<int>(rng.uniform_int(12));
    const int nb = 1 + static_cast<int>(rng.uniform_int(12));
    std::vector<double> a, b;
    std::vector<std::vector<double>> ap, bp;
    for (int i = 0; i < na; ++i) {
      a.push_back(rng.normal());
      ap.push_back({a.back()});
    }
    for (int j = 0; j < nb; ++j) {
      b.push_back(rng.normal());
      bp.push_back({b.back()});
    }
    CHECK(std::fabs(wasserstein_1d(a, b) - emd_multivariate(ap, bp)) < 1e-10);
  }
}

TEST_CASE("emd: trivial values and the permutation brute force") {
  std::vector<std::vector<double>> a{{0.0, 0.0}, {1.0, 1.0}};
  CHECK(emd_multivariate(a, a) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(emd_multivariate({{1.0, 2.0}}, {{4.0, 6.0}}) == doctest::Approx(5.0).epsilon(1e-12));

  Rng rng(7);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<std::vector<double>> x, y;
    for (int i = 0; i < 3; ++i) {
      x.push_back({rng.normal(), rng.normal()});
      y.push_back({rng.normal(), rng.normal()});
    }
    // Equal sizes with uniform weights: the optimum is a permutation.
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> perm{0, 1, 2};
    do {
      double c = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double dx = x[static_cast<size_t>(i)][0] - y[static_cast<size_t>(perm[static_cast<size_t>(i)])][0];
        const double dy = x[static_cast<size_t>(i)][1] - y[static_cast<size_t>(perm[static_cast<size_t>(i)])][1];
        c += std::sqrt(dx * dx + dy * dy) / 3.0;
      }
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(std::fabs(emd_multivariate(x, y) - best) < 1e-10);
  }
}

TEST_CASE("emd: unequal sizes against margin enumeration") {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<std::vector<double>> x{{rng.normal(), rng.normal()}, {rng.normal(), rng.normal()}};
    std::vector<std::vector<double>> y{{rng.normal(), rng.normal()},
                                       {rng.normal(), rng.normal()},
                                       {rng.normal(), rng.normal()}};
    double cost[2][3];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        const double dx = x[static_cast<size_t>(i)][0] - y[static_cast<size_t>(j)][0];
        const double dy = x[static_cast<size_t>(i)][1] - y[static_cast<size_t>(j)][1];
        cost[i][j] = std::sqrt(dx * dx + dy * dy);
      }
    // Scale masses 1/2 and 1/3 by 6: row sums (3,3), column sums (2,2,2).
    double best = std::numeric_limits<double>::infinity();
    for (int f00 = 0; f00 <= 2; ++f00)
      for (int f01 = 0; f01 <= 2; ++f01)
        for (int f02 = 0; f02 <= 2; ++f02) {
          if (f00 + f01 + f02 != 3) continue;
          const int f10 = 2 - f00, f11 = 2 - f01, f12 = 2 - f02;
          if (f10 < 0 || f11 < 0 || f12 < 0 || f10 + f11 + f12 != 3) continue;
          const double c = (f00 * cost[0][0] + f01 * cost[0][1] + f02 * cost[0][2] +
                            f10 * cost[1][0] + f11 * cost[1][1] + f12 * cost[1][2]) /
                           6.0;
          best = std::min(best, c);
        }
    CHECK(std::fabs(emd_multivariate(x, y) - best) < 1e-10);
  }
}

TEST_CASE("emd guard rejects oversized inputs") {
  std::vector<std::vector<double>> big(513, {0.0});
  CHECK_THROWS_WITH_AS(emd_multivariate(big, big), doctest::Contains("subsample"), DataError);
}

namespace {

DissimilarityMatrix gaussian_cloud_matrix(Rng& rng, int na, int nb, double offset_b,
                                          bool mirror_b = false) {
  // Points on the simplex via softmax of Gaussians; Bray-Curtis over them.
  std::vector<std::vector<double>> ga, gb;
  auto draw = [&](double shift, bool mirror) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.normal();
    if (mirror)
      for (auto& v : z) v = -v;
    z[0] += shift;
    double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (auto& v : z) {
      v = std::exp(v - mx);
      s += v;
    }
    for (auto& v : z) v /= s;
    return z;
  };
  for (int i = 0; i < na; ++i) ga.push_back(draw(0.0, false));
  for (int i = 0; i < nb; ++i) gb.push_back(draw(offset_b, mirror_b));
  return bray_curtis_matrix(ga, gb);
}

}  // namespace

TEST_CASE("permanova: maximal separation and label-swap symmetry") {
  Rng rng(5);
  DissimilarityMatrix m = gaussian_cloud_matrix(rng, 12, 12, 25.0);
  CHECK(permanova(m, 999, 3) == doctest::Approx(1.0 / 1000.0).epsilon(1e-12));

  DissimilarityMatrix flipped = m;
  for (auto& l : flipped.labels) l = 1 - l;
  CHECK(permanova(m, 499, 7) == permanova(flipped, 499, 7));
  CHECK(permdisp(m, 199, 9) == permdisp(flipped, 199, 9));
}

TEST_CASE("permanova null p-values are uniform (KS at the 1% level)") {
  const int replicates = 200;
  std::vector<double> pvals;
  for (int r = 0; r < replicates; ++r) {
    Rng rng(1000 + static_cast<std::uint64_t>(r));
    DissimilarityMatrix m = gaussian_cloud_matrix(rng, 15, 15, 0.0);
    pvals.push_back(permanova(m, 999, 40 + static_cast<std::uint64_t>(r)));
  }
  std::sort(pvals.begin(), pvals.end());
  double d = 0.0;
  for (int i = 0; i < replicates; ++i) {
    const double f = static_cast<double>(i + 1) / replicates;
    const double f0 = static_cast<double>(i) / replicates;
    d = std::max({d, std::fabs(f - pvals[static_cast<size_t>(i)]),
                  std::fabs(pvals[static_cast<size_t>(i)] - f0)});
  }
  // Two-sided KS critical value at alpha = 0.01 for n = 200.
  CHECK(d < 1.62762 / std::sqrt(static_cast<double>(replicates)));
}

TEST_CASE("permdisp accepts mirrored clouds (identical dispersions)") {
  int accepted = 0;
  const int runs = 20;
  for (int r = 0; r < runs; ++r) {
    Rng rng(500 + static_cast<std::uint64_t>(r));
    DissimilarityMatrix m = gaussian_cloud_matrix(rng, 20, 20, 0.0, true);
    if (permdisp(m, 999, 60 + static_cast<std::uint64_t>(r)) > 0.05) ++accepted;
  }
  CHECK(accepted >= runs * 9 / 10);
}

TEST_CASE("dissimilarity validation catches malformed matrices") {
  DissimilarityMatrix m;
  m.n = 2;
  m.d = {0.0, 0.5, 0.4, 0.0};
  m.labels = {0, 1};
  CHECK_THROWS_AS(m.validate(), DataError);
  m.d = {0.0, 1.5, 1.5, 0.0};
  CHECK_THROWS_AS(m.validate(), DataError);
}

TEST_CASE("reconstruction correlation") {
  TreeLayout tree = make_tree({2, 4}, {{0, 0, 1, 1}});
  std::vector<HierarchicalCounts> orig;
  std::vector<std::vector<std::vector<double>>> recon;
  Rng rng(9);
  for (int i = 0; i < 10; ++i) {
    std::vector<std::int64_t> leaves{rng.poisson(9.0) + 1, rng.poisson(5.0), rng.poisson(7.0),
                                     rng.poisson(2.0)};
    orig.push_back(lift_leaf_counts(tree, leaves));
    std::vector<std::vector<double>> r;
    for (const auto& layer : orig.back().layers) {
      std::vector<double> row;
      for (auto x : layer) row.push_back(static_cast<double>(x));
      r.push_back(row);
    }
    recon.push_back(r);
  }
  auto perfect = reconstruction_correlation(orig, recon);
  for (double c : perfect.per_layer) CHECK(c == doctest::Approx(1.0).epsilon(1e-12));

  // Negating deviations around each sample mean flips the correlation.
  auto negated = recon;
  for (auto& sample : negated)
    for (auto& layer : sample) {
      double mean = 0.0;
      for (double v : layer) mean += v;
      mean /= static_cast<double>(layer.size());
      for (auto& v : layer) v = 2.0 * mean - v;
    }
  auto anti = reconstruction_correlation(orig, negated);
  for (double c : anti.per_layer) CHECK(c == doctest::Approx(-1.0).epsilon(1e-12));

  // Independent reconstructions hover near zero correlation.
  const int n = 400;
  std::vector<HierarchicalCounts> o2;
  std::vector<std::vector<std::vector<double>>> r2;
  TreeLayout flat = make_tree({1, 50}, {std::vector<int>(50, 0)});
  for (int i = 0; i < n; ++i) {
    std::vector<std::int64_t> leaves(50);
    for (auto& x : leaves) x = rng.poisson(6.0);
    o2.push_back(lift_leaf_counts(flat, leaves));
    std::vector<double> row(50);
    for (auto& v : row) v = rng.normal();
    r2.push_back({{0.0}, row});
  }
  auto null = reconstruction_correlation(o2, r2);
  CHECK(std::fabs(null.per_layer[1]) < 0.3);
  CHECK(null.skipped == n);  // the single-node layer has zero variance everywhere

  CHECK_THROWS_AS(reconstruction_correlation({}, {}), DataError);
}
