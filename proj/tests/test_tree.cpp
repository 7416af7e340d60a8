#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "plntree/rng.hpp"
#include "plntree/tree.hpp"

using namespace plntree;

namespace {

// Tree drawn in the paper's opening example, without the root layer:
// two families of sizes {2,3} over ten leaves.
TreeLayout example_tree_3() {
  return make_tree({2, 5, 10}, {{0, 0, 1, 1, 1}, {0, 0, 1, 1, 2, 2, 3, 4, 4, 4}});
}

// Same tree including the root layer.
TreeLayout example_tree_4() {
  return make_tree({1, 2, 5, 10}, {{0, 0}, {0, 0, 1, 1, 1}, {0, 0, 1, 1, 2, 2, 3, 4, 4, 4}});
}

TreeLayout random_tree(Rng& rng, int L, int max_children = 3) {
  std::vector<int> sizes{1 + static_cast<int>(rng.uniform_int(3))};
  std::vector<std::vector<int>> parents;
  for (int l = 1; l < L; ++l) {
    std::vector<int> par;
    for (int k = 0; k < sizes.back(); ++k) {
      const int c = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_children)));
      for (int j = 0; j < c; ++j) par.push_back(k);
    }
    parents.push_back(par);
    sizes.push_back(static_cast<int>(par.size()));
  }
  return make_tree(sizes, parents);
}

}  // namespace

TEST_CASE("example tree layout: children and singleton flags") {
  TreeLayout t = example_tree_3();
  CHECK(t.children[0][1] == std::vector<int>{2, 3, 4});
  CHECK(t.children[1][3] == std::vector<int>{6});
  CHECK(t.singleton[2][6]);
  CHECK_FALSE(t.singleton[2][0]);
  CHECK_FALSE(t.singleton[0][0]);  // the two roots form one group of size 2
}

TEST_CASE("single chain is a valid degenerate layout") {
  TreeLayout t = make_tree({1, 1}, {{0}});
  CHECK(t.singleton[0][0]);
  CHECK(t.singleton[1][0]);
}

TEST_CASE("parent out of range is rejected") {
  CHECK_THROWS_WITH_AS(make_tree({2, 3}, {{0, 1, 3}}), doctest::Contains("parent 3"), DataError);
  CHECK_THROWS_AS(make_tree({2, 3}, {{0, 1, -1}}), DataError);
}

TEST_CASE("childless internal node is rejected") {
  CHECK_THROWS_WITH_AS(make_tree({2, 2}, {{0, 0}}), doctest::Contains("no children"), DataError);
}

TEST_CASE("example counts validate") {
  TreeLayout t = example_tree_4();
  std::vector<std::vector<std::int64_t>> raw{
      {147}, {72, 75}, {12, 60, 42, 13, 20}, {3, 9, 60, 0, 12, 30, 13, 8, 0, 12}};
  HierarchicalCounts c = validate_counts(t, raw);
  CHECK(c.total() == 147);

  raw[0][0] = 146;
  CHECK_THROWS_WITH_AS(validate_counts(t, raw), doctest::Contains("layer 1, node 0"), DataError);
}

TEST_CASE("all-zero layers are valid") {
  TreeLayout t = example_tree_3();
  std::vector<std::vector<std::int64_t>> raw{{0, 0}, {0, 0, 0, 0, 0}, std::vector<std::int64_t>(10, 0)};
  CHECK_NOTHROW(validate_counts(t, raw));
}

TEST_CASE("negative entry and length mismatch are rejected") {
  TreeLayout t = example_tree_3();
  CHECK_THROWS_AS(validate_counts(t, {{1, 1}, {1, 0, 0, 1, 0}, {1, 0, 0, 0, 0, 1, 0, 0, 0, -1}}),
                  DataError);
  CHECK_THROWS_AS(validate_counts(t, {{1, 1}, {1, 0, 0, 1, 0}}), DataError);
}

TEST_CASE("lifting the example leaves reproduces the drawn internal layers") {
  TreeLayout t = example_tree_4();
  HierarchicalCounts c = lift_leaf_counts(t, {3, 9, 60, 0, 12, 30, 13, 8, 0, 12});
  CHECK(c.layers[0] == std::vector<std::int64_t>{147});
  CHECK(c.layers[1] == std::vector<std::int64_t>{72, 75});
  CHECK(c.layers[2] == std::vector<std::int64_t>{12, 60, 42, 13, 20});
}

TEST_CASE("lifting zeros and one-hots") {
  TreeLayout t = example_tree_3();
  HierarchicalCounts zero = lift_leaf_counts(t, std::vector<std::int64_t>(10, 0));
  for (const auto& layer : zero.layers)
    for (auto x : layer) CHECK(x == 0);

  std::vector<std::int64_t> onehot(10, 0);
  onehot[6] = 1;  // only child of node 3 in layer 2
  HierarchicalCounts c = lift_leaf_counts(t, onehot);
  CHECK(c.layers[1] == std::vector<std::int64_t>{0, 0, 0, 1, 0});
  CHECK(c.layers[0] == std::vector<std::int64_t>{0, 1});
}

TEST_CASE("property: lift then validate round-trips and totals are constant") {
  Rng rng(99);
  for (int rep = 0; rep < 40; ++rep) {
    TreeLayout t = random_tree(rng, 2 + static_cast<int>(rng.uniform_int(3)));
    std::vector<std::int64_t> leaves(static_cast<size_t>(t.layer_sizes.back()));
    for (auto& x : leaves) x = static_cast<std::int64_t>(rng.uniform_int(50));
    HierarchicalCounts c = lift_leaf_counts(t, leaves);
    CHECK_NOTHROW(validate_counts(t, c.layers));
    std::int64_t t0 = 0;
    for (auto x : c.layers[0]) t0 += x;
    for (const auto& layer : c.layers) {
      std::int64_t s = 0;
      for (auto x : layer) s += x;
      CHECK(s == t0);
    }
  }
}

TEST_CASE("tree JSON round-trip is identical") {
  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    TreeLayout t = random_tree(rng, 3);
    const std::string text = dump_json(tree_to_json(t));
    TreeLayout t2 = parse_tree_text(text);
    CHECK(t2.layer_sizes == t.layer_sizes);
    CHECK(t2.parents == t.parents);
    CHECK(dump_json(tree_to_json(t2)) == text);
  }
}

TEST_CASE("malformed tree documents") {
  CHECK_THROWS_AS(parse_tree_text("{"), DataError);
  CHECK_THROWS_AS(parse_tree_text("{\"layer_sizes\":[2]}"), DataError);
  CHECK_THROWS_AS(parse_tree_text("{\"layer_sizes\":[2,2],\"parents\":[[0,0]],\"extra\":1}"),
                  ConfigError);
}

TEST_CASE("counts CSV round-trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "plntree_tree_test";
  fs::create_directories(dir);
  TreeLayout t = example_tree_3();

  HierarchicalDataset ds;
  ds.tree = t;
  Rng rng(5);
  for (int i = 0; i < 8; ++i) {
    std::vector<std::int64_t> leaves(10);
    for (auto& x : leaves) x = static_cast<std::int64_t>(rng.uniform_int(30));
    ds.samples.push_back(lift_leaf_counts(t, leaves));
    ds.sample_ids.push_back("s" + std::to_string(i));
  }
  const std::string path = (dir / "counts.csv").string();
  save_counts_csv(path, ds);
  HierarchicalDataset back = load_counts_csv(path, t);
  REQUIRE(back.size() == ds.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.sample_ids[i] == ds.sample_ids[i]);
    CHECK(back.samples[i].layers == ds.samples[i].layers);
  }

  const std::string leafpath = (dir / "leaves.csv").string();
  save_leaf_csv(leafpath, ds);
  HierarchicalDataset lifted = load_leaf_csv(leafpath, t);
  for (size_t i = 0; i < ds.size(); ++i) CHECK(lifted.samples[i].layers == ds.samples[i].layers);

  ds.covariates.assign(ds.size(), {1.0, -0.5});
  ds.covariates[3] = {0.25, 100.0};
  const std::string covpath = (dir / "cov.csv").string();
  save_covariates_csv(covpath, ds);
  HierarchicalDataset joined = load_counts_csv(path, t);
  load_covariates_csv(covpath, joined);
  CHECK(joined.covariates == ds.covariates);
  fs::remove_all(dir);
}
