#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "plntree/variational.hpp"

using namespace plntree;

namespace {

constexpr double kPi = 3.14159265358979323846;

TreeLayout test_tree() { return make_tree({2, 5}, {{0, 0, 0, 1, 1}}); }

ArchConfig small_arch(VariationalKind kind = VariationalKind::Backward) {
  ArchConfig a;
  a.family = kind;
  a.embedding_dim = 6;
  a.embedder_hidden = 8;
  a.embedder_layers = 1;
  a.head_hidden_layers = 1;
  a.mf_hidden_layers = 1;
  a.transition_hidden_layers = 1;
  return a;
}

HierarchicalCounts some_counts(const TreeLayout& tree, Rng& rng, double rate = 20.0) {
  std::vector<std::int64_t> leaves(static_cast<size_t>(tree.layer_sizes.back()));
  for (auto& x : leaves) x = rng.poisson(rate);
  return lift_leaf_counts(tree, leaves);
}

}  // namespace

TEST_CASE("mean-field with zero nets and symmetric bounds draws N(mid, mid)") {
  ArchConfig a = small_arch(VariationalKind::MeanField);
  a.mean_lo = -5.0;
  a.mean_hi = 5.0;
  a.var_lo = 0.5;
  a.var_hi = 1.5;
  FittedModel f = make_fitted(test_tree(), a, 3);
  // Zero every weight; the final biases stay at their midpoint preimages.
  for (size_t l = 0; l < f.q.m_heads.size(); ++l) {
    for (auto& head : {f.q.m_heads[l], f.q.s_heads[l]}) {
      for (int w : head.weights)
        for (auto& v : f.store.value(w).v) v = 0.0;
      for (size_t bi = 0; bi + 1 < head.biases.size(); ++bi)
        for (auto& v : f.store.value(head.biases[bi]).v) v = 0.0;
    }
  }

  Rng rng(1);
  HierarchicalCounts c = some_counts(f.model.tree, rng);
  const int n = 100000;
  PosteriorSamples ps = sample_posterior(f, c, n, 77);
  double mean = 0.0, var = 0.0;
  for (const auto& d : ps.draws) mean += d.z[0][0];
  mean /= n;
  for (const auto& d : ps.draws) var += (d.z[0][0] - mean) * (d.z[0][0] - mean);
  var /= n - 1;
  CHECK(std::fabs(mean - 0.0) < 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::fabs(var - 1.0) < 5.0 * std::sqrt(2.0 / (n - 1.0)));
}

TEST_CASE("fixed seed reproduces draws and log q exactly") {
  FittedModel f = make_fitted(test_tree(), small_arch(), 5);
  Rng rng(2);
  HierarchicalCounts c = some_counts(f.model.tree, rng);
  PosteriorSamples a = sample_posterior(f, c, 25, 123);
  PosteriorSamples b = sample_posterior(f, c, 25, 123);
  for (size_t i = 0; i < a.draws.size(); ++i) {
    CHECK(a.draws[i].z == b.draws[i].z);
    CHECK(a.log_q[i] == b.log_q[i]);
  }
}

TEST_CASE("log q equals an independent re-evaluation of the factor product") {
  for (VariationalKind kind : {VariationalKind::Backward, VariationalKind::MeanField}) {
    FittedModel f = make_fitted(test_tree(), small_arch(kind), 9);
    Rng rng(4);
    HierarchicalCounts c = some_counts(f.model.tree, rng);
    std::vector<const HierarchicalCounts*> reps(8, &c);
    BatchData batch = make_batch(f.model, reps);
    Rng nrng(55, 1);
    NoisePack noise = make_noise(f.model, batch.size, nrng);
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
    PosteriorDraw draw = sample_posterior_graph(f.model, f.q, t, p, batch, noise);
    for (std::int64_t i = 0; i < batch.size; ++i) {
      double manual = 0.0;
      for (int l = 0; l < f.model.depth(); ++l) {
        const int d = f.model.lidx.dim(l);
        for (int a = 0; a < d; ++a) {
          const double z = t.val(draw.z[static_cast<size_t>(l)]).at(i, a);
          const double m = t.val(draw.m[static_cast<size_t>(l)]).at(i, a);
          const double s = t.val(draw.s[static_cast<size_t>(l)]).at(i, a);
          manual += -0.5 * ((z - m) * (z - m) / s + std::log(s) + std::log(2.0 * kPi));
        }
      }
      CHECK(t.val(draw.log_q).at(i) == doctest::Approx(manual).epsilon(1e-10));
    }
  }
}

TEST_CASE("posterior outputs respect the tempered-sigmoid bounds") {
  FittedModel f = make_fitted(test_tree(), small_arch(), 31);
  Rng rng(6);
  for (int rep = 0; rep < 5; ++rep) {
    HierarchicalCounts c = some_counts(f.model.tree, rng, 2000.0);
    std::vector<const HierarchicalCounts*> reps(4, &c);
    BatchData batch = make_batch(f.model, reps);
    Rng nrng(rep, 2);
    NoisePack noise = make_noise(f.model, batch.size, nrng);
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
    PosteriorDraw draw = sample_posterior_graph(f.model, f.q, t, p, batch, noise);
    for (int l = 0; l < f.model.depth(); ++l) {
      for (double m : t.val(draw.m[static_cast<size_t>(l)]).v) {
        CHECK(m > -100.0);
        CHECK(m < 25.0);
      }
      for (double s : t.val(draw.s[static_cast<size_t>(l)]).v) {
        CHECK(s >= 1e-8);
        CHECK(s <= 10.0);
      }
    }
  }
}

TEST_CASE("residual input contract: heads read only (Z next, E, X current)") {
  TreeLayout tree = make_tree({2, 4, 6}, {{0, 0, 1, 1}, {0, 0, 1, 2, 2, 3}});
  FittedModel f = make_fitted(tree, small_arch(), 13);
  Rng rng(8);
  HierarchicalCounts c1 = some_counts(tree, rng);
  HierarchicalCounts c2 = c1;
  // Perturb only the leaf layer; layers above stay identical.
  c2.layers[2][0] += 5;
  c2.layers[1][0] += 5;
  c2.layers[0][0] += 5;

  auto run = [&](const HierarchicalCounts& c, bool pin, const Tensor& pin_z, const Tensor& pin_e) {
    std::vector<const HierarchicalCounts*> reps(1, &c);
    BatchData batch = make_batch(f.model, reps);
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
    // Layer-1 head (l = 0) inputs, optionally pinned.
    std::vector<Var> steps{t.constant(batch.padded[0]), t.constant(batch.padded[1]),
                           t.constant(batch.padded[2])};
    auto emb = f.q.embedder.encode_prefixes(t, p, steps);
    Var e0 = pin ? t.constant(pin_e) : emb[0];
    Var znext = t.constant(pin_z);
    Var in = t.concat_cols(t.concat_cols(znext, e0), t.constant(batch.logx[0]));
    Var m = f.q.mean_bound.bound(t, f.q.m_heads[0].forward(t, p, in));
    struct Out {
      std::vector<double> m, e;
    } o;
    o.m = t.val(m).v;
    o.e = t.val(emb[0]).v;
    return o;
  };

  Tensor z_next({1, f.model.lidx.dim(1)});
  for (auto& v : z_next.v) v = rng.normal();
  Tensor e_pin({1, f.model.arch.embedding_dim});
  for (auto& v : e_pin.v) v = rng.normal();

  // Two count sets that differ only below layer 1: with E^1 and Z^2 pinned,
  // the layer-1 head must be blind to the difference.
  HierarchicalCounts c3 = c1;
  HierarchicalCounts c4 = c1;
  c3.layers[2][1] += 3;  // children of node 0 in layer 2
  c4.layers[2][0] += 3;
  c3.layers[1][0] += 3;
  c4.layers[1][0] += 3;
  c3.layers[0][0] += 3;
  c4.layers[0][0] += 3;
  auto aa = run(c3, true, z_next, e_pin);
  auto bb = run(c4, true, z_next, e_pin);
  CHECK(aa.m == bb.m);

  // A layer-1 change does reach the head through the residual input.
  auto a = run(c1, true, z_next, e_pin);
  auto b = run(c2, true, z_next, e_pin);
  CHECK(a.m != b.m);
  // And deeper layers reach deeper prefixes of the embedder.
  {
    std::vector<const HierarchicalCounts*> r3{&c3}, r4{&c4};
    BatchData b3 = make_batch(f.model, r3);
    BatchData b4 = make_batch(f.model, r4);
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
    auto e3 = f.q.embedder.encode_prefixes(
        t, p, {t.constant(b3.padded[0]), t.constant(b3.padded[1]), t.constant(b3.padded[2])});
    auto e4 = f.q.embedder.encode_prefixes(
        t, p, {t.constant(b4.padded[0]), t.constant(b4.padded[1]), t.constant(b4.padded[2])});
    CHECK(t.val(e3[0]).v == t.val(e4[0]).v);  // prefix X^{1:1} identical
    CHECK(t.val(e3[2]).v != t.val(e4[2]).v);  // full chain differs
  }
}

TEST_CASE("encode: mean-field is draw-free, backward concentrates with draws") {
  TreeLayout tree = test_tree();

  FittedModel mf = make_fitted(tree, small_arch(VariationalKind::MeanField), 17);
  Rng rng(10);
  HierarchicalCounts c = some_counts(tree, rng);
  LatentState e1 = encode(mf, c, 1, 1);
  LatentState e2 = encode(mf, c, 500, 999);
  CHECK(e1.z == e2.z);

  FittedModel bw = make_fitted(tree, small_arch(), 19);
  LatentState small = encode(bw, c, 200, 5);
  LatentState big = encode(bw, c, 20000, 6);
  for (int l = 0; l < 2; ++l)
    for (size_t k = 0; k < small.z[static_cast<size_t>(l)].size(); ++k) {
      const double tol = 4.0 * std::sqrt(10.0 / 200.0);  // variance bound cap
      CHECK(std::fabs(small.z[static_cast<size_t>(l)][k] - big.z[static_cast<size_t>(l)][k]) < tol);
    }

  LatentState d1 = encode(bw, c, 50, 21);
  LatentState d2 = encode(bw, c, 50, 21);
  CHECK(d1.z == d2.z);
}

TEST_CASE("offset posterior amortizer") {
  ArchConfig a = small_arch();
  a.offset_enabled = true;
  FittedModel f = make_fitted(test_tree(), a, 23);
  Rng rng(12);

  SUBCASE("zero-weight net outputs its bias for any counts") {
    for (auto& e : f.store.entries)
      if (e.name.rfind("q.offset", 0) == 0)
        for (auto& v : e.value.v) v = 0.0;
    auto [m1, s1] = offset_posterior(f, some_counts(f.model.tree, rng, 5.0));
    auto [m2, s2] = offset_posterior(f, some_counts(f.model.tree, rng, 5000.0));
    CHECK(m1 == m2);
    CHECK(s1 == s2);
  }

  SUBCASE("variance output respects bounds") {
    for (int rep = 0; rep < 20; ++rep) {
      auto [m, s] = offset_posterior(f, some_counts(f.model.tree, rng, std::exp(rng.uniform(0.0, 9.0))));
      (void)m;
      CHECK(s >= 1e-8);
      CHECK(s <= 10.0);
    }
  }

  SUBCASE("gradients through the amortizer check out") {
    std::vector<Tensor> point;
    for (const auto& e : f.store.entries)
      if (e.name.rfind("q.offset", 0) == 0) point.push_back(e.value);
    Tensor in({3, 1});
    in.at(0, 0) = 2.0;
    in.at(1, 0) = 5.5;
    in.at(2, 0) = 9.0;
    auto fgc = [&](Tape& t, const std::vector<Var>& v) {
      Bound p;
      p.tape = &t;
      // Rebind only the offset nets; order matches the collection above.
      size_t vi = 0;
      for (const auto& e : f.store.entries) {
        if (e.name.rfind("q.offset", 0) == 0)
          p.vars.push_back(v[vi++]);
        else
          p.vars.push_back(t.leaf(e.value, false));
      }
      Var mo = f.q.off_m.forward(t, p, t.constant(in));
      Var so = f.q.var_bound.bound(t, f.q.off_s.forward(t, p, t.constant(in)));
      return t.sum(t.add(t.mul(mo, mo), so));
    };
    CHECK(grad_check(fgc, point) < 1e-5);
  }
}

TEST_CASE("strong amortization variant skips the embedder") {
  ArchConfig a = small_arch();
  a.strong_amortization = true;
  FittedModel f = make_fitted(test_tree(), a, 29);
  for (const auto& e : f.store.entries) CHECK(e.name.find("embedder") == std::string::npos);
  Rng rng(14);
  HierarchicalCounts c = some_counts(f.model.tree, rng);
  PosteriorSamples ps = sample_posterior(f, c, 3, 9);
  CHECK(ps.draws.size() == 3);
  for (double lq : ps.log_q) CHECK(std::isfinite(lq));
}

TEST_CASE("model file round-trip is byte-identical and behavior-preserving") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "plntree_var_test";
  fs::create_directories(dir);

  ArchConfig a = small_arch();
  a.offset_enabled = true;
  FittedModel f = make_fitted(test_tree(), a, 41);
  Rng rng(16);
  // Touch parameters so values are not all at init.
  HierarchicalDataset ds;
  ds.tree = f.model.tree;
  for (int i = 0; i < 6; ++i) {
    ds.samples.push_back(some_counts(f.model.tree, rng));
    ds.sample_ids.push_back("s" + std::to_string(i));
  }
  init_from_data(f.model, f.store, ds);

  const std::string p1 = (dir / "m1.json").string();
  const std::string p2 = (dir / "m2.json").string();
  save_model(p1, f);
  FittedModel g = load_model(p1);
  save_model(p2, g);
  std::ifstream f1(p1), f2(p2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  auto d1 = sample_dataset(f.model, f.store, 20, 77);
  auto d2 = sample_dataset(g.model, g.store, 20, 77);
  for (size_t i = 0; i < d1.samples.size(); ++i) CHECK(d1.samples[i].layers == d2.samples[i].layers);
  fs::remove_all(dir);
}
