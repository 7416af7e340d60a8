#pragma once

// Variational families over the latent chain: the residual amortized
// backward Gaussian Markov chain (counts encoded by a recurrent network,
// per-layer heads fed the next latent, the embedding, and the current
// layer's counts) and the Gaussian mean-field family. Reparameterized
// sampling, log-density evaluation, posterior-mean encoding, and the fitted
// model file format live here.

#include "plntree/model.hpp"

namespace plntree {

struct VariationalFamily {
  VariationalKind kind = VariationalKind::Backward;
  bool strong_amortization = false;
  GruEncoder embedder;              // backward only
  std::vector<Mlp> m_heads, s_heads;  // per layer, empty spec when dim(l) == 0
  Mlp off_m, off_s;                 // offset amortizer, input = log1p total count
  TemperedSigmoid mean_bound, var_bound;
};

inline VariationalFamily make_variational(const PlnTreeModel& model, ParamStore& store, Rng& rng) {
  VariationalFamily q;
  q.kind = model.arch.family;
  q.strong_amortization = model.arch.strong_amortization;
  q.mean_bound = model.arch.mean_bound();
  q.var_bound = model.arch.var_bound();
  const int L = model.depth();
  const int kmax = model.tree.max_width();
  const int p = model.arch.covariates_enabled ? model.arch.covariate_dim : 0;

  if (q.kind == VariationalKind::Backward && !q.strong_amortization) {
    GruSpec spec{kmax, model.arch.embedder_hidden, model.arch.embedder_layers,
                 model.arch.embedding_dim, model.arch.embedder};
    q.embedder = GruEncoder::create(store, "q.embedder", spec, rng);
  }
  for (int l = 0; l < L; ++l) {
    const int d = model.lidx.dim(l);
    if (d == 0) {
      q.m_heads.emplace_back();
      q.s_heads.emplace_back();
      continue;
    }
    int in = 0;
    const int kl = model.tree.layer_sizes[static_cast<size_t>(l)];
    if (q.kind == VariationalKind::MeanField) {
      in = kl + p;
    } else if (q.strong_amortization) {
      in = (l + 1 < L ? model.lidx.dim(l + 1) : 0) + kl + p;
    } else {
      in = (l + 1 < L ? model.lidx.dim(l + 1) : 0) + model.arch.embedding_dim +
           (l + 1 < L ? kl : 0) + p;
    }
    const int depth = q.kind == VariationalKind::MeanField ? model.arch.mf_hidden_layers
                                                           : model.arch.head_hidden_layers;
    const int width = std::max(1, q.kind == VariationalKind::MeanField ? kl : in);
    MlpSpec spec{std::max(1, in), d, depth, width};
    const std::string tag = "q.l" + std::to_string(l + 1);
    q.m_heads.push_back(Mlp::create(store, tag + ".m", spec, rng));
    q.s_heads.push_back(Mlp::create(store, tag + ".s", spec, rng));
    // Start the bounded outputs at mean 0 and unit variance; the tempered
    // sigmoid saturates (dead gradients) if raw zero outputs land far from
    // the midpoint, as they do with the asymmetric default bounds.
    Tensor& mb = store.value(q.m_heads.back().biases.back());
    for (auto& v : mb.v) v = q.mean_bound.inverse(0.0);
    Tensor& sb = store.value(q.s_heads.back().biases.back());
    for (auto& v : sb.v) v = q.var_bound.inverse(1.0);
  }
  if (model.arch.offset_enabled) {
    MlpSpec spec{1, 1, 1, 8};
    q.off_m = Mlp::create(store, "q.offset.m", spec, rng);
    q.off_s = Mlp::create(store, "q.offset.s", spec, rng);
    Tensor& sb = store.value(q.off_s.biases.back());
    for (auto& v : sb.v) v = q.var_bound.inverse(1.0);
  }
  return q;
}

// ---- batched count inputs ----

struct BatchData {
  std::int64_t size = 0;
  std::vector<Tensor> counts;   // per layer [B, K_l]
  std::vector<Tensor> logx;     // per layer [B, K_l], log1p transformed
  std::vector<Tensor> padded;   // per layer [B, K_max], log1p and zero-padded
  Tensor log_total;             // [B], log1p of the layer-1 total
  std::optional<Tensor> design; // [B, p+1] standardized covariates + intercept
};

inline BatchData make_batch(const PlnTreeModel& model,
                            const std::vector<const HierarchicalCounts*>& samples,
                            const std::vector<const std::vector<double>*>* covariates = nullptr) {
  const int L = model.depth();
  const int kmax = model.tree.max_width();
  BatchData b;
  b.size = static_cast<std::int64_t>(samples.size());
  b.log_total = Tensor({b.size});
  for (int l = 0; l < L; ++l) {
    const int kl = model.tree.layer_sizes[static_cast<size_t>(l)];
    Tensor c({b.size, kl}), lx({b.size, kl}), pad({b.size, kmax});
    for (std::int64_t i = 0; i < b.size; ++i) {
      for (int k = 0; k < kl; ++k) {
        const double x = static_cast<double>(samples[static_cast<size_t>(i)]->layers[static_cast<size_t>(l)][static_cast<size_t>(k)]);
        c.at(i, k) = x;
        lx.at(i, k) = std::log1p(x);
        pad.at(i, k) = lx.at(i, k);
      }
    }
    b.counts.push_back(std::move(c));
    b.logx.push_back(std::move(lx));
    b.padded.push_back(std::move(pad));
  }
  for (std::int64_t i = 0; i < b.size; ++i) {
    double tot = 0.0;
    for (int k = 0; k < model.tree.layer_sizes[0]; ++k)
      tot += static_cast<double>(samples[static_cast<size_t>(i)]->layers[0][static_cast<size_t>(k)]);
    b.log_total.at(i) = std::log1p(tot);
  }
  if (model.arch.covariates_enabled) {
    if (!covariates) throw DataError("batch: covariates required by the model");
    std::vector<std::vector<double>> rows;
    rows.reserve(samples.size());
    for (const auto* r : *covariates) rows.push_back(*r);
    b.design = design_matrix(model, rows);
  }
  return b;
}

inline BatchData make_batch(const PlnTreeModel& model, const HierarchicalDataset& ds,
                            const std::vector<int>& idx) {
  std::vector<const HierarchicalCounts*> samples;
  std::vector<const std::vector<double>*> covs;
  for (int i : idx) {
    samples.push_back(&ds.samples[static_cast<size_t>(i)]);
    if (ds.has_covariates()) covs.push_back(&ds.covariates[static_cast<size_t>(i)]);
  }
  return make_batch(model, samples, ds.has_covariates() ? &covs : nullptr);
}

// ---- reparameterized posterior sampling ----

struct NoisePack {
  std::vector<Tensor> eps;  // per layer [B, d_l]
  Tensor eps_offset;        // [B]
};

inline NoisePack make_noise(const PlnTreeModel& model, std::int64_t batch, Rng& rng) {
  NoisePack n;
  for (int l = 0; l < model.depth(); ++l) {
    Tensor e({batch, model.lidx.dim(l)});
    for (auto& x : e.v) x = rng.normal();
    n.eps.push_back(std::move(e));
  }
  n.eps_offset = Tensor({batch});
  for (auto& x : n.eps_offset.v) x = rng.normal();
  return n;
}

struct PosteriorDraw {
  std::vector<Var> z;  // per layer [B, d_l]
  std::vector<Var> m;  // bounded means
  std::vector<Var> s;  // bounded variances (diagonal)
  Var log_q;           // [B], Gaussian factor product over active coords
  Var offset;          // [B] (offset models only)
  Var off_m, off_s;    // [B]
};

namespace detail {

inline Var gaussian_diag_logpdf(Tape& t, Var z, Var m, Var s) {
  Var diff = t.sub(z, m);
  Var quad = t.mul(t.mul(diff, diff), t.exp(t.neg(t.log(s))));
  Var per = t.add(quad, t.add(t.log(s), t.constant(std::log(2.0 * 3.14159265358979323846))));
  return t.scale(t.val(per).rank() == 2 ? t.sum_axis(per, 1) : t.sum(per), -0.5);
}

}  // namespace detail

// Draws one reparameterized trajectory for every sample in the batch.
inline PosteriorDraw sample_posterior_graph(const PlnTreeModel& model, const VariationalFamily& q,
                                            Tape& t, const Bound& p, const BatchData& batch,
                                            const NoisePack& noise) {
  const int L = model.depth();
  const std::int64_t bs = batch.size;
  PosteriorDraw out;
  out.z.resize(static_cast<size_t>(L));
  out.m.resize(static_cast<size_t>(L));
  out.s.resize(static_cast<size_t>(L));

  std::vector<Var> embeddings(static_cast<size_t>(L));
  if (q.kind == VariationalKind::Backward && !q.strong_amortization) {
    std::vector<Var> steps;
    for (int l = 0; l < L; ++l) steps.push_back(t.constant(batch.padded[static_cast<size_t>(l)]));
    embeddings = q.embedder.encode_prefixes(t, p, steps);
  }

  Var log_q = t.constant(Tensor({bs}));
  auto cov_cols = [&](Var in) {
    if (!model.arch.covariates_enabled) return in;
    Tensor cov({batch.design->dim(0), batch.design->dim(1) - 1});
    for (std::int64_t i = 0; i < cov.dim(0); ++i)
      for (std::int64_t j = 0; j < cov.dim(1); ++j) cov.at(i, j) = batch.design->at(i, j);
    return t.concat_cols(in, t.constant(cov));
  };

  if (q.kind == VariationalKind::MeanField) {
    for (int l = 0; l < L; ++l) {
      const int d = model.lidx.dim(l);
      if (d == 0) {
        out.z[static_cast<size_t>(l)] = t.constant(Tensor({bs, 0}));
        continue;
      }
      Var in = cov_cols(t.constant(batch.logx[static_cast<size_t>(l)]));
      Var m = q.mean_bound.bound(t, q.m_heads[static_cast<size_t>(l)].forward(t, p, in));
      Var s = q.var_bound.bound(t, q.s_heads[static_cast<size_t>(l)].forward(t, p, in));
      Var z = t.add(m, t.mul(t.sqrt_pos(s), t.constant(noise.eps[static_cast<size_t>(l)])));
      out.m[static_cast<size_t>(l)] = m;
      out.s[static_cast<size_t>(l)] = s;
      out.z[static_cast<size_t>(l)] = z;
      log_q = t.add(log_q, detail::gaussian_diag_logpdf(t, z, m, s));
    }
  } else {
    for (int l = L - 1; l >= 0; --l) {
      const int d = model.lidx.dim(l);
      if (d == 0) {
        out.z[static_cast<size_t>(l)] = t.constant(Tensor({bs, 0}));
        continue;
      }
      Var in;
      if (q.strong_amortization) {
        in = t.constant(batch.logx[static_cast<size_t>(l)]);
        if (l + 1 < L && model.lidx.dim(l + 1) > 0)
          in = t.concat_cols(out.z[static_cast<size_t>(l + 1)], in);
      } else if (l + 1 == L) {
        in = embeddings[static_cast<size_t>(l)];
      } else {
        in = embeddings[static_cast<size_t>(l)];
        if (model.lidx.dim(l + 1) > 0)
          in = t.concat_cols(out.z[static_cast<size_t>(l + 1)], in);
        in = t.concat_cols(in, t.constant(batch.logx[static_cast<size_t>(l)]));
      }
      in = cov_cols(in);
      Var m = q.mean_bound.bound(t, q.m_heads[static_cast<size_t>(l)].forward(t, p, in));
      Var s = q.var_bound.bound(t, q.s_heads[static_cast<size_t>(l)].forward(t, p, in));
      Var z = t.add(m, t.mul(t.sqrt_pos(s), t.constant(noise.eps[static_cast<size_t>(l)])));
      out.m[static_cast<size_t>(l)] = m;
      out.s[static_cast<size_t>(l)] = s;
      out.z[static_cast<size_t>(l)] = z;
      log_q = t.add(log_q, detail::gaussian_diag_logpdf(t, z, m, s));
    }
  }

  if (model.arch.offset_enabled) {
    Var in = t.reshape(t.constant(batch.log_total), {bs, 1});
    Var mo = t.reshape(q.off_m.forward(t, p, in), {bs});
    Var so = t.reshape(q.var_bound.bound(t, q.off_s.forward(t, p, in)), {bs});
    Var o = t.add(mo, t.mul(t.sqrt_pos(so), t.constant(noise.eps_offset)));
    out.off_m = mo;
    out.off_s = so;
    out.offset = o;
    log_q = t.add(log_q, detail::gaussian_diag_logpdf(t, t.reshape(o, {bs, 1}),
                                                      t.reshape(mo, {bs, 1}), t.reshape(so, {bs, 1})));
  }
  out.log_q = log_q;
  return out;
}

// ---- plain wrappers ----

struct FittedModel {
  ParamStore store;
  PlnTreeModel model;
  VariationalFamily q;
};

inline FittedModel make_fitted(const TreeLayout& tree, const ArchConfig& arch, std::uint64_t seed) {
  FittedModel f;
  Rng rng(seed, 11);
  f.model = make_model(tree, arch, f.store, rng);
  f.q = make_variational(f.model, f.store, rng);
  return f;
}

struct PosteriorSamples {
  std::vector<LatentState> draws;
  std::vector<double> log_q;
};

// n_draws reparameterized trajectories for one counts sample.
inline PosteriorSamples sample_posterior(const FittedModel& f, const HierarchicalCounts& counts,
                                         int n_draws, std::uint64_t seed,
                                         const std::vector<double>* covariate_row = nullptr) {
  std::vector<const HierarchicalCounts*> reps(static_cast<size_t>(n_draws), &counts);
  std::vector<const std::vector<double>*> covs;
  if (covariate_row) covs.assign(static_cast<size_t>(n_draws), covariate_row);
  BatchData batch = make_batch(f.model, reps, covariate_row ? &covs : nullptr);
  Rng rng(seed, 303);
  NoisePack noise = make_noise(f.model, batch.size, rng);
  Tape t;
  Bound p;
  p.tape = &t;
  for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
  PosteriorDraw draw = sample_posterior_graph(f.model, f.q, t, p, batch, noise);

  PosteriorSamples out;
  const int L = f.model.depth();
  out.draws.resize(static_cast<size_t>(n_draws));
  out.log_q.resize(static_cast<size_t>(n_draws));
  for (int i = 0; i < n_draws; ++i) {
    auto& st = out.draws[static_cast<size_t>(i)];
    st.z.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
      st.z[static_cast<size_t>(l)].assign(
          static_cast<size_t>(f.model.tree.layer_sizes[static_cast<size_t>(l)]), 0.0);
      const int d = f.model.lidx.dim(l);
      if (d == 0) continue;
      const Tensor& z = t.val(draw.z[static_cast<size_t>(l)]);
      for (int a = 0; a < d; ++a)
        st.z[static_cast<size_t>(l)][static_cast<size_t>(
            f.model.lidx.active[static_cast<size_t>(l)][static_cast<size_t>(a)])] = z.at(i, a);
    }
    if (f.model.arch.offset_enabled) st.offset = t.val(draw.offset).at(i);
    out.log_q[static_cast<size_t>(i)] = t.val(draw.log_q).at(i);
  }
  return out;
}

// Posterior-mean encoding: the terminal layer is its analytic mean, lower
// layers average the conditional means over draws; mean-field needs no draws.
inline std::vector<LatentState> encode_dataset(const FittedModel& f, const HierarchicalDataset& ds,
                                               int n_draws, std::uint64_t seed) {
  const int L = f.model.depth();
  const size_t n = ds.size();
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  BatchData batch = make_batch(f.model, ds, idx);

  std::vector<LatentState> out(n);
  for (auto& st : out) {
    st.z.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l)
      st.z[static_cast<size_t>(l)].assign(
          static_cast<size_t>(f.model.tree.layer_sizes[static_cast<size_t>(l)]), 0.0);
  }
  const int draws = f.q.kind == VariationalKind::MeanField ? 1 : n_draws;
  Rng rng(seed, 404);
  std::vector<std::vector<double>> acc(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l)
    acc[static_cast<size_t>(l)].assign(n * static_cast<size_t>(std::max(0, f.model.lidx.dim(l))), 0.0);
  std::vector<double> acc_off(n, 0.0);

  for (int dwr = 0; dwr < draws; ++dwr) {
    NoisePack noise = make_noise(f.model, batch.size, rng);
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
    PosteriorDraw draw = sample_posterior_graph(f.model, f.q, t, p, batch, noise);
    for (int l = 0; l < L; ++l) {
      const int d = f.model.lidx.dim(l);
      if (d == 0) continue;
      const Tensor& m = t.val(draw.m[static_cast<size_t>(l)]);
      for (size_t i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a)
          acc[static_cast<size_t>(l)][i * static_cast<size_t>(d) + static_cast<size_t>(a)] +=
              m.at(static_cast<std::int64_t>(i), a);
    }
    if (f.model.arch.offset_enabled) {
      const Tensor& mo = t.val(draw.off_m);
      for (size_t i = 0; i < n; ++i) acc_off[i] += mo.at(static_cast<std::int64_t>(i));
    }
  }
  for (int l = 0; l < L; ++l) {
    const int d = f.model.lidx.dim(l);
    if (d == 0) continue;
    for (size_t i = 0; i < n; ++i)
      for (int a = 0; a < d; ++a)
        out[i].z[static_cast<size_t>(l)][static_cast<size_t>(
            f.model.lidx.active[static_cast<size_t>(l)][static_cast<size_t>(a)])] =
            acc[static_cast<size_t>(l)][i * static_cast<size_t>(d) + static_cast<size_t>(a)] /
            static_cast<double>(draws);
  }
  if (f.model.arch.offset_enabled)
    for (size_t i = 0; i < n; ++i) out[i].offset = acc_off[i] / static_cast<double>(draws);
  return out;
}

inline LatentState encode(const FittedModel& f, const HierarchicalCounts& counts, int n_draws,
                          std::uint64_t seed, const std::vector<double>* covariate_row = nullptr) {
  HierarchicalDataset ds;
  ds.tree = f.model.tree;
  ds.samples.push_back(counts);
  ds.sample_ids.push_back("x");
  if (covariate_row) ds.covariates.push_back(*covariate_row);
  return encode_dataset(f, ds, n_draws, seed)[0];
}

// Gaussian parameters of the offset posterior q(O | X).
inline std::pair<double, double> offset_posterior(const FittedModel& f,
                                                  const HierarchicalCounts& counts) {
  if (!f.model.arch.offset_enabled) throw DataError("offset_posterior: offset modeling disabled");
  double tot = 0.0;
  for (auto x : counts.layers[0]) tot += static_cast<double>(x);
  Tape t;
  Bound p;
  p.tape = &t;
  for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
  Tensor in({1, 1});
  in.at(0, 0) = std::log1p(tot);
  Var mo = f.q.off_m.forward(t, p, t.leaf(in));
  Var so = f.q.var_bound.bound(t, f.q.off_s.forward(t, p, t.leaf(in)));
  return {t.val(mo).v[0], t.val(so).v[0]};
}

// ---- fitted model serialization ----

inline Json model_to_json(const FittedModel& f) {
  Json j;
  j["format_version"] = 1;
  j["kind"] = f.model.arch.family == VariationalKind::Backward ? "plntree" : "plntree-mf";
  j["tree"] = tree_to_json(f.model.tree);
  j["arch"] = arch_to_json(f.model.arch);
  Json params = Json::array();
  for (const auto& e : f.store.entries) {
    Json pe;
    pe["name"] = e.name;
    pe["shape"] = e.value.shape;
    pe["values"] = e.value.v;
    params.push_back(pe);
  }
  j["params"] = params;
  if (f.model.arch.covariates_enabled) {
    j["covariate_standardization"] = Json{{"mean", f.model.cov_mean}, {"sd", f.model.cov_sd}};
  } else {
    j["covariate_standardization"] = nullptr;
  }
  return j;
}

inline void save_model(const std::string& path, const FittedModel& f) {
  write_json_file(path, model_to_json(f));
}

inline FittedModel model_from_json(const Json& j) {
  require_keys(j, {"format_version", "kind", "tree", "arch", "params", "covariate_standardization"},
               "model file");
  if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
    throw DataError("model file: unsupported format_version");
  TreeLayout tree = parse_tree(j["tree"]);
  ArchConfig arch = arch_from_json(j["arch"]);
  FittedModel f = make_fitted(tree, arch, 0);
  if (!j["params"].is_array() || j["params"].size() != f.store.entries.size())
    throw DataError("model file: parameter list does not match the architecture");
  for (size_t i = 0; i < f.store.entries.size(); ++i) {
    const Json& pe = j["params"][i];
    if (pe["name"].get<std::string>() != f.store.entries[i].name)
      throw DataError("model file: unexpected parameter \"" + pe["name"].get<std::string>() +
                      "\" (wanted \"" + f.store.entries[i].name + "\")");
    std::vector<std::int64_t> shape = pe["shape"].get<std::vector<std::int64_t>>();
    if (shape != f.store.entries[i].value.shape)
      throw DataError("model file: shape mismatch for " + f.store.entries[i].name);
    std::vector<double> vals = pe["values"].get<std::vector<double>>();
    if (vals.size() != f.store.entries[i].value.v.size())
      throw DataError("model file: value count mismatch for " + f.store.entries[i].name);
    f.store.entries[i].value.v = std::move(vals);
  }
  if (f.model.arch.covariates_enabled) {
    const Json& cs = j["covariate_standardization"];
    f.model.cov_mean = cs["mean"].get<std::vector<double>>();
    f.model.cov_sd = cs["sd"].get<std::vector<double>>();
  }
  return f;
}

inline FittedModel load_model(const std::string& path) { return model_from_json(read_json_file(path)); }

}  // namespace plntree
