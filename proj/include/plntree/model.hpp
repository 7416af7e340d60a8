#pragma once

// The hierarchical Poisson log-normal generative model: a latent Gaussian
// Markov chain over tree layers, Poisson emission at the first layer, and
// multinomial top-down propagation of counts through sibling groups.
// Optional extensions: a Gaussian-mixture offset on the first layer and
// covariate-conditioned dynamics.

#include <optional>

#include "plntree/nn.hpp"
#include "plntree/tree.hpp"

namespace plntree {

// ---- latent coordinate bookkeeping ----
//
// Only-child nodes carry no latent parameters: the softmax over a sibling
// group of size one is constant, so their latent coordinate is pinned to 0
// and excluded from every Gaussian. Layer 1 coordinates are always active.
struct LatentIndex {
  std::vector<std::vector<int>> active;      // active[l] = node indices, layer l
  std::vector<std::vector<int>> active_pos;  // node -> position in active[l], -1 if frozen
  // For layers l >= 1: sibling groups of size >= 2, as positions in active[l],
  // with the parent node index in layer l-1.
  std::vector<std::vector<std::vector<int>>> groups;
  std::vector<std::vector<int>> group_parent;

  int dim(int l) const { return static_cast<int>(active[static_cast<size_t>(l)].size()); }
};

inline LatentIndex build_latent_index(const TreeLayout& tree) {
  const int L = tree.depth();
  LatentIndex x;
  x.active.resize(static_cast<size_t>(L));
  x.active_pos.resize(static_cast<size_t>(L));
  x.groups.resize(static_cast<size_t>(L));
  x.group_parent.resize(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const int K = tree.layer_sizes[static_cast<size_t>(l)];
    x.active_pos[static_cast<size_t>(l)].assign(static_cast<size_t>(K), -1);
    if (l == 0) {
      for (int k = 0; k < K; ++k) {
        x.active_pos[0][static_cast<size_t>(k)] = k;
        x.active[0].push_back(k);
      }
      continue;
    }
    for (int k = 0; k < K; ++k) {
      if (!tree.singleton[static_cast<size_t>(l)][static_cast<size_t>(k)]) {
        x.active_pos[static_cast<size_t>(l)][static_cast<size_t>(k)] =
            static_cast<int>(x.active[static_cast<size_t>(l)].size());
        x.active[static_cast<size_t>(l)].push_back(k);
      }
    }
    const auto& child_groups = tree.children[static_cast<size_t>(l - 1)];
    for (int k = 0; k < tree.layer_sizes[static_cast<size_t>(l - 1)]; ++k) {
      const auto& g = child_groups[static_cast<size_t>(k)];
      if (g.size() < 2) continue;
      std::vector<int> pos;
      for (int j : g) pos.push_back(x.active_pos[static_cast<size_t>(l)][static_cast<size_t>(j)]);
      x.groups[static_cast<size_t>(l)].push_back(std::move(pos));
      x.group_parent[static_cast<size_t>(l)].push_back(k);
    }
  }
  return x;
}

// Block-diagonal centering projector over the active coordinates of layer l:
// one I - (1/c) 11^T block per sibling group.
inline Tensor sibling_projector(const LatentIndex& lidx, int layer) {
  const int d = lidx.dim(layer);
  Tensor p = Tensor::eye(d);
  for (const auto& g : lidx.groups[static_cast<size_t>(layer)]) {
    const double c = static_cast<double>(g.size());
    for (int a : g)
      for (int b : g) p.at(a, b) -= 1.0 / c;
  }
  return p;
}

// ---- configuration ----

enum class VariationalKind { Backward, MeanField };

struct ArchConfig {
  VariationalKind family = VariationalKind::Backward;
  EmbedderKind embedder = EmbedderKind::Gru;
  int embedding_dim = 32;
  int embedder_hidden = 32;
  int embedder_layers = 2;
  int head_hidden_layers = 2;
  int mf_hidden_layers = 1;
  bool strong_amortization = false;
  int transition_hidden_layers = 1;
  double bound_slope = 1.0;
  double mean_lo = -100.0, mean_hi = 25.0;
  double var_lo = 1e-8, var_hi = 10.0;
  bool offset_enabled = false;
  int offset_components = 2;
  bool covariates_enabled = false;
  int covariate_dim = 0;

  TemperedSigmoid mean_bound() const { return {mean_lo, mean_hi, bound_slope}; }
  TemperedSigmoid var_bound() const { return {var_lo, var_hi, bound_slope}; }
};

inline Json arch_to_json(const ArchConfig& a) {
  Json j;
  j["family"] = a.family == VariationalKind::Backward ? "backward" : "meanfield";
  j["embedder"] = a.embedder == EmbedderKind::Gru ? "gru" : "lstm";
  j["embedding_dim"] = a.embedding_dim;
  j["embedder_hidden"] = a.embedder_hidden;
  j["embedder_layers"] = a.embedder_layers;
  j["head_hidden_layers"] = a.head_hidden_layers;
  j["mf_hidden_layers"] = a.mf_hidden_layers;
  j["strong_amortization"] = a.strong_amortization;
  j["transition_hidden_layers"] = a.transition_hidden_layers;
  j["bound_slope"] = a.bound_slope;
  j["mean_bounds"] = {a.mean_lo, a.mean_hi};
  j["var_bounds"] = {a.var_lo, a.var_hi};
  j["offset"] = Json{{"enabled", a.offset_enabled}, {"n_components", a.offset_components}};
  j["covariates"] = Json{{"enabled", a.covariates_enabled}, {"dim", a.covariate_dim}};
  return j;
}

inline ArchConfig arch_from_json(const Json& j) {
  require_keys(j, {"preset", "family", "embedder", "embedding_dim", "embedder_hidden",
                   "embedder_layers", "head_hidden_layers", "mf_hidden_layers",
                   "strong_amortization", "transition_hidden_layers", "bound_slope",
                   "mean_bounds", "var_bounds", "offset", "covariates"},
               "arch");
  ArchConfig a;
  if (j.contains("preset")) {
    const std::string p = j["preset"].get<std::string>();
    if (p == "synthetic-model4") {
      a.embedding_dim = 120;
      a.embedder_hidden = 32;
      a.embedder_layers = 3;
      a.head_hidden_layers = 2;
    } else if (p == "metagenomics-e4") {
      a.embedding_dim = 32;
      a.embedder_hidden = 64;
      a.embedder_layers = 2;
      a.head_hidden_layers = 2;
    } else {
      throw ConfigError("arch.preset: unknown preset \"" + p + "\"");
    }
  }
  if (j.contains("family")) {
    const std::string f = j["family"].get<std::string>();
    if (f == "backward")
      a.family = VariationalKind::Backward;
    else if (f == "meanfield")
      a.family = VariationalKind::MeanField;
    else
      throw ConfigError("arch.family: expected backward|meanfield");
  }
  if (j.contains("embedder")) {
    const std::string e = j["embedder"].get<std::string>();
    if (e == "gru")
      a.embedder = EmbedderKind::Gru;
    else if (e == "lstm")
      a.embedder = EmbedderKind::Lstm;
    else
      throw ConfigError("arch.embedder: expected gru|lstm");
  }
  if (j.contains("embedding_dim")) a.embedding_dim = j["embedding_dim"].get<int>();
  if (j.contains("embedder_hidden")) a.embedder_hidden = j["embedder_hidden"].get<int>();
  if (j.contains("embedder_layers")) a.embedder_layers = j["embedder_layers"].get<int>();
  if (j.contains("head_hidden_layers")) a.head_hidden_layers = j["head_hidden_layers"].get<int>();
  if (j.contains("mf_hidden_layers")) a.mf_hidden_layers = j["mf_hidden_layers"].get<int>();
  if (j.contains("strong_amortization")) a.strong_amortization = j["strong_amortization"].get<bool>();
  if (j.contains("transition_hidden_layers"))
    a.transition_hidden_layers = j["transition_hidden_layers"].get<int>();
  if (j.contains("bound_slope")) a.bound_slope = j["bound_slope"].get<double>();
  if (j.contains("mean_bounds")) {
    a.mean_lo = j["mean_bounds"][0].get<double>();
    a.mean_hi = j["mean_bounds"][1].get<double>();
  }
  if (j.contains("var_bounds")) {
    a.var_lo = j["var_bounds"][0].get<double>();
    a.var_hi = j["var_bounds"][1].get<double>();
  }
  if (j.contains("offset")) {
    require_keys(j["offset"], {"enabled", "n_components"}, "arch.offset");
    if (j["offset"].contains("enabled")) a.offset_enabled = j["offset"]["enabled"].get<bool>();
    if (j["offset"].contains("n_components"))
      a.offset_components = j["offset"]["n_components"].get<int>();
  }
  if (j.contains("covariates")) {
    require_keys(j["covariates"], {"enabled", "dim"}, "arch.covariates");
    if (j["covariates"].contains("enabled"))
      a.covariates_enabled = j["covariates"]["enabled"].get<bool>();
    if (j["covariates"].contains("dim")) a.covariate_dim = j["covariates"]["dim"].get<int>();
  }
  return a;
}

// ---- the model ----

struct LatentState {
  std::vector<std::vector<double>> z;  // full layer vectors, zeros at frozen coords
  std::optional<double> offset;
};

struct PlnTreeModel {
  TreeLayout tree;
  LatentIndex lidx;
  ArchConfig arch;
  double lambda = 1e-4;

  int mu1 = -1;         // [K1]
  int sigma1_raw = -1;  // [K1,K1], lower part used; diagonal through softplus
  int covB = -1;        // [p+1, K1]: standardized covariates plus intercept row
  std::vector<Mlp> trans_mean;  // index l-1 for layer l >= 1
  std::vector<Mlp> trans_chol;
  std::vector<Tensor> projectors;  // per layer l >= 1, active coordinates

  // Offset prior mixture (weights via softmax, variances via exp).
  int off_logits = -1, off_means = -1, off_logvars = -1;

  // Covariate standardization fitted on the training data, persisted.
  std::vector<double> cov_mean, cov_sd;

  int depth() const { return tree.depth(); }
  int trans_input_dim(int layer) const {
    return lidx.dim(layer - 1) + (arch.covariates_enabled ? arch.covariate_dim : 0);
  }
};

inline PlnTreeModel make_model(const TreeLayout& tree, const ArchConfig& arch, ParamStore& store,
                               Rng& rng) {
  PlnTreeModel m;
  m.tree = tree;
  m.lidx = build_latent_index(tree);
  m.arch = arch;
  const int L = tree.depth();
  const int k1 = tree.layer_sizes[0];

  m.mu1 = store.add("prior.mu1", Tensor({k1}));
  {
    // Raw factor so that softplus(diag) ~ 1 initially.
    Tensor raw({k1, k1});
    const double inv_softplus_1 = std::log(std::exp(1.0) - 1.0);
    for (int i = 0; i < k1; ++i) raw.at(i, i) = inv_softplus_1;
    m.sigma1_raw = store.add("prior.sigma1_raw", raw);
  }
  if (arch.covariates_enabled) {
    if (arch.covariate_dim <= 0) throw ConfigError("arch.covariates.dim must be positive");
    m.covB = store.add("prior.B", Tensor({arch.covariate_dim + 1, k1}));
    m.cov_mean.assign(static_cast<size_t>(arch.covariate_dim), 0.0);
    m.cov_sd.assign(static_cast<size_t>(arch.covariate_dim), 1.0);
  }
  for (int l = 1; l < L; ++l) {
    const int dout = m.lidx.dim(l);
    if (dout == 0) {
      // Layer of only-children: no latent coordinates, no parameters.
      m.trans_mean.emplace_back();
      m.trans_chol.emplace_back();
      m.projectors.emplace_back();
      continue;
    }
    // A previous layer may itself be all-singleton; the nets then see a
    // constant scalar input and reduce to bias terms.
    const int din = std::max(1, m.lidx.dim(l - 1) + (arch.covariates_enabled ? arch.covariate_dim : 0));
    const int packed = dout * (dout + 1) / 2;
    MlpSpec mean_spec{din, dout, arch.transition_hidden_layers, std::max(1, m.lidx.dim(l - 1))};
    MlpSpec chol_spec{din, packed, arch.transition_hidden_layers,
                      std::max(1, m.lidx.dim(l - 1) * (dout + 1) / 2)};
    m.trans_mean.push_back(Mlp::create(store, "prior.mean.l" + std::to_string(l + 1), mean_spec, rng));
    m.trans_chol.push_back(Mlp::create(store, "prior.chol.l" + std::to_string(l + 1), chol_spec, rng));
    m.projectors.push_back(sibling_projector(m.lidx, l));
  }
  if (arch.offset_enabled) {
    if (arch.offset_components <= 0) throw ConfigError("arch.offset.n_components must be positive");
    const int c = arch.offset_components;
    m.off_logits = store.add("prior.offset.logits", Tensor({c}));
    Tensor means({c});
    for (int i = 0; i < c; ++i) means.at(i) = rng.normal(0.0, 0.1);
    m.off_means = store.add("prior.offset.means", means);
    m.off_logvars = store.add("prior.offset.logvars", Tensor({c}));
  }
  return m;
}

// ---- first layer parameters ----

inline Tensor sigma1_chol_plain(const PlnTreeModel& m, const ParamStore& store) {
  const Tensor& raw = store.value(m.sigma1_raw);
  const int k = static_cast<int>(raw.dim(0));
  Tensor l({k, k});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j <= i; ++j) {
      const double x = raw.at(i, j);
      l.at(i, j) = (i == j) ? (x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)))) : x;
    }
  return l;
}

inline Tensor sigma1_plain(const PlnTreeModel& m, const ParamStore& store) {
  Tensor l = sigma1_chol_plain(m, store);
  const int k = static_cast<int>(l.dim(0));
  Tensor s({k, k});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      double acc = 0.0;
      for (int c = 0; c <= std::min(i, j); ++c) acc += l.at(i, c) * l.at(j, c);
      s.at(i, j) = acc;
    }
  return s;
}

// Sets Sigma_1 from a dense covariance (Cholesky with jitter escalation,
// then inverse-softplus on the diagonal).
inline void set_sigma1(PlnTreeModel& m, ParamStore& store, const Tensor& sigma) {
  Tensor l = cholesky_spd(sigma);
  Tensor raw({l.dim(0), l.dim(0)});
  for (std::int64_t i = 0; i < l.dim(0); ++i)
    for (std::int64_t j = 0; j <= i; ++j) {
      if (i == j) {
        const double y = l.at(i, i);
        raw.at(i, i) = y > 30.0 ? y : std::log(std::expm1(y));
      } else {
        raw.at(i, j) = l.at(i, j);
      }
    }
  store.value(m.sigma1_raw) = raw;
}

// In-graph lower Cholesky factor of Sigma_1 (softplus diagonal).
inline Var sigma1_chol_graph(const PlnTreeModel& m, Tape& t, const Bound& p) {
  const int k = m.tree.layer_sizes[0];
  Tensor offmask({k, k}), diagvec_mask({k, k});
  for (int i = 0; i < k; ++i) {
    diagvec_mask.at(i, i) = 1.0;
    for (int j = 0; j < i; ++j) offmask.at(i, j) = 1.0;
  }
  Var raw = p[m.sigma1_raw];
  return t.add(t.mul(raw, t.constant(offmask)),
               t.mul(t.softplus(raw), t.constant(diagvec_mask)));
}

// Standardize raw covariate rows and append the intercept column.
inline Tensor design_matrix(const PlnTreeModel& m, const std::vector<std::vector<double>>& cov) {
  const int p = m.arch.covariate_dim;
  Tensor c({static_cast<std::int64_t>(cov.size()), p + 1});
  for (size_t i = 0; i < cov.size(); ++i) {
    if (static_cast<int>(cov[i].size()) != p)
      throw DataError("covariates: dimension mismatch (expected " + std::to_string(p) + ")");
    for (int j = 0; j < p; ++j)
      c.at(static_cast<std::int64_t>(i), j) =
          (cov[i][static_cast<size_t>(j)] - m.cov_mean[static_cast<size_t>(j)]) /
          m.cov_sd[static_cast<size_t>(j)];
    c.at(static_cast<std::int64_t>(i), p) = 1.0;
  }
  return c;
}

// First-layer means for a batch: mu1 broadcast, or C B with covariates.
inline Var first_layer_mean_graph(const PlnTreeModel& m, Tape& t, const Bound& p,
                                  const Tensor* design, std::int64_t batch) {
  if (m.arch.covariates_enabled) {
    if (!design) throw DataError("model has covariates enabled but no covariates were provided");
    return t.matmul(t.constant(*design), p[m.covB]);
  }
  Tensor ones({batch, 1}, 1.0);
  return t.matmul(t.constant(ones), t.reshape(p[m.mu1], {1, m.tree.layer_sizes[0]}));
}

// ---- transitions ----

struct TransitionOut {
  Var mean;    // [B, d_l], projected
  Var chol;    // [B, d_l, d_l] lower factor of Sigma = L L^T + lambda I
  Var logdet;  // [B] log|Sigma|
};

inline TransitionOut transition_graph(const PlnTreeModel& m, int layer, Tape& t, const Bound& p,
                                      Var z_prev_active, const Tensor* design) {
  if (m.lidx.dim(layer) == 0)
    throw std::logic_error("transition_graph: layer has no active coordinates");
  const std::int64_t batch0 = t.val(z_prev_active).dim(0);
  Var in = z_prev_active;
  if (m.lidx.dim(layer - 1) == 0 && !m.arch.covariates_enabled)
    in = t.constant(Tensor({batch0, 1}, 1.0));
  if (m.arch.covariates_enabled) {
    if (m.lidx.dim(layer - 1) == 0) in = t.constant(Tensor({batch0, 0}));
    if (!design) throw DataError("model has covariates enabled but no covariates were provided");
    // Drop the intercept column: transitions see the standardized covariates.
    Tensor cov({design->dim(0), design->dim(1) - 1});
    for (std::int64_t i = 0; i < cov.dim(0); ++i)
      for (std::int64_t j = 0; j < cov.dim(1); ++j) cov.at(i, j) = design->at(i, j);
    in = t.concat_cols(in, t.constant(cov));
  }
  const Mlp& mean_net = m.trans_mean[static_cast<size_t>(layer - 1)];
  const Mlp& chol_net = m.trans_chol[static_cast<size_t>(layer - 1)];
  const int d = m.lidx.dim(layer);
  Var mean = t.matmul(mean_net.forward(t, p, in), t.constant(m.projectors[static_cast<size_t>(layer - 1)]));

  Var packed = chol_net.forward(t, p, in);
  const std::int64_t np = d * (d + 1) / 2;
  Tensor offmask({np}), diagmask({np});
  {
    std::int64_t q = 0;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j <= i; ++j, ++q) (i == j ? diagmask : offmask).at(q) = 1.0;
  }
  Var l = t.pack_lower(t.add(t.mul(packed, t.constant(offmask)),
                             t.mul(t.softplus(packed), t.constant(diagmask))),
                       d);
  const std::int64_t batch = t.val(z_prev_active).dim(0);
  Tensor lam({batch, d, d});
  for (std::int64_t b = 0; b < batch; ++b)
    for (int i = 0; i < d; ++i) lam.at(b, i, i) = m.lambda;
  Var sigma = t.add(t.matmul(l, t.transpose_last2(l)), t.constant(lam));
  Var chol = t.cholesky(sigma);
  Var logdet = t.scale(t.sum_axis(t.log(t.diag_part(chol)), 1), 2.0);
  return {mean, chol, logdet};
}

// ---- offset prior ----

inline Var offset_log_prior_graph(const PlnTreeModel& m, Tape& t, const Bound& p, Var o_batch) {
  const int c = m.arch.offset_components;
  const std::int64_t batch = t.val(o_batch).numel();
  Var logits = p[m.off_logits];
  Var logw = t.sub(logits, t.logsumexp(logits));
  Var means = p[m.off_means];
  Var logvars = p[m.off_logvars];
  Tensor ones({1, c}, 1.0);
  Var om = t.matmul(t.reshape(o_batch, {batch, 1}), t.constant(ones));  // [B,c]
  Var diff = t.sub(om, means);
  Var invvar = t.exp(t.neg(logvars));
  Var quad = t.mul(t.mul(diff, diff), invvar);
  Var terms = t.sub(t.add(logw, t.scale(t.add(logvars, t.constant(std::log(2.0 * 3.14159265358979323846))), -0.5)),
                    t.scale(quad, 0.5));
  return t.logsumexp(terms);  // [B]
}

inline double offset_sample_plain(const PlnTreeModel& m, const ParamStore& store, Rng& rng) {
  const int c = m.arch.offset_components;
  const Tensor& logits = store.value(m.off_logits);
  double mx = logits.at(0);
  for (int i = 1; i < c; ++i) mx = std::max(mx, logits.at(i));
  std::vector<double> w(static_cast<size_t>(c));
  double s = 0.0;
  for (int i = 0; i < c; ++i) {
    w[static_cast<size_t>(i)] = std::exp(logits.at(i) - mx);
    s += w[static_cast<size_t>(i)];
  }
  double u = rng.uniform() * s;
  int pick = c - 1;
  for (int i = 0; i < c; ++i) {
    u -= w[static_cast<size_t>(i)];
    if (u <= 0.0) {
      pick = i;
      break;
    }
  }
  const double mean = store.value(m.off_means).at(pick);
  const double sd = std::exp(0.5 * store.value(m.off_logvars).at(pick));
  return rng.normal(mean, sd);
}

// ---- initialization from data ----

inline void init_from_data(PlnTreeModel& m, ParamStore& store, const HierarchicalDataset& data,
                           std::vector<std::string>* warnings = nullptr) {
  const size_t n = data.size();
  if (n < 2) throw DataError("init_from_data: at least 2 samples required");
  const int k1 = m.tree.layer_sizes[0];

  if (m.arch.covariates_enabled) {
    if (!data.has_covariates())
      throw DataError("init_from_data: model expects covariates but the dataset has none");
    const int p = m.arch.covariate_dim;
    if (data.covariate_dim() != p)
      throw DataError("init_from_data: covariate dimension mismatch");
    for (int j = 0; j < p; ++j) {
      double mean = 0.0;
      for (const auto& row : data.covariates) mean += row[static_cast<size_t>(j)];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (const auto& row : data.covariates) {
        const double d = row[static_cast<size_t>(j)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      m.cov_mean[static_cast<size_t>(j)] = mean;
      m.cov_sd[static_cast<size_t>(j)] = var > 1e-12 ? std::sqrt(var) : 1.0;
      if (var <= 1e-12 && warnings)
        warnings->push_back("covariate " + std::to_string(j) + " is constant; left unscaled");
    }
  }

  // PLN-style first layer: coordinate-wise mean and covariance of log counts,
  // zeros guarded by log(max(x, 1)).
  Tensor logx({static_cast<std::int64_t>(n), k1});
  for (size_t i = 0; i < n; ++i)
    for (int k = 0; k < k1; ++k)
      logx.at(static_cast<std::int64_t>(i), k) =
          std::log(static_cast<double>(std::max<std::int64_t>(1, data.samples[i].layers[0][static_cast<size_t>(k)])));

  Tensor mu({k1});
  for (int k = 0; k < k1; ++k) {
    bool all_zero = true;
    for (size_t i = 0; i < n; ++i)
      if (data.samples[i].layers[0][static_cast<size_t>(k)] != 0) all_zero = false;
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += logx.at(static_cast<std::int64_t>(i), k);
    mu.at(k) = s / static_cast<double>(n);
    if (all_zero) {
      mu.at(k) = 0.0;
      if (warnings)
        warnings->push_back("first-layer coordinate " + std::to_string(k) +
                            " is zero in every sample; mean set to 0");
    }
  }
  Tensor sigma({k1, k1});
  for (int a = 0; a < k1; ++a)
    for (int b = 0; b < k1; ++b) {
      double s = 0.0;
      for (size_t i = 0; i < n; ++i)
        s += (logx.at(static_cast<std::int64_t>(i), a) - mu.at(a)) *
             (logx.at(static_cast<std::int64_t>(i), b) - mu.at(b));
      sigma.at(a, b) = s / static_cast<double>(n - 1);
    }
  store.value(m.mu1) = mu;
  set_sigma1(m, store, sigma);
  if (m.arch.covariates_enabled) {
    // Start the regression at the intercept-only solution.
    Tensor b({m.arch.covariate_dim + 1, k1});
    for (int k = 0; k < k1; ++k) b.at(m.arch.covariate_dim, k) = mu.at(k);
    store.value(m.covB) = b;
  }
}

// ---- sampling ----

inline std::vector<LatentState> sample_latents(const PlnTreeModel& m, const ParamStore& store,
                                               int n, std::uint64_t seed,
                                               const std::vector<std::vector<double>>* covariates = nullptr) {
  if (m.arch.covariates_enabled) {
    if (!covariates) throw DataError("sample_latents: covariates required");
    if (static_cast<int>(covariates->size()) != n)
      throw DataError("sample_latents: covariate row count must equal n");
  } else if (covariates) {
    throw DataError("sample_latents: model was built without covariates");
  }
  Rng rng(seed, 101);
  const int L = m.depth();
  std::vector<LatentState> out(static_cast<size_t>(n));
  for (auto& s : out) {
    s.z.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l)
      s.z[static_cast<size_t>(l)].assign(static_cast<size_t>(m.tree.layer_sizes[static_cast<size_t>(l)]), 0.0);
  }

  // Layer 1 draws.
  Tensor l1 = sigma1_chol_plain(m, store);
  const int k1 = m.tree.layer_sizes[0];
  std::optional<Tensor> design;
  if (m.arch.covariates_enabled) design = design_matrix(m, *covariates);
  const Tensor& mu = store.value(m.mu1);
  const Tensor* bmat = m.arch.covariates_enabled ? &store.value(m.covB) : nullptr;
  Tensor z_prev({n, m.lidx.dim(0)});
  for (int i = 0; i < n; ++i) {
    std::vector<double> eps(static_cast<size_t>(k1));
    for (auto& e : eps) e = rng.normal();
    for (int a = 0; a < k1; ++a) {
      double v = 0.0;
      for (int b = 0; b <= a; ++b) v += l1.at(a, b) * eps[static_cast<size_t>(b)];
      double mean = mu.at(a);
      if (bmat) {
        mean = 0.0;
        for (std::int64_t r = 0; r < bmat->dim(0); ++r) mean += design->at(i, r) * bmat->at(r, a);
      }
      out[static_cast<size_t>(i)].z[0][static_cast<size_t>(a)] = mean + v;
      z_prev.at(i, a) = mean + v;
    }
  }

  // Transition layers, batched through a no-gradient tape.
  for (int l = 1; l < L; ++l) {
    if (m.lidx.dim(l) == 0) {
      z_prev = Tensor({n, 0});
      continue;
    }
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : store.entries) p.vars.push_back(t.leaf(e.value, false));
    TransitionOut tr = transition_graph(m, l, t, p, t.leaf(z_prev), design ? &*design : nullptr);
    const Tensor& mean = t.val(tr.mean);
    const Tensor& chol = t.val(tr.chol);
    const int d = m.lidx.dim(l);
    Tensor z_cur({n, d});
    for (int i = 0; i < n; ++i) {
      std::vector<double> eps(static_cast<size_t>(d));
      for (auto& e : eps) e = rng.normal();
      for (int a = 0; a < d; ++a) {
        double v = 0.0;
        for (int b = 0; b <= a; ++b) v += chol.at(i, a, b) * eps[static_cast<size_t>(b)];
        const double zi = mean.at(i, a) + v;
        z_cur.at(i, a) = zi;
        out[static_cast<size_t>(i)].z[static_cast<size_t>(l)][static_cast<size_t>(
            m.lidx.active[static_cast<size_t>(l)][static_cast<size_t>(a)])] = zi;
      }
    }
    z_prev = z_cur;
  }

  if (m.arch.offset_enabled) {
    for (auto& s : out) s.offset = offset_sample_plain(m, store, rng);
  }
  return out;
}

inline HierarchicalCounts sample_counts_one(const PlnTreeModel& m, const LatentState& state,
                                            Rng& rng) {
  const int L = m.depth();
  HierarchicalCounts c;
  c.layers.resize(static_cast<size_t>(L));
  const int k1 = m.tree.layer_sizes[0];
  c.layers[0].resize(static_cast<size_t>(k1));
  const double off = state.offset.value_or(0.0);
  for (int k = 0; k < k1; ++k) {
    // Rate exponent guarded by the mean bound.
    const double e = std::min(m.arch.mean_hi, std::max(m.arch.mean_lo, state.z[0][static_cast<size_t>(k)] + off));
    c.layers[0][static_cast<size_t>(k)] = rng.poisson(std::exp(e));
  }
  for (int l = 0; l + 1 < L; ++l) {
    c.layers[static_cast<size_t>(l + 1)].assign(
        static_cast<size_t>(m.tree.layer_sizes[static_cast<size_t>(l + 1)]), 0);
    for (int k = 0; k < m.tree.layer_sizes[static_cast<size_t>(l)]; ++k) {
      const auto& group = m.tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)];
      const std::int64_t parent = c.layers[static_cast<size_t>(l)][static_cast<size_t>(k)];
      if (group.size() == 1) {
        c.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(group[0])] = parent;
        continue;
      }
      std::vector<double> zg;
      zg.reserve(group.size());
      double mx = -1e300;
      for (int j : group) {
        zg.push_back(state.z[static_cast<size_t>(l + 1)][static_cast<size_t>(j)]);
        mx = std::max(mx, zg.back());
      }
      double s = 0.0;
      for (auto& z : zg) {
        z = std::exp(z - mx);
        s += z;
      }
      for (auto& z : zg) z /= s;
      auto draws = rng.multinomial(parent, zg);
      for (size_t gi = 0; gi < group.size(); ++gi)
        c.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(group[gi])] = draws[gi];
    }
  }
  return c;
}

inline std::vector<HierarchicalCounts> sample_counts(const PlnTreeModel& m,
                                                     const std::vector<LatentState>& latents,
                                                     std::uint64_t seed) {
  Rng rng(seed, 202);
  std::vector<HierarchicalCounts> out;
  out.reserve(latents.size());
  for (const auto& s : latents) out.push_back(sample_counts_one(m, s, rng));
  return out;
}

inline HierarchicalDataset sample_dataset(const PlnTreeModel& m, const ParamStore& store, int n,
                                          std::uint64_t seed,
                                          const std::vector<std::vector<double>>* covariates = nullptr,
                                          const std::string& id_prefix = "s") {
  auto latents = sample_latents(m, store, n, seed, covariates);
  auto counts = sample_counts(m, latents, seed + 1);
  HierarchicalDataset ds;
  ds.tree = m.tree;
  ds.samples = std::move(counts);
  for (int i = 0; i < n; ++i) ds.sample_ids.push_back(id_prefix + std::to_string(i));
  if (covariates) ds.covariates = *covariates;
  return ds;
}

// ---- joint density ----

struct JointDensity {
  double log_density = 0.0;
  bool valid = true;  // false when the counts violate compositionality
};

inline double gaussian_logpdf_chol(const std::vector<double>& x, const std::vector<double>& mean,
                                   const Tensor& chol) {
  const std::int64_t d = chol.dim(0);
  std::vector<double> r(static_cast<size_t>(d));
  for (std::int64_t i = 0; i < d; ++i) r[static_cast<size_t>(i)] = x[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)];
  trisolve_lower(chol.v.data(), r.data(), d);
  double quad = 0.0, logdet = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    quad += r[static_cast<size_t>(i)] * r[static_cast<size_t>(i)];
    logdet += std::log(chol.at(i, i));
  }
  return -0.5 * quad - logdet - 0.5 * static_cast<double>(d) * std::log(2.0 * 3.14159265358979323846);
}

// Evaluates log p(X, Z) for a batch of latent states against one counts
// sample (the batch form serves importance sampling).
inline std::vector<JointDensity> joint_log_density_batch(
    const PlnTreeModel& m, const ParamStore& store, const HierarchicalCounts& counts,
    const std::vector<LatentState>& latents, const std::vector<double>* covariate_row = nullptr) {
  const int L = m.depth();
  const size_t n = latents.size();
  std::vector<JointDensity> out(n);

  bool counts_ok = true;
  {
    try {
      validate_counts(m.tree, counts.layers);
    } catch (const DataError&) {
      counts_ok = false;
    }
  }
  if (!counts_ok) {
    for (auto& o : out) {
      o.valid = false;
      o.log_density = -std::numeric_limits<double>::infinity();
    }
    return out;
  }

  std::optional<Tensor> design;
  if (m.arch.covariates_enabled) {
    if (!covariate_row) throw DataError("joint_log_density: covariates required");
    std::vector<std::vector<double>> rows{*covariate_row};
    design = design_matrix(m, rows);
  }

  // First-layer Gaussian.
  Tensor l1 = sigma1_chol_plain(m, store);
  const int k1 = m.tree.layer_sizes[0];
  std::vector<double> mean1(static_cast<size_t>(k1));
  for (int k = 0; k < k1; ++k) mean1[static_cast<size_t>(k)] = store.value(m.mu1).at(k);
  if (m.arch.covariates_enabled) {
    const Tensor& b = store.value(m.covB);
    for (int k = 0; k < k1; ++k) {
      double s = 0.0;
      for (std::int64_t r = 0; r < b.dim(0); ++r) s += design->at(0, r) * b.at(r, k);
      mean1[static_cast<size_t>(k)] = s;
    }
  }
  for (size_t i = 0; i < n; ++i)
    out[i].log_density += gaussian_logpdf_chol(latents[i].z[0], mean1, l1);

  // Transition Gaussians over active coordinates.
  for (int l = 1; l < L; ++l) {
    const int dprev = m.lidx.dim(l - 1);
    const int d = m.lidx.dim(l);
    if (d == 0) continue;
    Tensor zprev({static_cast<std::int64_t>(n), dprev});
    for (size_t i = 0; i < n; ++i)
      for (int a = 0; a < dprev; ++a)
        zprev.at(static_cast<std::int64_t>(i), a) =
            latents[i].z[static_cast<size_t>(l - 1)][static_cast<size_t>(
                m.lidx.active[static_cast<size_t>(l - 1)][static_cast<size_t>(a)])];
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : store.entries) p.vars.push_back(t.leaf(e.value, false));
    std::optional<Tensor> design_n;
    if (design) {
      design_n = Tensor({static_cast<std::int64_t>(n), design->dim(1)});
      for (size_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < design->dim(1); ++c)
          design_n->at(static_cast<std::int64_t>(i), c) = design->at(0, c);
    }
    TransitionOut tr = transition_graph(m, l, t, p, t.leaf(zprev), design_n ? &*design_n : nullptr);
    const Tensor& mean = t.val(tr.mean);
    const Tensor& chol = t.val(tr.chol);
    for (size_t i = 0; i < n; ++i) {
      std::vector<double> zi(static_cast<size_t>(d)), mi(static_cast<size_t>(d));
      Tensor ci({d, d});
      for (int a = 0; a < d; ++a) {
        zi[static_cast<size_t>(a)] = latents[i].z[static_cast<size_t>(l)][static_cast<size_t>(
            m.lidx.active[static_cast<size_t>(l)][static_cast<size_t>(a)])];
        mi[static_cast<size_t>(a)] = mean.at(static_cast<std::int64_t>(i), a);
        for (int b = 0; b < d; ++b) ci.at(a, b) = chol.at(static_cast<std::int64_t>(i), a, b);
      }
      out[i].log_density += gaussian_logpdf_chol(zi, mi, ci);
    }
  }

  // Poisson emission at the first layer.
  for (size_t i = 0; i < n; ++i) {
    const double off = latents[i].offset.value_or(0.0);
    for (int k = 0; k < k1; ++k) {
      const double z = latents[i].z[0][static_cast<size_t>(k)] + off;
      const double x = static_cast<double>(counts.layers[0][static_cast<size_t>(k)]);
      out[i].log_density += x * z - std::exp(z) - std::lgamma(x + 1.0);
    }
    if (m.arch.offset_enabled && latents[i].offset) {
      // Prior of the offset itself.
      Tape t;
      Bound p;
      p.tape = &t;
      for (const auto& e : store.entries) p.vars.push_back(t.leaf(e.value, false));
      Var lp = offset_log_prior_graph(m, t, p, t.leaf(Tensor::vec({*latents[i].offset})));
      out[i].log_density += t.val(lp).v[0];
    }
  }

  // Multinomial propagation; sibling groups of size one contribute zero.
  for (int l = 0; l + 1 < L; ++l) {
    for (int k = 0; k < m.tree.layer_sizes[static_cast<size_t>(l)]; ++k) {
      const auto& group = m.tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)];
      if (group.size() < 2) continue;
      const double parent = static_cast<double>(counts.layers[static_cast<size_t>(l)][static_cast<size_t>(k)]);
      double const_part = std::lgamma(parent + 1.0);
      for (int j : group)
        const_part -= std::lgamma(static_cast<double>(counts.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(j)]) + 1.0);
      for (size_t i = 0; i < n; ++i) {
        double dot = 0.0, mx = -1e300;
        for (int j : group) mx = std::max(mx, latents[i].z[static_cast<size_t>(l + 1)][static_cast<size_t>(j)]);
        double lse = 0.0;
        for (int j : group) {
          const double z = latents[i].z[static_cast<size_t>(l + 1)][static_cast<size_t>(j)];
          dot += static_cast<double>(counts.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(j)]) * z;
          lse += std::exp(z - mx);
        }
        out[i].log_density += const_part + dot - parent * (mx + std::log(lse));
      }
    }
  }
  return out;
}

inline JointDensity joint_log_density(const PlnTreeModel& m, const ParamStore& store,
                                      const HierarchicalCounts& counts, const LatentState& latent,
                                      const std::vector<double>* covariate_row = nullptr) {
  return joint_log_density_batch(m, store, counts, {latent}, covariate_row)[0];
}

}  // namespace plntree
