#pragma once

// Synthetic data generation and the non-hierarchical baselines: the
// Markov-Dirichlet protocol (graph-structured log-normal root composition,
// Dirichlet-multinomial propagation), a flat Poisson log-normal model fitted
// by variational EM with per-sample parameters, and the CLR-Gaussian
// generator with last-layer lifting.

#include "plntree/nn.hpp"
#include "plntree/tree.hpp"

namespace plntree {

// ---- Markov-Dirichlet generator ----

struct MarkovDirichletConfig {
  TreeLayout tree;
  std::string graph_model = "erdos-renyi";
  double er_probability = 0.2;
  double v = 0.3;
  double u = 0.1;
  std::vector<double> mu;  // empty = zeros
  bool negative_binomial_effort = false;
  double nb_r = 20.0;
  double nb_p = 0.5;
  std::int64_t fixed_total = 20000;
  double alpha_floor = 1e-6;
  // Multiplies the counts before the concentration nets: 1 feeds raw counts
  // (floored/saturated Dirichlet regimes at large sampling efforts), smaller
  // scales give moderate concentrations and noisy, zero-free splits.
  double alpha_input_scale = 1.0;
  std::uint64_t net_seed = 1;  // seeds the random concentration nets
};

inline Json markov_dirichlet_config_to_json(const MarkovDirichletConfig& c) {
  Json j;
  j["graph_model"] = c.graph_model;
  j["er_probability"] = c.er_probability;
  j["v"] = c.v;
  j["u"] = c.u;
  j["mu"] = c.mu;
  j["negative_binomial_effort"] = c.negative_binomial_effort;
  j["nb_r"] = c.nb_r;
  j["nb_p"] = c.nb_p;
  j["fixed_total"] = c.fixed_total;
  j["alpha_floor"] = c.alpha_floor;
  j["alpha_input_scale"] = c.alpha_input_scale;
  j["net_seed"] = c.net_seed;
  return j;
}

inline MarkovDirichletConfig markov_dirichlet_config_from_json(const Json& j, TreeLayout tree) {
  require_keys(j, {"graph_model", "er_probability", "v", "u", "mu", "negative_binomial_effort",
                   "nb_r", "nb_p", "fixed_total", "alpha_floor", "alpha_input_scale", "net_seed"},
               "markov-dirichlet");
  MarkovDirichletConfig c;
  c.tree = std::move(tree);
  if (j.contains("graph_model")) c.graph_model = j["graph_model"].get<std::string>();
  if (j.contains("er_probability")) c.er_probability = j["er_probability"].get<double>();
  if (j.contains("v")) c.v = j["v"].get<double>();
  if (j.contains("u")) c.u = j["u"].get<double>();
  if (j.contains("mu")) c.mu = j["mu"].get<std::vector<double>>();
  if (j.contains("negative_binomial_effort"))
    c.negative_binomial_effort = j["negative_binomial_effort"].get<bool>();
  if (j.contains("nb_r")) c.nb_r = j["nb_r"].get<double>();
  if (j.contains("nb_p")) c.nb_p = j["nb_p"].get<double>();
  if (j.contains("fixed_total")) c.fixed_total = j["fixed_total"].get<std::int64_t>();
  if (j.contains("alpha_floor")) c.alpha_floor = j["alpha_floor"].get<double>();
  if (j.contains("alpha_input_scale")) c.alpha_input_scale = j["alpha_input_scale"].get<double>();
  if (j.contains("net_seed")) c.net_seed = j["net_seed"].get<std::uint64_t>();
  if (!(c.v > 0.0) || !(c.u > 0.0)) throw ConfigError("markov-dirichlet: v and u must be positive");
  if (c.fixed_total < 1) throw ConfigError("markov-dirichlet: fixed_total must be >= 1");
  return c;
}

// Precision matrix Omega = v G + (|min eig(v G)| + u) I from an
// Erdos-Renyi adjacency draw.
inline Tensor markov_dirichlet_precision(const MarkovDirichletConfig& cfg, Rng& rng) {
  if (cfg.graph_model != "erdos-renyi")
    throw ConfigError("markov-dirichlet: graph model \"" + cfg.graph_model +
                      "\" is not implemented; use erdos-renyi");
  const int k = cfg.tree.layer_sizes[0];
  Tensor g({k, k});
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j)
      if (rng.uniform() < cfg.er_probability) g.at(i, j) = g.at(j, i) = 1.0;
  Tensor vg = g;
  for (auto& x : vg.v) x *= cfg.v;
  auto evals = symmetric_eigen(vg);
  const double shift = std::fabs(evals.front()) + cfg.u;
  Tensor omega = vg;
  for (int i = 0; i < k; ++i) omega.at(i, i) += shift;
  return omega;
}

inline HierarchicalDataset markov_dirichlet_sample(const MarkovDirichletConfig& cfg, int n,
                                                   std::uint64_t seed) {
  const TreeLayout& tree = cfg.tree;
  const int L = tree.depth();
  const int k1 = tree.layer_sizes[0];
  Rng rng(seed, 909);

  Tensor omega = markov_dirichlet_precision(cfg, rng);
  Tensor omega_chol = cholesky_spd(omega, 0.0, 0.0);

  // One-layer concentration nets with softplus outputs, one per internal
  // node, drawn once from the net seed.
  Rng net_rng(cfg.net_seed, 910);
  std::vector<std::vector<Tensor>> alpha_w(static_cast<size_t>(L - 1));
  std::vector<std::vector<Tensor>> alpha_b(static_cast<size_t>(L - 1));
  for (int l = 0; l + 1 < L; ++l) {
    const int kl = tree.layer_sizes[static_cast<size_t>(l)];
    for (int k = 0; k < kl; ++k) {
      const int c = static_cast<int>(tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)].size());
      alpha_w[static_cast<size_t>(l)].push_back(uniform_init({kl, c}, kl, net_rng));
      Tensor b({c});
      for (auto& x : b.v) x = net_rng.uniform(0.0, 1.0);
      alpha_b[static_cast<size_t>(l)].push_back(b);
    }
  }

  std::vector<double> mu = cfg.mu;
  if (mu.empty()) mu.assign(static_cast<size_t>(k1), 0.0);
  if (static_cast<int>(mu.size()) != k1)
    throw ConfigError("markov-dirichlet: mu must have length " + std::to_string(k1));

  HierarchicalDataset ds;
  ds.tree = tree;
  for (int i = 0; i < n; ++i) {
    // log a ~ N(mu, Omega^{-1}): solve the transposed factor against noise.
    std::vector<double> eps(static_cast<size_t>(k1));
    for (auto& e : eps) e = rng.normal();
    trisolve_lower_t(omega_chol.v.data(), eps.data(), k1);
    std::vector<double> a(static_cast<size_t>(k1));
    for (int k = 0; k < k1; ++k) a[static_cast<size_t>(k)] = std::exp(mu[static_cast<size_t>(k)] + eps[static_cast<size_t>(k)]);
    // Probability vector through the softmax of a.
    double mx = a[0];
    for (double x : a) mx = std::max(mx, x);
    std::vector<double> pi(static_cast<size_t>(k1));
    double s = 0.0;
    for (int k = 0; k < k1; ++k) {
      pi[static_cast<size_t>(k)] = std::exp(a[static_cast<size_t>(k)] - mx);
      s += pi[static_cast<size_t>(k)];
    }
    for (auto& x : pi) x /= s;

    std::int64_t total = cfg.fixed_total;
    if (cfg.negative_binomial_effort) {
      const double lam = rng.gamma(cfg.nb_r) * (1.0 - cfg.nb_p) / cfg.nb_p;
      total = std::max<std::int64_t>(1, rng.poisson(lam));
    }
    HierarchicalCounts counts;
    counts.layers.resize(static_cast<size_t>(L));
    counts.layers[0] = rng.multinomial(total, pi);
    for (int l = 0; l + 1 < L; ++l) {
      counts.layers[static_cast<size_t>(l + 1)].assign(
          static_cast<size_t>(tree.layer_sizes[static_cast<size_t>(l + 1)]), 0);
      const int kl = tree.layer_sizes[static_cast<size_t>(l)];
      // The concentration nets see the raw counts of the current layer; with
      // large sampling efforts this drives the Dirichlet weights between
      // near-degenerate and near-deterministic regimes depending on the
      // count pattern.
      std::vector<double> xin(static_cast<size_t>(kl));
      for (int k = 0; k < kl; ++k)
        xin[static_cast<size_t>(k)] = cfg.alpha_input_scale *
            static_cast<double>(counts.layers[static_cast<size_t>(l)][static_cast<size_t>(k)]);
      for (int k = 0; k < kl; ++k) {
        const auto& group = tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)];
        const std::int64_t parent = counts.layers[static_cast<size_t>(l)][static_cast<size_t>(k)];
        if (group.size() == 1) {
          counts.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(group[0])] = parent;
          continue;
        }
        const Tensor& w = alpha_w[static_cast<size_t>(l)][static_cast<size_t>(k)];
        const Tensor& b = alpha_b[static_cast<size_t>(l)][static_cast<size_t>(k)];
        std::vector<double> alpha(group.size());
        for (size_t c = 0; c < group.size(); ++c) {
          double acc = b.at(static_cast<std::int64_t>(c));
          for (int in = 0; in < kl; ++in) acc += xin[static_cast<size_t>(in)] * w.at(in, static_cast<std::int64_t>(c));
          const double sp = acc > 30.0 ? acc : std::log1p(std::exp(std::min(acc, 30.0)));
          alpha[c] = std::max(cfg.alpha_floor, sp);
        }
        auto weights = rng.dirichlet(alpha);
        auto draws = rng.multinomial(parent, weights);
        for (size_t c = 0; c < group.size(); ++c)
          counts.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(group[c])] = draws[c];
      }
    }
    ds.samples.push_back(std::move(counts));
    ds.sample_ids.push_back("md" + std::to_string(i));
  }
  return ds;
}

// ---- flat PLN baseline ----

struct PlnFitConfig {
  int epochs = 400;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  double jitter = 1e-4;
};

struct PlnBaselineParams {
  Tensor mu;     // [K]
  Tensor sigma;  // [K,K]
  std::vector<std::vector<double>> m;  // per-sample variational means
  std::vector<std::vector<double>> s;  // per-sample diagonal variances
  std::vector<std::string> sample_ids;
  double final_elbo = 0.0;
};

// Per-sample ELBO of the flat model given its variational parameters.
inline double pln_elbo_sample(const std::vector<double>& x, const std::vector<double>& m,
                              const std::vector<double>& s, const Tensor& mu,
                              const Tensor& sigma_chol, const Tensor& sigma_inv) {
  const size_t k = x.size();
  double elbo = 0.0;
  for (size_t j = 0; j < k; ++j)
    elbo += x[j] * m[j] - std::exp(m[j] + 0.5 * s[j]) - std::lgamma(x[j] + 1.0);
  double logdet = 0.0;
  for (size_t j = 0; j < k; ++j) logdet += 2.0 * std::log(sigma_chol.at(static_cast<std::int64_t>(j), static_cast<std::int64_t>(j)));
  double quad = 0.0, tr = 0.0, logs = 0.0;
  for (size_t a = 0; a < k; ++a) {
    tr += sigma_inv.at(static_cast<std::int64_t>(a), static_cast<std::int64_t>(a)) * s[a];
    logs += std::log(s[a]);
    for (size_t b = 0; b < k; ++b)
      quad += (m[a] - mu.at(static_cast<std::int64_t>(a))) * sigma_inv.at(static_cast<std::int64_t>(a), static_cast<std::int64_t>(b)) *
              (m[b] - mu.at(static_cast<std::int64_t>(b)));
  }
  elbo -= 0.5 * (logdet - logs - static_cast<double>(k) + tr + quad);
  return elbo;
}

// Variational EM on leaf counts: analytic-gradient Adam steps on the
// per-sample parameters, explicit M-steps for (mu, Sigma).
inline PlnBaselineParams pln_fit(const HierarchicalDataset& data, const PlnFitConfig& cfg = {}) {
  const size_t n = data.size();
  if (n < 2) throw DataError("pln_fit: at least 2 samples required");
  if (n > 100000) throw DataError("pln_fit: per-sample parameterization is limited to 1e5 samples");
  const int k = data.tree.layer_sizes.back();

  PlnBaselineParams p;
  p.sample_ids = data.sample_ids;
  p.m.assign(n, std::vector<double>(static_cast<size_t>(k)));
  p.s.assign(n, std::vector<double>(static_cast<size_t>(k), 1.0));
  std::vector<std::vector<double>> logs(n, std::vector<double>(static_cast<size_t>(k), 0.0));
  for (size_t i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      p.m[i][static_cast<size_t>(j)] =
          std::log(static_cast<double>(std::max<std::int64_t>(1, data.samples[i].leaves()[static_cast<size_t>(j)])));

  auto m_step = [&] {
    Tensor mu({k});
    for (size_t i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) mu.at(j) += p.m[i][static_cast<size_t>(j)];
    for (auto& v : mu.v) v /= static_cast<double>(n);
    Tensor sigma({k, k});
    for (size_t i = 0; i < n; ++i)
      for (int a = 0; a < k; ++a) {
        const double da = p.m[i][static_cast<size_t>(a)] - mu.at(a);
        for (int b = 0; b < k; ++b) sigma.at(a, b) += da * (p.m[i][static_cast<size_t>(b)] - mu.at(b));
        sigma.at(a, a) += p.s[i][static_cast<size_t>(a)];
      }
    for (auto& v : sigma.v) v /= static_cast<double>(n);
    p.mu = mu;
    p.sigma = sigma;
  };
  m_step();

  // Adam over the flattened per-sample parameters.
  std::vector<double> adam_mm(n * static_cast<size_t>(k), 0.0), adam_mv(n * static_cast<size_t>(k), 0.0);
  std::vector<double> adam_sm(n * static_cast<size_t>(k), 0.0), adam_sv(n * static_cast<size_t>(k), 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Tensor chol = cholesky_spd(p.sigma, cfg.jitter);
    Tensor inv = spd_inverse_from_chol(chol);
    const double bc1 = 1.0 - std::pow(b1, epoch);
    const double bc2 = 1.0 - std::pow(b2, epoch);
    for (size_t i = 0; i < n; ++i) {
      const auto& leaves = data.samples[i].leaves();
      std::vector<double> resid(static_cast<size_t>(k));
      for (int a = 0; a < k; ++a) resid[static_cast<size_t>(a)] = p.m[i][static_cast<size_t>(a)] - p.mu.at(a);
      for (int a = 0; a < k; ++a) {
        double siginv_r = 0.0;
        for (int b = 0; b < k; ++b) siginv_r += inv.at(a, b) * resid[static_cast<size_t>(b)];
        const double rate = std::exp(p.m[i][static_cast<size_t>(a)] + 0.5 * p.s[i][static_cast<size_t>(a)]);
        const double gm = -(static_cast<double>(leaves[static_cast<size_t>(a)]) - rate - siginv_r);
        const double gs_raw = -(-0.5 * rate + 0.5 / p.s[i][static_cast<size_t>(a)] - 0.5 * inv.at(a, a));
        const double gt = gs_raw * p.s[i][static_cast<size_t>(a)];  // d/d log s
        const size_t idx = i * static_cast<size_t>(k) + static_cast<size_t>(a);
        adam_mm[idx] = b1 * adam_mm[idx] + (1 - b1) * gm;
        adam_mv[idx] = b2 * adam_mv[idx] + (1 - b2) * gm * gm;
        p.m[i][static_cast<size_t>(a)] -= cfg.learning_rate * (adam_mm[idx] / bc1) / (std::sqrt(adam_mv[idx] / bc2) + eps);
        adam_sm[idx] = b1 * adam_sm[idx] + (1 - b1) * gt;
        adam_sv[idx] = b2 * adam_sv[idx] + (1 - b2) * gt * gt;
        logs[i][static_cast<size_t>(a)] -= cfg.learning_rate * (adam_sm[idx] / bc1) / (std::sqrt(adam_sv[idx] / bc2) + eps);
        logs[i][static_cast<size_t>(a)] = std::min(10.0, std::max(-30.0, logs[i][static_cast<size_t>(a)]));
        p.s[i][static_cast<size_t>(a)] = std::exp(logs[i][static_cast<size_t>(a)]);
      }
    }
    m_step();
  }

  Tensor chol = cholesky_spd(p.sigma, cfg.jitter);
  Tensor inv = spd_inverse_from_chol(chol);
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> x(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) x[static_cast<size_t>(j)] = static_cast<double>(data.samples[i].leaves()[static_cast<size_t>(j)]);
    total += pln_elbo_sample(x, p.m[i], p.s[i], p.mu, chol, inv);
  }
  p.final_elbo = total / static_cast<double>(n);
  return p;
}

inline HierarchicalDataset pln_generate(const PlnBaselineParams& p, const TreeLayout& tree, int n,
                                        std::uint64_t seed) {
  const int k = static_cast<int>(p.mu.dim(0));
  Tensor chol = cholesky_spd(p.sigma);
  Rng rng(seed, 1111);
  HierarchicalDataset ds;
  ds.tree = tree;
  for (int i = 0; i < n; ++i) {
    std::vector<double> eps(static_cast<size_t>(k));
    for (auto& e : eps) e = rng.normal();
    std::vector<std::int64_t> leaves(static_cast<size_t>(k));
    for (int a = 0; a < k; ++a) {
      double z = p.mu.at(a);
      for (int b = 0; b <= a; ++b) z += chol.at(a, b) * eps[static_cast<size_t>(b)];
      leaves[static_cast<size_t>(a)] = rng.poisson(std::exp(std::min(25.0, std::max(-100.0, z))));
    }
    ds.samples.push_back(lift_leaf_counts(tree, leaves));
    ds.sample_ids.push_back("pln" + std::to_string(i));
  }
  return ds;
}

// ---- CLR-Gaussian baseline (sparsity fixed to zero) ----

struct SpiecEasiParams {
  Tensor mean;   // [K] mean of the CLR-transformed compositions
  Tensor cov;    // [K,K]
  std::vector<std::int64_t> totals;  // training totals, resampled at generation
  double pseudocount = 1.0;
};

inline SpiecEasiParams spiec_fit(const HierarchicalDataset& data, double pseudocount = 1.0) {
  const size_t n = data.size();
  if (n < 2) throw DataError("spiec_fit: at least 2 samples required");
  const int k = data.tree.layer_sizes.back();
  SpiecEasiParams p;
  p.pseudocount = pseudocount;
  Tensor rows({static_cast<std::int64_t>(n), k});
  for (size_t i = 0; i < n; ++i) {
    const auto& leaves = data.samples[i].leaves();
    double tot = 0.0;
    std::vector<double> comp(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) {
      comp[static_cast<size_t>(j)] = static_cast<double>(leaves[static_cast<size_t>(j)]) + pseudocount;
      tot += comp[static_cast<size_t>(j)];
    }
    double logmean = 0.0;
    for (int j = 0; j < k; ++j) {
      comp[static_cast<size_t>(j)] = std::log(comp[static_cast<size_t>(j)] / tot);
      logmean += comp[static_cast<size_t>(j)];
    }
    logmean /= static_cast<double>(k);
    for (int j = 0; j < k; ++j) rows.at(static_cast<std::int64_t>(i), j) = comp[static_cast<size_t>(j)] - logmean;
    p.totals.push_back(data.samples[i].total());
  }
  p.mean = Tensor({k});
  for (size_t i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) p.mean.at(j) += rows.at(static_cast<std::int64_t>(i), j);
  for (auto& v : p.mean.v) v /= static_cast<double>(n);
  p.cov = Tensor({k, k});
  for (size_t i = 0; i < n; ++i)
    for (int a = 0; a < k; ++a) {
      const double da = rows.at(static_cast<std::int64_t>(i), a) - p.mean.at(a);
      for (int b = 0; b < k; ++b)
        p.cov.at(a, b) += da * (rows.at(static_cast<std::int64_t>(i), b) - p.mean.at(b));
    }
  for (auto& v : p.cov.v) v /= static_cast<double>(n - 1);
  return p;
}

inline Json pln_to_json(const PlnBaselineParams& p, const TreeLayout& tree) {
  Json j;
  j["format_version"] = 1;
  j["kind"] = "pln";
  j["tree"] = tree_to_json(tree);
  j["mu"] = p.mu.v;
  j["sigma"] = p.sigma.v;
  j["variational_m"] = p.m;
  j["variational_s"] = p.s;
  j["sample_ids"] = p.sample_ids;
  j["final_elbo"] = p.final_elbo;
  return j;
}

inline PlnBaselineParams pln_from_json(const Json& j, TreeLayout* tree_out = nullptr) {
  require_keys(j, {"format_version", "kind", "tree", "mu", "sigma", "variational_m",
                   "variational_s", "sample_ids", "final_elbo"},
               "pln model file");
  TreeLayout tree = parse_tree(j["tree"]);
  if (tree_out) *tree_out = tree;
  PlnBaselineParams p;
  auto mu = j["mu"].get<std::vector<double>>();
  const int k = static_cast<int>(mu.size());
  p.mu = Tensor::vec(mu);
  p.sigma = Tensor::mat(k, k, j["sigma"].get<std::vector<double>>());
  p.m = j["variational_m"].get<std::vector<std::vector<double>>>();
  p.s = j["variational_s"].get<std::vector<std::vector<double>>>();
  p.sample_ids = j["sample_ids"].get<std::vector<std::string>>();
  p.final_elbo = j["final_elbo"].get<double>();
  return p;
}

inline Json spiec_to_json(const SpiecEasiParams& p, const TreeLayout& tree) {
  Json j;
  j["format_version"] = 1;
  j["kind"] = "spiec-easi";
  j["tree"] = tree_to_json(tree);
  j["mean"] = p.mean.v;
  j["cov"] = p.cov.v;
  j["totals"] = p.totals;
  j["pseudocount"] = p.pseudocount;
  return j;
}

inline SpiecEasiParams spiec_from_json(const Json& j, TreeLayout* tree_out = nullptr) {
  require_keys(j, {"format_version", "kind", "tree", "mean", "cov", "totals", "pseudocount"},
               "spiec-easi model file");
  TreeLayout tree = parse_tree(j["tree"]);
  if (tree_out) *tree_out = tree;
  SpiecEasiParams p;
  auto mean = j["mean"].get<std::vector<double>>();
  const int k = static_cast<int>(mean.size());
  p.mean = Tensor::vec(mean);
  p.cov = Tensor::mat(k, k, j["cov"].get<std::vector<double>>());
  p.totals = j["totals"].get<std::vector<std::int64_t>>();
  p.pseudocount = j["pseudocount"].get<double>();
  return p;
}

inline HierarchicalDataset spiec_generate(const SpiecEasiParams& p, const TreeLayout& tree, int n,
                                          std::uint64_t seed) {
  const int k = static_cast<int>(p.mean.dim(0));
  Tensor chol = cholesky_spd(p.cov);
  Rng rng(seed, 1212);
  HierarchicalDataset ds;
  ds.tree = tree;
  for (int i = 0; i < n; ++i) {
    std::vector<double> eps(static_cast<size_t>(k)), g(static_cast<size_t>(k));
    for (auto& e : eps) e = rng.normal();
    double mx = -1e300;
    for (int a = 0; a < k; ++a) {
      double z = p.mean.at(a);
      for (int b = 0; b <= a; ++b) z += chol.at(a, b) * eps[static_cast<size_t>(b)];
      g[static_cast<size_t>(a)] = z;
      mx = std::max(mx, z);
    }
    double s = 0.0;
    for (auto& z : g) {
      z = std::exp(z - mx);
      s += z;
    }
    for (auto& z : g) z /= s;
    const std::int64_t total = p.totals[rng.uniform_int(p.totals.size())];
    ds.samples.push_back(lift_leaf_counts(tree, rng.multinomial(total, g)));
    ds.sample_ids.push_back("se" + std::to_string(i));
  }
  return ds;
}

}  // namespace plntree
