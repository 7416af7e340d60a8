#pragma once

// ELBO estimation for the hierarchical model (single-sample reparameterized
// trajectories, exact sub-expectations where closed forms exist), the
// explicit first-layer and covariate-regression updates, the training loop,
// and an importance-sampling likelihood estimator used as a test oracle.

#include <chrono>

#include "plntree/variational.hpp"

namespace plntree {

// ---- ELBO ----

struct ElboGraph {
  Var value;             // scalar, mean over the batch
  Var per_sample;        // [B]
  PosteriorDraw draw;    // the trajectory used
};

namespace detail {

constexpr double kLog2Pi = 1.8378770664093454836;

struct NamedTerm {
  const char* name;
  Var v;
};

}  // namespace detail

// One reparameterized-trajectory estimate of the evidence lower bound for a
// batch. Layer indexing is 0-based; layer 0 carries the Poisson emission and
// the exponential moment term, deeper layers carry the multinomial terms,
// the leaf layer carries the count factorial constants.
inline ElboGraph elbo_graph(const PlnTreeModel& model, const VariationalFamily& q, Tape& t,
                            const Bound& p, const BatchData& batch, const NoisePack& noise) {
  const int L = model.depth();
  const std::int64_t bs = batch.size;
  PosteriorDraw draw = sample_posterior_graph(model, q, t, p, batch, noise);

  std::vector<detail::NamedTerm> terms;
  Var acc = t.constant(Tensor({bs}));

  for (int l = 0; l < L; ++l) {
    const int d = model.lidx.dim(l);
    if (d > 0) {
      Var m = draw.m[static_cast<size_t>(l)];
      Var s = draw.s[static_cast<size_t>(l)];
      Var quad, trace_term, neg_logdet;
      if (l == 0) {
        Var g = sigma1_chol_graph(model, t, p);  // [K1,K1]
        Var mu = first_layer_mean_graph(model, t, p, batch.design ? &*batch.design : nullptr, bs);
        Var diff = t.sub(mu, m);                            // [B,d]
        Var y = t.tri_solve(g, t.transpose_last2(diff));    // [d,B]: solve G Y = diff^T
        quad = t.sum_axis(t.mul(y, y), 0);                  // [B]
        Var ginv = t.tri_solve(g, t.constant(Tensor::eye(d)));
        Var diag_inv = t.sum_axis(t.mul(ginv, ginv), 0);    // [d] diag of Sigma1^{-1}
        trace_term = t.sum_axis(t.mul(s, diag_inv), 1);     // [B]
        Var logdet = t.scale(t.sum(t.log(t.diag_part(g))), 2.0);
        Tensor ones({bs}, 1.0);
        neg_logdet = t.mul(t.constant(ones), logdet);       // broadcast scalar to [B]
      } else {
        Var z_prev = draw.z[static_cast<size_t>(l - 1)];
        TransitionOut tr = transition_graph(model, l, t, p, z_prev,
                                            batch.design ? &*batch.design : nullptr);
        Var diff = t.sub(tr.mean, m);
        Var y = t.tri_solve(tr.chol, t.reshape(diff, {bs, d, 1}));
        quad = t.sum_axis(t.reshape(t.mul(y, y), {bs, d}), 1);
        Tensor eyeb({bs, d, d});
        for (std::int64_t b = 0; b < bs; ++b)
          for (int i = 0; i < d; ++i) eyeb.at(b, i, i) = 1.0;
        Var cinv = t.tri_solve(tr.chol, t.constant(eyeb));
        Var diag_inv = t.sum_axis(t.mul(cinv, cinv), 1);    // [B,d]
        trace_term = t.sum_axis(t.mul(s, diag_inv), 1);
        neg_logdet = tr.logdet;
      }
      Var log_s = t.sum_axis(t.log(s), 1);
      Var gauss = t.scale(t.add(t.sub(t.neg(neg_logdet), t.add(quad, trace_term)), log_s), 0.5);
      // +d/2: the KL of two Gaussians carries -d/2, so its negation enters
      // the bound positively (with q == p the whole chain term vanishes).
      gauss = t.add(gauss, t.constant(0.5 * static_cast<double>(d)));
      terms.push_back({"gaussian-chain", gauss});
      acc = t.add(acc, gauss);
    }

    if (l == 0) {
      // Poisson linear term and the exponential-moment term, with the offset
      // draw shifting both when enabled.
      Var m = draw.m[0];
      Var s = draw.s[0];
      Var mshift = m;
      if (model.arch.offset_enabled) {
        Tensor onesk({1, model.tree.layer_sizes[0]}, 1.0);
        Var ob = t.matmul(t.reshape(draw.offset, {bs, 1}), t.constant(onesk));
        mshift = t.add(m, ob);
      }
      Var linear = t.sum_axis(t.mul(t.constant(batch.counts[0]), mshift), 1);
      Var moment = t.sum_axis(t.exp(t.add(t.scale(s, 0.5), mshift)), 1);
      Var pois = t.sub(linear, moment);
      terms.push_back({"poisson", pois});
      acc = t.add(acc, pois);
    } else {
      // Multinomial linear part over active coordinates.
      const int d = model.lidx.dim(l);
      if (d > 0) {
        std::vector<std::int64_t> act;
        for (int a : model.lidx.active[static_cast<size_t>(l)]) act.push_back(a);
        Var xs = t.gather_cols(t.constant(batch.counts[static_cast<size_t>(l)]), act);
        Var linear = t.sum_axis(t.mul(xs, draw.m[static_cast<size_t>(l)]), 1);
        terms.push_back({"multinomial-linear", linear});
        acc = t.add(acc, linear);
      }
      // Log-sum-exp normalizer per sibling group, weighted by parent counts.
      Var lse_total = t.constant(Tensor({bs}));
      const auto& groups = model.lidx.groups[static_cast<size_t>(l)];
      for (size_t g = 0; g < groups.size(); ++g) {
        std::vector<std::int64_t> pos(groups[g].begin(), groups[g].end());
        Var zg = t.gather_cols(draw.z[static_cast<size_t>(l)], pos);
        Var lse = t.logsumexp(zg);  // [B]
        const int parent = model.lidx.group_parent[static_cast<size_t>(l)][g];
        std::vector<std::int64_t> pidx{parent};
        Var xp = t.reshape(t.gather_cols(t.constant(batch.counts[static_cast<size_t>(l - 1)]), pidx), {bs});
        lse_total = t.add(lse_total, t.mul(xp, lse));
      }
      terms.push_back({"multinomial-lse", lse_total});
      acc = t.sub(acc, lse_total);
    }

    if (l == L - 1) {
      // -sum_k log X_k! enters only at the deepest layer.
      Tensor lf({bs});
      for (std::int64_t b = 0; b < bs; ++b) {
        double s = 0.0;
        for (std::int64_t k = 0; k < batch.counts[static_cast<size_t>(l)].dim(1); ++k)
          s += std::lgamma(batch.counts[static_cast<size_t>(l)].at(b, k) + 1.0);
        lf.at(b) = -s;
      }
      acc = t.add(acc, t.constant(lf));
    }
  }

  if (model.arch.offset_enabled) {
    Var logp_o = offset_log_prior_graph(model, t, p, draw.offset);
    Var entropy = t.scale(t.log(draw.off_s), 0.5);
    Var off_terms = t.add(t.add(t.scale(logp_o, 2.0), entropy),
                          t.constant(0.5 * (1.0 + detail::kLog2Pi)));
    terms.push_back({"offset", off_terms});
    acc = t.add(acc, off_terms);
  }

  for (const auto& nt : terms) {
    if (!t.val(nt.v).all_finite())
      throw NumericalError(std::string("elbo: non-finite ") + nt.name + " term");
  }
  ElboGraph out;
  out.per_sample = acc;
  out.value = t.mean(acc);
  out.draw = draw;
  return out;
}

// Plain scalar estimate averaged over n_mc trajectories.
inline double elbo_estimate(const FittedModel& f, const std::vector<const HierarchicalCounts*>& samples,
                            int n_mc, std::uint64_t seed,
                            const std::vector<const std::vector<double>*>* covariates = nullptr) {
  BatchData batch = make_batch(f.model, samples, covariates);
  Rng rng(seed, 505);
  double total = 0.0;
  for (int i = 0; i < n_mc; ++i) {
    NoisePack noise = make_noise(f.model, batch.size, rng);
    Tape t;
    Bound p;
    p.tape = &t;
    for (const auto& e : f.store.entries) p.vars.push_back(t.leaf(e.value, false));
    total += t.val(elbo_graph(f.model, f.q, t, p, batch, noise).value).v[0];
  }
  return total / static_cast<double>(n_mc);
}

// ---- explicit first-layer update ----

struct FirstLayerStats {
  std::vector<std::vector<double>> m_rows;   // per accumulated draw: bounded mean
  std::vector<std::vector<double>> s_rows;   // matching diagonal variances
  std::vector<std::vector<double>> design_rows;  // standardized covariates + intercept

  void accumulate(const PlnTreeModel& model, Tape& t, const PosteriorDraw& draw,
                  const BatchData& batch) {
    const Tensor& m = t.val(draw.m[0]);
    const Tensor& s = t.val(draw.s[0]);
    for (std::int64_t i = 0; i < m.dim(0); ++i) {
      std::vector<double> mr(static_cast<size_t>(m.dim(1))), sr(static_cast<size_t>(m.dim(1)));
      for (std::int64_t k = 0; k < m.dim(1); ++k) {
        mr[static_cast<size_t>(k)] = m.at(i, k);
        sr[static_cast<size_t>(k)] = s.at(i, k);
      }
      m_rows.push_back(std::move(mr));
      s_rows.push_back(std::move(sr));
      if (model.arch.covariates_enabled) {
        std::vector<double> dr(static_cast<size_t>(batch.design->dim(1)));
        for (std::int64_t c = 0; c < batch.design->dim(1); ++c) dr[static_cast<size_t>(c)] = batch.design->at(i, c);
        design_rows.push_back(std::move(dr));
      }
    }
  }
  void clear() {
    m_rows.clear();
    s_rows.clear();
    design_rows.clear();
  }
};

struct OlsResult {
  Tensor coefficients;
  bool used_pseudo_inverse = false;
};

// B = (C^T C)^{-1} C^T M, with an eigenvalue pseudo-inverse fallback when the
// normal equations are numerically singular.
inline OlsResult ols_covariate_update(const Tensor& c, const Tensor& m) {
  const std::int64_t n = c.dim(0), q = c.dim(1), k = m.dim(1);
  if (m.dim(0) != n) throw DataError("ols: row mismatch");
  Tensor ctc({q, q}), ctm({q, k});
  for (std::int64_t a = 0; a < q; ++a) {
    for (std::int64_t b = 0; b < q; ++b) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) s += c.at(i, a) * c.at(i, b);
      ctc.at(a, b) = s;
    }
    for (std::int64_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) s += c.at(i, a) * m.at(i, j);
      ctm.at(a, j) = s;
    }
  }
  OlsResult out;
  out.coefficients = Tensor({q, k});
  Tensor l = ctc;
  if (cholesky_inplace(l.v.data(), q) >= 0) {
    out.used_pseudo_inverse = true;
    Tensor vecs;
    auto evals = symmetric_eigen(ctc, &vecs);
    double emax = 0.0;
    for (double e : evals) emax = std::max(emax, std::fabs(e));
    const double floor = std::max(1e-12, 1e-12 * emax);
    for (std::int64_t j = 0; j < k; ++j) {
      for (std::int64_t a = 0; a < q; ++a) {
        double s = 0.0;
        for (std::int64_t e = 0; e < q; ++e) {
          if (evals[static_cast<size_t>(e)] <= floor) continue;
          double proj = 0.0;
          for (std::int64_t b = 0; b < q; ++b) proj += vecs.at(b, e) * ctm.at(b, j);
          s += vecs.at(a, e) * proj / evals[static_cast<size_t>(e)];
        }
        out.coefficients.at(a, j) = s;
      }
    }
    return out;
  }
  for (std::int64_t j = 0; j < k; ++j) {
    std::vector<double> col(static_cast<size_t>(q));
    for (std::int64_t a = 0; a < q; ++a) col[static_cast<size_t>(a)] = ctm.at(a, j);
    trisolve_lower(l.v.data(), col.data(), q);
    trisolve_lower_t(l.v.data(), col.data(), q);
    for (std::int64_t a = 0; a < q; ++a) out.coefficients.at(a, j) = col[static_cast<size_t>(a)];
  }
  return out;
}

// Applies the explicit optimum for (mu1, Sigma1) -- and the regression
// coefficients when covariates are enabled -- from accumulated posterior
// statistics.
inline void closed_form_first_layer(PlnTreeModel& model, ParamStore& store,
                                    const FirstLayerStats& stats) {
  const size_t n = stats.m_rows.size();
  if (n == 0) throw DataError("closed_form_first_layer: no posterior statistics accumulated");
  const int k1 = model.tree.layer_sizes[0];

  std::vector<std::vector<double>> mean_rows;  // per draw: the fitted mean
  if (model.arch.covariates_enabled) {
    Tensor c({static_cast<std::int64_t>(n), static_cast<std::int64_t>(stats.design_rows[0].size())});
    Tensor m({static_cast<std::int64_t>(n), k1});
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < stats.design_rows[i].size(); ++j)
        c.at(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) = stats.design_rows[i][j];
      for (int j = 0; j < k1; ++j) m.at(static_cast<std::int64_t>(i), j) = stats.m_rows[i][static_cast<size_t>(j)];
    }
    OlsResult ols = ols_covariate_update(c, m);
    store.value(model.covB) = ols.coefficients;
    mean_rows.resize(n, std::vector<double>(static_cast<size_t>(k1)));
    for (size_t i = 0; i < n; ++i)
      for (int j = 0; j < k1; ++j) {
        double s = 0.0;
        for (std::int64_t a = 0; a < c.dim(1); ++a) s += c.at(static_cast<std::int64_t>(i), a) * ols.coefficients.at(a, j);
        mean_rows[i][static_cast<size_t>(j)] = s;
      }
  } else {
    std::vector<double> mu(static_cast<size_t>(k1), 0.0);
    for (const auto& row : stats.m_rows)
      for (int j = 0; j < k1; ++j) mu[static_cast<size_t>(j)] += row[static_cast<size_t>(j)];
    for (auto& v : mu) v /= static_cast<double>(n);
    Tensor mu_t({k1});
    for (int j = 0; j < k1; ++j) mu_t.at(j) = mu[static_cast<size_t>(j)];
    store.value(model.mu1) = mu_t;
    mean_rows.assign(n, mu);
  }

  Tensor sigma({k1, k1});
  for (size_t i = 0; i < n; ++i) {
    for (int a = 0; a < k1; ++a) {
      const double da = mean_rows[i][static_cast<size_t>(a)] - stats.m_rows[i][static_cast<size_t>(a)];
      for (int b = 0; b < k1; ++b) {
        const double db = mean_rows[i][static_cast<size_t>(b)] - stats.m_rows[i][static_cast<size_t>(b)];
        sigma.at(a, b) += da * db;
      }
      sigma.at(a, a) += stats.s_rows[i][static_cast<size_t>(a)];
    }
  }
  for (auto& v : sigma.v) v /= static_cast<double>(n);
  // Jitter enters only through the escalation path if the factorization
  // fails; an unconditional bump would move the update off its optimum.
  Tensor l = sigma;
  if (cholesky_inplace(l.v.data(), k1) >= 0) {
    set_sigma1(model, store, sigma);
    return;
  }
  Tensor raw({k1, k1});
  for (int i = 0; i < k1; ++i)
    for (int j = 0; j <= i; ++j)
      raw.at(i, j) = (i == j) ? (l.at(i, i) > 30.0 ? l.at(i, i) : std::log(std::expm1(l.at(i, i))))
                              : l.at(i, j);
  store.value(model.sigma1_raw) = raw;
}

// ---- training loop ----

struct TrainConfig {
  int epochs = 200;
  int batch_size = 512;
  double learning_rate = 1e-3;
  int n_mc_samples = 1;
  std::uint64_t seed = 0;
  bool closed_form = true;
  int early_stopping_patience = 25;
  bool verbose = false;
};

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"n_mc_samples", c.n_mc_samples},
              {"seed", c.seed},
              {"closed_form", c.closed_form},
              {"early_stopping_patience", c.early_stopping_patience}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  require_keys(j, {"epochs", "batch_size", "learning_rate", "n_mc_samples", "seed", "closed_form",
                   "early_stopping_patience"},
               "training");
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("n_mc_samples")) c.n_mc_samples = j["n_mc_samples"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("closed_form")) c.closed_form = j["closed_form"].get<bool>();
  if (j.contains("early_stopping_patience"))
    c.early_stopping_patience = j["early_stopping_patience"].get<int>();
  if (c.epochs <= 0 || c.batch_size <= 0 || c.learning_rate <= 0.0 || c.n_mc_samples <= 0)
    throw ConfigError("training: epochs, batch_size, learning_rate, n_mc_samples must be positive");
  return c;
}

struct TrainReport {
  std::vector<double> elbo_trace;
  std::vector<double> wall_ms;
  std::vector<double> epoch_elbo;
  double final_elbo = 0.0;
  std::string checksum;
  bool converged = false;
  bool aborted = false;
  int epochs_run = 0;
};

inline std::string params_checksum(const ParamStore& store) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& e : store.entries) {
    mix(e.name.data(), e.name.size());
    mix(e.value.v.data(), e.value.v.size() * sizeof(double));
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void write_trace_csv(const std::string& path, const TrainReport& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << "iteration,elbo,wall_ms\n";
  for (size_t i = 0; i < r.elbo_trace.size(); ++i)
    f << i << "," << format_double(r.elbo_trace[i]) << "," << format_double(r.wall_ms[i]) << "\n";
}

inline TrainReport train(FittedModel& f, const HierarchicalDataset& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw DataError("train: empty dataset");
  for (const auto& s : data.samples) validate_counts(data.tree, s.layers);
  if (f.model.arch.covariates_enabled && !data.has_covariates())
    throw DataError("train: model expects covariates");

  AdamState adam;
  adam.cfg.lr = cfg.learning_rate;
  adam.init(f.store);
  std::vector<char> trainable(static_cast<size_t>(f.store.size()), 1);
  if (cfg.closed_form) {
    for (int i = 0; i < f.store.size(); ++i) {
      const std::string& nm = f.store.entries[static_cast<size_t>(i)].name;
      if (nm == "prior.mu1" || nm == "prior.sigma1_raw" || nm == "prior.B")
        trainable[static_cast<size_t>(i)] = 0;
    }
  }

  Rng shuffle_rng(cfg.seed, 606);
  Rng noise_rng(cfg.seed, 707);
  const int n = static_cast<int>(data.size());
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  int consecutive_bad = 0;
  double best_avg = -1e300;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)))]);

    FirstLayerStats stats;
    double epoch_elbo = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int stop = std::min(n, start + cfg.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + stop);
      BatchData batch = make_batch(f.model, data, idx);

      const auto t0 = std::chrono::steady_clock::now();
      double batch_elbo = 0.0;
      std::vector<Tensor> grads;
      bool finite = true;
      try {
        Tape t;
        Bound p = bind_params(t, f.store);
        Var total;
        for (int mc = 0; mc < cfg.n_mc_samples; ++mc) {
          NoisePack noise = make_noise(f.model, batch.size, noise_rng);
          ElboGraph g = elbo_graph(f.model, f.q, t, p, batch, noise);
          total = mc == 0 ? g.value : t.add(total, g.value);
          if (cfg.closed_form) stats.accumulate(f.model, t, g.draw, batch);
        }
        Var objective = t.scale(total, -1.0 / static_cast<double>(cfg.n_mc_samples));
        batch_elbo = -t.val(objective).v[0];
        t.backward(objective);
        grads.reserve(p.vars.size());
        for (Var v : p.vars) grads.push_back(t.grad(v));
      } catch (const NumericalError&) {
        finite = false;
      }
      if (!finite || !std::isfinite(batch_elbo)) {
        if (++consecutive_bad >= 2) {
          report.aborted = true;
          report.epochs_run = epoch;
          report.final_elbo = report.elbo_trace.empty() ? -1e300 : report.elbo_trace.back();
          report.checksum = params_checksum(f.store);
          return report;
        }
        continue;
      }
      consecutive_bad = 0;
      if (!adam.update(f.store, grads, &trainable) && cfg.verbose)
        std::fprintf(stderr, "adam: step rejected (non-finite gradient)\n");
      const auto t1 = std::chrono::steady_clock::now();
      report.elbo_trace.push_back(batch_elbo);
      report.wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      epoch_elbo += batch_elbo * static_cast<double>(stop - start);
      ++batches;
    }
    if (cfg.closed_form && !stats.m_rows.empty()) closed_form_first_layer(f.model, f.store, stats);
    epoch_elbo /= static_cast<double>(n);
    report.epoch_elbo.push_back(epoch_elbo);
    report.epochs_run = epoch + 1;
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d elbo %.6f\n", epoch, epoch_elbo);

    // Early stopping on the 10-epoch moving average.
    if (static_cast<int>(report.epoch_elbo.size()) >= 10) {
      double avg = 0.0;
      for (size_t i = report.epoch_elbo.size() - 10; i < report.epoch_elbo.size(); ++i)
        avg += report.epoch_elbo[i];
      avg /= 10.0;
      if (avg > best_avg + 1e-9 * std::fabs(best_avg)) {
        best_avg = avg;
        since_best = 0;
      } else if (++since_best >= cfg.early_stopping_patience) {
        report.converged = true;
        break;
      }
    }
  }
  report.final_elbo = report.epoch_elbo.empty() ? -1e300 : report.epoch_elbo.back();
  report.checksum = params_checksum(f.store);
  return report;
}

// ---- importance sampling oracle ----

struct LogZEstimate {
  double log_z = 0.0;
  double se = 0.0;
  double ess = 0.0;
  bool low_ess = false;
};

inline LogZEstimate importance_logZ(const FittedModel& f, const HierarchicalCounts& counts,
                                    int n_particles, std::uint64_t seed,
                                    const std::vector<double>* covariate_row = nullptr) {
  int total_dim = 0;
  for (int l = 0; l < f.model.depth(); ++l) total_dim += f.model.lidx.dim(l);
  if (total_dim > 16)
    throw DataError("importance_logZ: guarded to small problems (total latent dim <= 16)");

  PosteriorSamples ps = sample_posterior(f, counts, n_particles, seed, covariate_row);
  auto joints = joint_log_density_batch(f.model, f.store, counts, ps.draws, covariate_row);
  std::vector<double> w(static_cast<size_t>(n_particles));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_particles; ++i) {
    w[static_cast<size_t>(i)] = joints[static_cast<size_t>(i)].log_density - ps.log_q[static_cast<size_t>(i)];
    mx = std::max(mx, w[static_cast<size_t>(i)]);
  }
  double sum = 0.0, sum2 = 0.0;
  for (double& x : w) {
    x = std::exp(x - mx);
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n_particles;
  double var = 0.0;
  for (double x : w) var += (x - mean) * (x - mean);
  var /= std::max(1, n_particles - 1);
  LogZEstimate out;
  out.log_z = mx + std::log(mean);
  out.se = std::sqrt(var / n_particles) / mean;
  out.ess = sum * sum / std::max(sum2, 1e-300);
  out.low_ess = out.ess < 10.0;
  return out;
}

}  // namespace plntree
