#pragma once

// The evaluation protocol: alpha-diversity distribution distances,
// per-layer multivariate Wasserstein on normalized counts, Bray-Curtis
// permutation tests, reconstruction correlations, and the benchmark driver
// that runs every model through the same protocol and aggregates a report.

#include <atomic>
#include <set>
#include <thread>

#include "plntree/datagen.hpp"
#include "plntree/diversity.hpp"
#include "plntree/features.hpp"
#include "plntree/training.hpp"

namespace plntree {

// Ordered deterministic fan-out: slot i always receives f(i).
template <typename F>
inline void parallel_for(int n, int threads, F f) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (;;) {
          const int i = next.fetch_add(1);
          if (i >= n) break;
          f(i);
        }
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- report containers ----

struct MetricRow {
  std::string model;
  std::string metric;
  int layer = 0;       // 1-based
  int repetition = 0;  // 0-based
  double value = 0.0;
};

struct BenchmarkReport {
  std::vector<MetricRow> rows;

  void add(const std::string& model, const std::string& metric, int layer, int repetition,
           double value) {
    rows.push_back({model, metric, layer, repetition, value});
  }

  // Mean and standard deviation per (model, metric, layer) cell.
  struct Cell {
    double mean = 0.0, sd = 0.0;
    int count = 0;
  };
  std::map<std::string, Cell> aggregate() const {
    std::map<std::string, std::vector<double>> buckets;
    for (const auto& r : rows)
      buckets[r.model + "\t" + r.metric + "\t" + std::to_string(r.layer)].push_back(r.value);
    std::map<std::string, Cell> out;
    for (const auto& [key, vals] : buckets) {
      Cell c;
      c.count = static_cast<int>(vals.size());
      for (double v : vals) c.mean += v;
      c.mean /= static_cast<double>(vals.size());
      if (vals.size() > 1) {
        for (double v : vals) c.sd += (v - c.mean) * (v - c.mean);
        c.sd = std::sqrt(c.sd / static_cast<double>(vals.size() - 1));
      }
      out[key] = c;
    }
    return out;
  }

  Json to_json() const {
    Json cells = Json::array();
    for (const auto& [key, c] : aggregate()) {
      const size_t t1 = key.find('\t');
      const size_t t2 = key.find('\t', t1 + 1);
      cells.push_back(Json{{"model", key.substr(0, t1)},
                           {"metric", key.substr(t1 + 1, t2 - t1 - 1)},
                           {"layer", std::stoi(key.substr(t2 + 1))},
                           {"mean", c.mean},
                           {"sd", c.sd},
                           {"repetitions", c.count}});
    }
    return Json{{"format_version", 1}, {"cells", cells}};
  }

  // Per-metric summary: metric, layer, value, sd (one block per model).
  void write_summary_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << "model,metric,layer,value,sd,repetitions\n";
    for (const auto& [key, c] : aggregate()) {
      std::string k = key;
      for (auto& ch : k)
        if (ch == '\t') ch = ',';
      f << k << "," << format_double(c.mean) << "," << format_double(c.sd) << "," << c.count << "\n";
    }
  }

  // Long format: model, metric, layer, repetition, value.
  void write_long_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << "model,metric,layer,repetition,value\n";
    for (const auto& r : rows)
      f << r.model << "," << r.metric << "," << r.layer << "," << r.repetition << ","
        << format_double(r.value) << "\n";
  }
};

// ---- per-sample diversity values ----

inline std::vector<std::vector<double>> layer_proportions(const HierarchicalCounts& c) {
  std::vector<std::vector<double>> out;
  for (const auto& layer : c.layers) {
    double tot = 0.0;
    std::vector<double> p(layer.size(), 0.0);
    for (size_t k = 0; k < layer.size(); ++k) tot += static_cast<double>(layer[k]);
    if (tot > 0.0)
      for (size_t k = 0; k < layer.size(); ++k) p[k] = static_cast<double>(layer[k]) / tot;
    out.push_back(std::move(p));
  }
  return out;
}

struct AlphaValues {
  // [layer][sample]
  std::vector<std::vector<double>> shannon, simpson;
};

inline AlphaValues alpha_values(const HierarchicalDataset& ds) {
  const size_t L = ds.tree.layer_sizes.size();
  AlphaValues a;
  a.shannon.resize(L);
  a.simpson.resize(L);
  for (const auto& s : ds.samples) {
    auto props = layer_proportions(s);
    for (size_t l = 0; l < L; ++l) {
      double tot = 0.0;
      for (double v : props[l]) tot += v;
      if (tot <= 0.0) continue;  // all-zero sample layer: skip
      a.shannon[l].push_back(shannon(props[l]));
      a.simpson[l].push_back(simpson(props[l]));
    }
  }
  return a;
}

// ---- protocol pieces ----

using GeneratorFn = std::function<HierarchicalDataset(int n, std::uint64_t seed)>;

struct AlphaProtocolConfig {
  int repetitions = 10;
  int samples_per_repetition = 2000;
  std::uint64_t seed = 0;
  int threads = 1;
};

// Distances between the reference alpha-diversity distributions and each
// repetition's generated distributions, every metric and layer.
inline void run_alpha_protocol(BenchmarkReport& report, const std::string& model_name,
                               const HierarchicalDataset& reference, const GeneratorFn& gen,
                               const AlphaProtocolConfig& cfg) {
  AlphaValues ref = alpha_values(reference);
  const int L = reference.tree.depth();
  std::vector<std::vector<MetricRow>> rows(static_cast<size_t>(cfg.repetitions));
  parallel_for(cfg.repetitions, cfg.threads, [&](int rep) {
    HierarchicalDataset g = gen(cfg.samples_per_repetition, cfg.seed + 1000 + static_cast<std::uint64_t>(rep));
    AlphaValues gv = alpha_values(g);
    for (int l = 0; l < L; ++l) {
      struct Pair {
        const char* name;
        const std::vector<double>*a, *b;
      };
      for (const auto& [index_name, rv, gvv] :
           {std::tuple{"shannon", &ref.shannon, &gv.shannon}, std::tuple{"simpson", &ref.simpson, &gv.simpson}}) {
        const auto& a = (*rv)[static_cast<size_t>(l)];
        const auto& b = (*gvv)[static_cast<size_t>(l)];
        rows[static_cast<size_t>(rep)].push_back(
            {model_name, std::string(index_name) + "_wasserstein", l + 1, rep, wasserstein_1d(a, b)});
        rows[static_cast<size_t>(rep)].push_back(
            {model_name, std::string(index_name) + "_ks", l + 1, rep, ks_statistic(a, b)});
        rows[static_cast<size_t>(rep)].push_back(
            {model_name, std::string(index_name) + "_tv", l + 1, rep, tv_hist(a, b)});
        rows[static_cast<size_t>(rep)].push_back(
            {model_name, std::string(index_name) + "_kl", l + 1, rep, kl_hist(a, b)});
      }
    }
  });
  for (auto& rr : rows)
    for (auto& r : rr) report.rows.push_back(std::move(r));
}

struct WassersteinProtocolConfig {
  int repetitions = 10;
  int samples_per_repetition = 2000;
  int subsample = 200;  // exact-solver budget per side
  std::uint64_t seed = 0;
  int threads = 1;
};

inline std::vector<std::vector<double>> subsample_proportions(const HierarchicalDataset& ds,
                                                              int layer, int m, Rng& rng) {
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (static_cast<int>(ds.size()) > m) {
    for (int i = 0; i < m; ++i)
      std::swap(idx[static_cast<size_t>(i)],
                idx[static_cast<size_t>(i) + rng.uniform_int(idx.size() - static_cast<size_t>(i))]);
    idx.resize(static_cast<size_t>(m));
  }
  std::vector<std::vector<double>> out;
  for (int i : idx) out.push_back(layer_proportions(ds.samples[static_cast<size_t>(i)])[static_cast<size_t>(layer)]);
  return out;
}

inline void run_wasserstein_protocol(BenchmarkReport& report, const std::string& model_name,
                                     const HierarchicalDataset& reference, const GeneratorFn& gen,
                                     const WassersteinProtocolConfig& cfg) {
  const int L = reference.tree.depth();
  std::vector<std::vector<MetricRow>> rows(static_cast<size_t>(cfg.repetitions));
  parallel_for(cfg.repetitions, cfg.threads, [&](int rep) {
    HierarchicalDataset g = gen(cfg.samples_per_repetition, cfg.seed + 2000 + static_cast<std::uint64_t>(rep));
    for (int l = 0; l < L; ++l) {
      Rng rng(cfg.seed + 3000 + static_cast<std::uint64_t>(rep), static_cast<std::uint64_t>(l));
      auto a = subsample_proportions(reference, l, cfg.subsample, rng);
      auto b = subsample_proportions(g, l, cfg.subsample, rng);
      rows[static_cast<size_t>(rep)].push_back({model_name, "wasserstein", l + 1, rep, emd_multivariate(a, b)});
    }
  });
  for (auto& rr : rows)
    for (auto& r : rr) report.rows.push_back(std::move(r));
}

struct BetaProtocolConfig {
  int repetitions = 50;   // m
  int group_size = 100;   // n per group
  int permutations = 999;
  std::uint64_t seed = 0;
  int threads = 1;
};

inline void run_beta_protocol(BenchmarkReport& report, const std::string& model_name,
                              const HierarchicalDataset& reference, const GeneratorFn& gen,
                              const BetaProtocolConfig& cfg) {
  const int L = reference.tree.depth();
  std::vector<std::vector<MetricRow>> rows(static_cast<size_t>(cfg.repetitions));
  parallel_for(cfg.repetitions, cfg.threads, [&](int rep) {
    Rng rng(cfg.seed + 4000 + static_cast<std::uint64_t>(rep), 3);
    HierarchicalDataset g = gen(cfg.group_size, cfg.seed + 5000 + static_cast<std::uint64_t>(rep));
    // Subsample the reference group.
    std::vector<int> idx(reference.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < cfg.group_size && i < static_cast<int>(idx.size()); ++i)
      std::swap(idx[static_cast<size_t>(i)],
                idx[static_cast<size_t>(i) + rng.uniform_int(idx.size() - static_cast<size_t>(i))]);
    idx.resize(static_cast<size_t>(std::min<int>(cfg.group_size, static_cast<int>(reference.size()))));
    for (int l = 0; l < L; ++l) {
      std::vector<std::vector<std::int64_t>> ga, gb;
      for (int i : idx) ga.push_back(reference.samples[static_cast<size_t>(i)].layers[static_cast<size_t>(l)]);
      for (const auto& s : g.samples) gb.push_back(s.layers[static_cast<size_t>(l)]);
      DissimilarityMatrix m = bray_curtis_matrix(ga, gb);
      rows[static_cast<size_t>(rep)].push_back(
          {model_name, "permanova_pvalue", l + 1, rep,
           permanova(m, cfg.permutations, cfg.seed + 6000 + static_cast<std::uint64_t>(rep * L + l))});
      rows[static_cast<size_t>(rep)].push_back(
          {model_name, "permdisp_pvalue", l + 1, rep,
           permdisp(m, cfg.permutations, cfg.seed + 7000 + static_cast<std::uint64_t>(rep * L + l))});
    }
  });
  for (auto& rr : rows)
    for (auto& r : rr) report.rows.push_back(std::move(r));
}

// ---- reconstruction ----

// Deterministic decode through the emission means: the first layer is the
// exponential of the (offset-shifted) posterior-mean log-rates, deeper layers
// split each parent by the softmax of the posterior-mean latents.
inline std::vector<std::vector<double>> decode_mean(const PlnTreeModel& model,
                                                    const LatentState& state) {
  const int L = model.depth();
  std::vector<std::vector<double>> out(static_cast<size_t>(L));
  const int k1 = model.tree.layer_sizes[0];
  out[0].resize(static_cast<size_t>(k1));
  const double off = state.offset.value_or(0.0);
  for (int k = 0; k < k1; ++k) {
    const double e = std::min(model.arch.mean_hi,
                              std::max(model.arch.mean_lo, state.z[0][static_cast<size_t>(k)] + off));
    out[0][static_cast<size_t>(k)] = std::exp(e);
  }
  for (int l = 0; l + 1 < L; ++l) {
    out[static_cast<size_t>(l + 1)].assign(
        static_cast<size_t>(model.tree.layer_sizes[static_cast<size_t>(l + 1)]), 0.0);
    for (int k = 0; k < model.tree.layer_sizes[static_cast<size_t>(l)]; ++k) {
      const auto& group = model.tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)];
      double mx = -1e300;
      for (int j : group) mx = std::max(mx, state.z[static_cast<size_t>(l + 1)][static_cast<size_t>(j)]);
      double s = 0.0;
      for (int j : group) s += std::exp(state.z[static_cast<size_t>(l + 1)][static_cast<size_t>(j)] - mx);
      for (int j : group)
        out[static_cast<size_t>(l + 1)][static_cast<size_t>(j)] =
            std::exp(state.z[static_cast<size_t>(l + 1)][static_cast<size_t>(j)] - mx) / s *
            out[static_cast<size_t>(l)][static_cast<size_t>(k)];
    }
  }
  return out;
}

inline ReconstructionCorrelation reconstruct_and_correlate(const FittedModel& f,
                                                           const HierarchicalDataset& data,
                                                           int n_draws, std::uint64_t seed) {
  auto states = encode_dataset(f, data, n_draws, seed);
  std::vector<std::vector<std::vector<double>>> recon;
  recon.reserve(states.size());
  for (const auto& st : states) recon.push_back(decode_mean(f.model, st));
  return reconstruction_correlation(data.samples, recon);
}

}  // namespace plntree
