#pragma once

// Command-line surface: simulate, fit, generate, encode, evaluate,
// benchmark. One JSON config drives each run; every run writes a resolved
// config snapshot next to its artifacts, errors leave machine-readable JSON
// on stderr, and exit codes distinguish config (2), data (3) and numerical
// (4) failures.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "plntree/benchmark.hpp"

namespace plntree::cli {

namespace fs = std::filesystem;

struct Ctx {
  Json config;
  fs::path config_dir;
  fs::path out;
  std::uint64_t seed = 0;
  int threads = 1;
};

inline fs::path resolve_path(const Ctx& ctx, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : ctx.config_dir / path;
}

// Resolves a path-valued key in place (for the config snapshot) and returns it.
inline std::string take_path(Ctx& ctx, Json& node, const std::string& key) {
  const std::string resolved = resolve_path(ctx, node.at(key).get<std::string>()).string();
  node[key] = resolved;
  return resolved;
}

inline void write_snapshot(const Ctx& ctx) {
  Json snap = ctx.config;
  snap["seed"] = ctx.seed;
  snap["threads"] = ctx.threads;
  write_json_file((ctx.out / "config.resolved.json").string(), snap);
}

// ---- data loading ----

inline HierarchicalDataset load_data_section(Ctx& ctx, Json& section, const TreeLayout& tree) {
  require_keys(section, {"counts", "leaf_counts", "covariates"}, "data");
  const bool has_counts = section.contains("counts");
  const bool has_leaf = section.contains("leaf_counts");
  if (has_counts == has_leaf)
    throw ConfigError("data: exactly one of counts / leaf_counts is required");
  HierarchicalDataset ds = has_counts ? load_counts_csv(take_path(ctx, section, "counts"), tree)
                                      : load_leaf_csv(take_path(ctx, section, "leaf_counts"), tree);
  if (section.contains("covariates"))
    load_covariates_csv(take_path(ctx, section, "covariates"), ds);
  return ds;
}

// ---- models of any kind ----

struct AnyModel {
  std::string kind;
  std::optional<FittedModel> tree_model;  // plntree / plntree-mf
  std::optional<PlnBaselineParams> pln;
  std::optional<SpiecEasiParams> spiec;
  TreeLayout tree;

  GeneratorFn generator(std::uint64_t base_seed) const {
    if (tree_model) {
      const FittedModel* f = &*tree_model;
      return [f, base_seed](int n, std::uint64_t seed) {
        return sample_dataset(f->model, f->store, n, base_seed ^ seed);
      };
    }
    if (pln) {
      const PlnBaselineParams* p = &*pln;
      const TreeLayout* t = &tree;
      return [p, t, base_seed](int n, std::uint64_t seed) {
        return pln_generate(*p, *t, n, base_seed ^ seed);
      };
    }
    const SpiecEasiParams* p = &*spiec;
    const TreeLayout* t = &tree;
    return [p, t, base_seed](int n, std::uint64_t seed) {
      return spiec_generate(*p, *t, n, base_seed ^ seed);
    };
  }
};

inline AnyModel load_any_model(const std::string& path) {
  Json j = read_json_file(path);
  if (!j.contains("kind")) throw DataError(path + ": model file lacks a kind");
  AnyModel m;
  m.kind = j["kind"].get<std::string>();
  if (m.kind == "plntree" || m.kind == "plntree-mf") {
    m.tree_model = model_from_json(j);
    m.tree = m.tree_model->model.tree;
  } else if (m.kind == "pln") {
    m.pln = pln_from_json(j, &m.tree);
  } else if (m.kind == "spiec-easi") {
    m.spiec = spiec_from_json(j, &m.tree);
  } else {
    throw DataError(path + ": unknown model kind \"" + m.kind + "\"");
  }
  return m;
}

// ---- subcommands ----

inline int cmd_simulate(Ctx& ctx) {
  Json& s = ctx.config.at("simulate");
  require_keys(s, {"generator", "n", "tree", "model_file", "model", "markov_dirichlet", "output"},
               "simulate");
  const std::string generator = s.at("generator").get<std::string>();
  const int n = s.at("n").get<int>();
  if (n <= 0) throw ConfigError("simulate.n must be positive");
  const std::string output = s.contains("output") ? s["output"].get<std::string>() : "dataset.csv";

  HierarchicalDataset ds;
  if (generator == "markov-dirichlet") {
    TreeLayout tree = load_tree(take_path(ctx, s, "tree"));
    MarkovDirichletConfig cfg = markov_dirichlet_config_from_json(
        s.contains("markov_dirichlet") ? s["markov_dirichlet"] : Json::object(), tree);
    ds = markov_dirichlet_sample(cfg, n, ctx.seed);
    s["markov_dirichlet"] = markov_dirichlet_config_to_json(cfg);
  } else if (generator == "plntree") {
    if (s.contains("model_file")) {
      AnyModel m = load_any_model(take_path(ctx, s, "model_file"));
      if (!m.tree_model) throw ConfigError("simulate: model_file must hold a plntree model");
      ds = sample_dataset(m.tree_model->model, m.tree_model->store, n, ctx.seed);
    } else if (s.contains("model")) {
      Json& mspec = s["model"];
      require_keys(mspec, {"arch", "param_seed", "mu1", "sigma1_diag"}, "simulate.model");
      TreeLayout tree = load_tree(take_path(ctx, s, "tree"));
      ArchConfig arch = arch_from_json(mspec.contains("arch") ? mspec["arch"] : Json::object());
      const std::uint64_t pseed = mspec.contains("param_seed") ? mspec["param_seed"].get<std::uint64_t>() : 1;
      FittedModel f = make_fitted(tree, arch, pseed);
      if (mspec.contains("mu1")) {
        auto mu = mspec["mu1"].get<std::vector<double>>();
        if (static_cast<int>(mu.size()) != tree.layer_sizes[0])
          throw ConfigError("simulate.model.mu1: length must be K_1");
        f.store.value(f.model.mu1) = Tensor::vec(mu);
      }
      if (mspec.contains("sigma1_diag")) {
        auto d = mspec["sigma1_diag"].get<std::vector<double>>();
        if (static_cast<int>(d.size()) != tree.layer_sizes[0])
          throw ConfigError("simulate.model.sigma1_diag: length must be K_1");
        Tensor sig({tree.layer_sizes[0], tree.layer_sizes[0]});
        for (int i = 0; i < tree.layer_sizes[0]; ++i) sig.at(i, i) = d[static_cast<size_t>(i)];
        set_sigma1(f.model, f.store, sig);
      }
      ds = sample_dataset(f.model, f.store, n, ctx.seed);
      save_model((ctx.out / "generating_model.json").string(), f);
    } else {
      throw ConfigError("simulate: plntree generator needs model_file or model");
    }
  } else {
    throw ConfigError("simulate.generator: expected plntree|markov-dirichlet");
  }
  save_counts_csv((ctx.out / output).string(), ds);
  write_snapshot(ctx);
  std::cout << "wrote " << (ctx.out / output).string() << " (" << ds.size() << " samples)\n";
  return 0;
}

inline int cmd_fit(Ctx& ctx) {
  Json& s = ctx.config.at("fit");
  require_keys(s, {"tree", "data", "model_kind", "arch", "training", "pln", "pseudocount",
                   "param_seed", "output"},
               "fit");
  TreeLayout tree = load_tree(take_path(ctx, s, "tree"));
  HierarchicalDataset data = load_data_section(ctx, s.at("data"), tree);
  const std::string kind = s.at("model_kind").get<std::string>();
  const std::string output = s.contains("output") ? s["output"].get<std::string>() : "model.json";
  const std::uint64_t pseed = s.contains("param_seed") ? s["param_seed"].get<std::uint64_t>() : ctx.seed;

  if (kind == "plntree" || kind == "plntree-mf") {
    ArchConfig arch = arch_from_json(s.contains("arch") ? s["arch"] : Json::object());
    arch.family = (kind == "plntree") ? VariationalKind::Backward : VariationalKind::MeanField;
    if (data.has_covariates()) {
      arch.covariates_enabled = true;
      arch.covariate_dim = data.covariate_dim();
    }
    TrainConfig tc = train_config_from_json(s.contains("training") ? s["training"] : Json::object());
    if (!s.contains("training") || !s["training"].contains("seed")) tc.seed = ctx.seed;
    FittedModel f = make_fitted(tree, arch, pseed);
    init_from_data(f.model, f.store, data);
    TrainReport report = train(f, data, tc);
    if (report.aborted) throw NumericalError("training diverged (non-finite elbo twice in a row)");
    save_model((ctx.out / output).string(), f);
    write_trace_csv((ctx.out / "trace.csv").string(), report);
    std::cout << "trained " << kind << ": " << report.epochs_run << " epochs, final elbo "
              << format_double(report.final_elbo) << ", checksum " << report.checksum << "\n";
  } else if (kind == "pln") {
    PlnFitConfig cfg;
    if (s.contains("pln")) {
      require_keys(s["pln"], {"epochs", "learning_rate"}, "fit.pln");
      if (s["pln"].contains("epochs")) cfg.epochs = s["pln"]["epochs"].get<int>();
      if (s["pln"].contains("learning_rate")) cfg.learning_rate = s["pln"]["learning_rate"].get<double>();
    }
    cfg.seed = ctx.seed;
    PlnBaselineParams p = pln_fit(data, cfg);
    write_json_file((ctx.out / output).string(), pln_to_json(p, tree));
    std::cout << "fitted pln baseline: final elbo " << format_double(p.final_elbo) << "\n";
  } else if (kind == "spiec-easi") {
    const double pseudocount = s.contains("pseudocount") ? s["pseudocount"].get<double>() : 1.0;
    SpiecEasiParams p = spiec_fit(data, pseudocount);
    write_json_file((ctx.out / output).string(), spiec_to_json(p, tree));
    std::cout << "fitted spiec-easi baseline\n";
  } else {
    throw ConfigError("fit.model_kind: expected plntree|plntree-mf|pln|spiec-easi");
  }
  write_snapshot(ctx);
  return 0;
}

inline int cmd_generate(Ctx& ctx) {
  Json& s = ctx.config.at("generate");
  require_keys(s, {"model_file", "n", "output"}, "generate");
  AnyModel m = load_any_model(take_path(ctx, s, "model_file"));
  const int n = s.at("n").get<int>();
  if (n <= 0) throw ConfigError("generate.n must be positive");
  const std::string output = s.contains("output") ? s["output"].get<std::string>() : "generated.csv";
  HierarchicalDataset ds = m.generator(0)(n, ctx.seed);
  save_counts_csv((ctx.out / output).string(), ds);
  write_snapshot(ctx);
  std::cout << "wrote " << (ctx.out / output).string() << " (" << n << " samples)\n";
  return 0;
}

inline int cmd_encode(Ctx& ctx) {
  Json& s = ctx.config.at("encode");
  require_keys(s, {"model_file", "tree", "data", "features", "n_draws", "output"}, "encode");
  const std::string feature = s.at("features").get<std::string>();
  const FeatureKind kind = feature_kind_from_string(feature);
  const int n_draws = s.contains("n_draws") ? s["n_draws"].get<int>() : 100;
  const std::string output = s.contains("output") ? s["output"].get<std::string>() : "features.csv";

  std::vector<std::vector<std::vector<double>>> rows;
  std::vector<std::string> ids;
  int first_layer = 1;

  if (kind == FeatureKind::Clr || kind == FeatureKind::Proportions) {
    TreeLayout tree = load_tree(take_path(ctx, s, "tree"));
    HierarchicalDataset data = load_data_section(ctx, s.at("data"), tree);
    for (const auto& c : data.samples) rows.push_back(count_features(tree, c, kind));
    ids = data.sample_ids;
  } else if (kind == FeatureKind::ProjPln) {
    AnyModel m = load_any_model(take_path(ctx, s, "model_file"));
    if (!m.pln)
      throw ConfigError("encode: proj-pln features need a fitted pln baseline model");
    HierarchicalDataset data = load_data_section(ctx, s.at("data"), m.tree);
    // The flat baseline stores per-sample variational means; match by id.
    std::map<std::string, size_t> index;
    for (size_t i = 0; i < m.pln->sample_ids.size(); ++i) index[m.pln->sample_ids[i]] = i;
    for (size_t i = 0; i < data.size(); ++i) {
      auto it = index.find(data.sample_ids[i]);
      if (it == index.end())
        throw DataError("encode: sample_id \"" + data.sample_ids[i] +
                        "\" was not in the pln training set (per-sample parameterization)");
      rows.push_back({proj_pln(m.pln->m[it->second])});
      ids.push_back(data.sample_ids[i]);
    }
    first_layer = m.tree.depth();
  } else {
    AnyModel m = load_any_model(take_path(ctx, s, "model_file"));
    if (!m.tree_model) throw ConfigError("encode: latent features need a plntree model");
    const FittedModel& f = *m.tree_model;
    HierarchicalDataset data = load_data_section(ctx, s.at("data"), f.model.tree);
    auto states = encode_dataset(f, data, n_draws, ctx.seed);
    for (const auto& st : states) {
      if (kind == FeatureKind::Latent) {
        LatentState proj = project_latents(f.model.tree, st);
        rows.push_back(proj.z);
      } else if (kind == FeatureKind::LpClr) {
        rows.push_back(lp_clr(f.model.tree, st));
      } else {
        rows.push_back({ltp_clr(f.model.tree, st)});
        first_layer = f.model.tree.depth();
      }
    }
    ids = data.sample_ids;
  }
  write_features_csv((ctx.out / output).string(), ids, rows, feature_kind_name(kind), first_layer);
  write_snapshot(ctx);
  std::cout << "wrote " << (ctx.out / output).string() << "\n";
  return 0;
}

inline int cmd_evaluate(Ctx& ctx) {
  Json& s = ctx.config.at("evaluate");
  require_keys(s, {"protocol", "tree", "data", "model_file", "repetitions",
                   "samples_per_repetition", "subsample", "beta", "n_draws"},
               "evaluate");
  const std::string protocol = s.at("protocol").get<std::string>();
  TreeLayout tree = load_tree(take_path(ctx, s, "tree"));
  HierarchicalDataset data = load_data_section(ctx, s.at("data"), tree);
  AnyModel m = load_any_model(take_path(ctx, s, "model_file"));
  GeneratorFn gen = m.generator(ctx.seed);

  BenchmarkReport report;
  if (protocol == "alpha") {
    AlphaProtocolConfig cfg;
    if (s.contains("repetitions")) cfg.repetitions = s["repetitions"].get<int>();
    if (s.contains("samples_per_repetition"))
      cfg.samples_per_repetition = s["samples_per_repetition"].get<int>();
    cfg.seed = ctx.seed;
    cfg.threads = ctx.threads;
    run_alpha_protocol(report, m.kind, data, gen, cfg);
  } else if (protocol == "wasserstein") {
    WassersteinProtocolConfig cfg;
    if (s.contains("repetitions")) cfg.repetitions = s["repetitions"].get<int>();
    if (s.contains("samples_per_repetition"))
      cfg.samples_per_repetition = s["samples_per_repetition"].get<int>();
    if (s.contains("subsample")) cfg.subsample = s["subsample"].get<int>();
    cfg.seed = ctx.seed;
    cfg.threads = ctx.threads;
    run_wasserstein_protocol(report, m.kind, data, gen, cfg);
  } else if (protocol == "beta") {
    BetaProtocolConfig cfg;
    if (s.contains("beta")) {
      require_keys(s["beta"], {"repetitions", "group_size", "permutations"}, "evaluate.beta");
      if (s["beta"].contains("repetitions")) cfg.repetitions = s["beta"]["repetitions"].get<int>();
      if (s["beta"].contains("group_size")) cfg.group_size = s["beta"]["group_size"].get<int>();
      if (s["beta"].contains("permutations")) cfg.permutations = s["beta"]["permutations"].get<int>();
    }
    cfg.seed = ctx.seed;
    cfg.threads = ctx.threads;
    run_beta_protocol(report, m.kind, data, gen, cfg);
  } else if (protocol == "reconstruction") {
    if (!m.tree_model) throw ConfigError("evaluate: reconstruction needs a plntree model");
    const int n_draws = s.contains("n_draws") ? s["n_draws"].get<int>() : 100;
    auto rc = reconstruct_and_correlate(*m.tree_model, data, n_draws, ctx.seed);
    for (size_t l = 0; l < rc.per_layer.size(); ++l)
      report.add(m.kind, "reconstruction_correlation", static_cast<int>(l) + 1, 0, rc.per_layer[l]);
    if (rc.skipped > 0)
      std::cout << "warning: skipped " << rc.skipped << " zero-variance sample layers\n";
  } else {
    throw ConfigError("evaluate.protocol: expected alpha|beta|wasserstein|reconstruction");
  }
  write_json_file((ctx.out / "report.json").string(), report.to_json());
  report.write_summary_csv((ctx.out / "report.csv").string());
  report.write_long_csv((ctx.out / "report_long.csv").string());
  write_snapshot(ctx);
  std::cout << "wrote " << (ctx.out / "report.json").string() << "\n";
  return 0;
}

inline int cmd_benchmark(Ctx& ctx) {
  Json& s = ctx.config.at("benchmark");
  require_keys(s, {"tree", "data", "models", "arch", "training", "mf_seeds", "pln", "pseudocount",
                   "repetitions", "samples_per_repetition", "alpha", "wasserstein", "emd_subsample",
                   "beta", "reconstruction", "param_seed", "save_models"},
               "benchmark");
  TreeLayout tree = load_tree(take_path(ctx, s, "tree"));
  HierarchicalDataset data = load_data_section(ctx, s.at("data"), tree);

  std::vector<std::string> models{"plntree", "plntree-mf", "pln", "spiec-easi"};
  if (s.contains("models")) models = s["models"].get<std::vector<std::string>>();
  const int reps = s.contains("repetitions") ? s["repetitions"].get<int>() : 25;
  const int nper = s.contains("samples_per_repetition") ? s["samples_per_repetition"].get<int>() : 2000;
  const bool do_alpha = !s.contains("alpha") || s["alpha"].get<bool>();
  const bool do_wass = !s.contains("wasserstein") || s["wasserstein"].get<bool>();
  const int emd_sub = s.contains("emd_subsample") ? s["emd_subsample"].get<int>() : 200;
  const std::uint64_t pseed = s.contains("param_seed") ? s["param_seed"].get<std::uint64_t>() : 1;
  const bool save_models = !s.contains("save_models") || s["save_models"].get<bool>();

  TrainConfig tc = train_config_from_json(s.contains("training") ? s["training"] : Json::object());
  if (!s.contains("training") || !s["training"].contains("seed")) tc.seed = ctx.seed;
  ArchConfig base_arch = arch_from_json(s.contains("arch") ? s["arch"] : Json::object());
  if (data.has_covariates()) {
    base_arch.covariates_enabled = true;
    base_arch.covariate_dim = data.covariate_dim();
  }

  std::vector<std::uint64_t> mf_seeds{1, 2, 3};
  if (s.contains("mf_seeds")) mf_seeds = s["mf_seeds"].get<std::vector<std::uint64_t>>();

  if (save_models) fs::create_directories(ctx.out / "models");
  BenchmarkReport report;

  std::map<std::string, AnyModel> fitted;
  std::map<std::string, FittedModel> tree_models;
  for (const auto& kind : models) {
    std::cout << "training " << kind << "...\n";
    AnyModel any;
    any.kind = kind;
    any.tree = tree;
    if (kind == "plntree" || kind == "plntree-mf") {
      ArchConfig arch = base_arch;
      arch.family = kind == "plntree" ? VariationalKind::Backward : VariationalKind::MeanField;
      if (kind == "plntree-mf") {
        // Training instability: keep the best of the configured seeds by
        // final elbo.
        double best = -std::numeric_limits<double>::infinity();
        std::optional<FittedModel> bestf;
        for (std::uint64_t ms : mf_seeds) {
          FittedModel f = make_fitted(tree, arch, pseed ^ (ms * 0x9e3779b97f4a7c15ULL));
          init_from_data(f.model, f.store, data);
          TrainConfig tcm = tc;
          tcm.seed = tc.seed ^ ms;
          TrainReport r = train(f, data, tcm);
          std::cout << "  mf seed " << ms << ": final elbo " << format_double(r.final_elbo) << "\n";
          if (!r.aborted && r.final_elbo > best) {
            best = r.final_elbo;
            bestf = std::move(f);
          }
        }
        if (!bestf) throw NumericalError("benchmark: every mean-field seed diverged");
        tree_models.emplace(kind, std::move(*bestf));
      } else {
        FittedModel f = make_fitted(tree, arch, pseed);
        init_from_data(f.model, f.store, data);
        TrainReport r = train(f, data, tc);
        if (r.aborted) throw NumericalError("benchmark: plntree training diverged");
        std::cout << "  final elbo " << format_double(r.final_elbo) << " after " << r.epochs_run
                  << " epochs\n";
        tree_models.emplace(kind, std::move(f));
      }
      any.tree_model = tree_models.at(kind);
      if (save_models) save_model((ctx.out / "models" / (kind + ".json")).string(), *any.tree_model);
    } else if (kind == "pln") {
      PlnFitConfig cfg;
      if (s.contains("pln")) {
        require_keys(s["pln"], {"epochs", "learning_rate"}, "benchmark.pln");
        if (s["pln"].contains("epochs")) cfg.epochs = s["pln"]["epochs"].get<int>();
        if (s["pln"].contains("learning_rate"))
          cfg.learning_rate = s["pln"]["learning_rate"].get<double>();
      }
      cfg.seed = ctx.seed;
      any.pln = pln_fit(data, cfg);
      if (save_models)
        write_json_file((ctx.out / "models" / "pln.json").string(), pln_to_json(*any.pln, tree));
    } else if (kind == "spiec-easi") {
      const double pc = s.contains("pseudocount") ? s["pseudocount"].get<double>() : 1.0;
      any.spiec = spiec_fit(data, pc);
      if (save_models)
        write_json_file((ctx.out / "models" / "spiec-easi.json").string(),
                        spiec_to_json(*any.spiec, tree));
    } else {
      throw ConfigError("benchmark.models: unknown kind \"" + kind + "\"");
    }
    fitted.emplace(kind, std::move(any));
  }

  for (const auto& kind : models) {
    std::cout << "evaluating " << kind << "...\n";
    GeneratorFn gen = fitted.at(kind).generator(ctx.seed);
    if (do_alpha) {
      AlphaProtocolConfig cfg;
      cfg.repetitions = reps;
      cfg.samples_per_repetition = nper;
      cfg.seed = ctx.seed;
      cfg.threads = ctx.threads;
      run_alpha_protocol(report, kind, data, gen, cfg);
    }
    if (do_wass) {
      WassersteinProtocolConfig cfg;
      cfg.repetitions = reps;
      cfg.samples_per_repetition = nper;
      cfg.subsample = emd_sub;
      cfg.seed = ctx.seed;
      cfg.threads = ctx.threads;
      run_wasserstein_protocol(report, kind, data, gen, cfg);
    }
    if (s.contains("beta") && s["beta"].contains("enabled") && s["beta"]["enabled"].get<bool>()) {
      require_keys(s["beta"], {"enabled", "repetitions", "group_size", "permutations"},
                   "benchmark.beta");
      BetaProtocolConfig cfg;
      if (s["beta"].contains("repetitions")) cfg.repetitions = s["beta"]["repetitions"].get<int>();
      if (s["beta"].contains("group_size")) cfg.group_size = s["beta"]["group_size"].get<int>();
      if (s["beta"].contains("permutations")) cfg.permutations = s["beta"]["permutations"].get<int>();
      cfg.seed = ctx.seed;
      cfg.threads = ctx.threads;
      run_beta_protocol(report, kind, data, gen, cfg);
    }
    if ((kind == "plntree" || kind == "plntree-mf") && s.contains("reconstruction") &&
        (!s["reconstruction"].contains("enabled") || s["reconstruction"]["enabled"].get<bool>())) {
      require_keys(s["reconstruction"], {"enabled", "n_draws", "holdout"}, "benchmark.reconstruction");
      const int n_draws = s["reconstruction"].contains("n_draws")
                              ? s["reconstruction"]["n_draws"].get<int>()
                              : 25;
      HierarchicalDataset target = data;
      if (s["reconstruction"].contains("holdout"))
        target = load_data_section(ctx, s["reconstruction"]["holdout"], tree);
      auto rc = reconstruct_and_correlate(tree_models.at(kind), target, n_draws, ctx.seed);
      for (size_t l = 0; l < rc.per_layer.size(); ++l)
        report.add(kind, "reconstruction_correlation", static_cast<int>(l) + 1, 0, rc.per_layer[l]);
    }
  }

  write_json_file((ctx.out / "report.json").string(), report.to_json());
  report.write_summary_csv((ctx.out / "report.csv").string());
  report.write_long_csv((ctx.out / "report_long.csv").string());
  write_snapshot(ctx);
  std::cout << "wrote " << (ctx.out / "report.json").string() << "\n";
  return 0;
}

// ---- driver ----

inline int run_checked(const std::string& subcommand, const std::string& config_path,
                       const std::string& out_dir, std::optional<std::uint64_t> seed_override,
                       std::optional<int> threads_override) {
  Ctx ctx;
  ctx.config = read_json_file(config_path);
  require_keys(ctx.config,
               {"format_version", "seed", "threads", "simulate", "fit", "generate", "encode",
                "evaluate", "benchmark"},
               "config");
  if (!ctx.config.contains("format_version") || ctx.config["format_version"].get<int>() != 1)
    throw ConfigError("config: format_version 1 required");
  ctx.config_dir = fs::absolute(fs::path(config_path)).parent_path();
  ctx.out = fs::path(out_dir);
  fs::create_directories(ctx.out);
  ctx.seed = ctx.config.contains("seed") ? ctx.config["seed"].get<std::uint64_t>() : 0;
  ctx.threads = ctx.config.contains("threads") ? ctx.config["threads"].get<int>() : 1;
  if (seed_override) ctx.seed = *seed_override;
  if (threads_override) ctx.threads = *threads_override;
  if (ctx.threads < 1) throw ConfigError("threads must be >= 1");
  if (!ctx.config.contains(subcommand))
    throw ConfigError("config: missing \"" + subcommand + "\" section");

  if (subcommand == "simulate") return cmd_simulate(ctx);
  if (subcommand == "fit") return cmd_fit(ctx);
  if (subcommand == "generate") return cmd_generate(ctx);
  if (subcommand == "encode") return cmd_encode(ctx);
  if (subcommand == "evaluate") return cmd_evaluate(ctx);
  if (subcommand == "benchmark") return cmd_benchmark(ctx);
  throw ConfigError("unknown subcommand " + subcommand);
}

inline int run(int argc, char** argv) {
  CLI::App app{"hierarchical Poisson log-normal modeling toolkit"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::vector<CLI::App*> subs;
  for (const char* name : {"simulate", "fit", "generate", "encode", "evaluate", "benchmark"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--threads", threads, "override the config thread count");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    Json err{{"error", Json{{"type", "config"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    return run_checked(sub, config_path, out_dir, seed, threads);
  } catch (const ConfigError& e) {
    Json err{{"error", Json{{"type", "config"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const DataError& e) {
    Json err{{"error", Json{{"type", "data"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    Json err{{"error", Json{{"type", "numerical"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    Json err{{"error", Json{{"type", "internal"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 4;
  }
}

}  // namespace plntree::cli
