#pragma once

// Identifiable latent feature maps: sibling-block centering projectors,
// latent proportions and their centered-log-ratio transforms, the leaf-level
// restriction, and the flat-vector projection used with non-hierarchical
// models. All pure functions on latent states.

#include "plntree/model.hpp"

namespace plntree {

// Centers each sibling block of every layer >= 2; layer 1 is untouched.
inline LatentState project_latents(const TreeLayout& tree, const LatentState& state) {
  LatentState out = state;
  const int L = tree.depth();
  for (int l = 1; l < L; ++l) {
    for (const auto& group : tree.children[static_cast<size_t>(l - 1)]) {
      double mean = 0.0;
      for (int j : group) mean += state.z[static_cast<size_t>(l)][static_cast<size_t>(j)];
      mean /= static_cast<double>(group.size());
      for (int j : group) out.z[static_cast<size_t>(l)][static_cast<size_t>(j)] -= mean;
    }
  }
  return out;
}

// The recursive softmax allocation: layer 1 is softmax(Z^1), children split
// their parent's share by the softmax of their block.
inline std::vector<std::vector<double>> latent_proportions(const TreeLayout& tree,
                                                           const LatentState& state) {
  const int L = tree.depth();
  std::vector<std::vector<double>> v(static_cast<size_t>(L));
  {
    const auto& z1 = state.z[0];
    double mx = z1[0];
    for (double z : z1) mx = std::max(mx, z);
    double s = 0.0;
    v[0].resize(z1.size());
    for (size_t k = 0; k < z1.size(); ++k) {
      v[0][k] = std::exp(z1[k] - mx);
      s += v[0][k];
    }
    for (auto& x : v[0]) x /= s;
  }
  for (int l = 1; l < L; ++l) {
    v[static_cast<size_t>(l)].assign(static_cast<size_t>(tree.layer_sizes[static_cast<size_t>(l)]), 0.0);
    for (int k = 0; k < tree.layer_sizes[static_cast<size_t>(l - 1)]; ++k) {
      const auto& group = tree.children[static_cast<size_t>(l - 1)][static_cast<size_t>(k)];
      double mx = -1e300;
      for (int j : group) mx = std::max(mx, state.z[static_cast<size_t>(l)][static_cast<size_t>(j)]);
      double s = 0.0;
      for (int j : group) s += std::exp(state.z[static_cast<size_t>(l)][static_cast<size_t>(j)] - mx);
      for (int j : group)
        v[static_cast<size_t>(l)][static_cast<size_t>(j)] =
            std::exp(state.z[static_cast<size_t>(l)][static_cast<size_t>(j)] - mx) / s *
            v[static_cast<size_t>(l - 1)][static_cast<size_t>(k)];
    }
  }
  return v;
}

// log x - mean(log x); requires strictly positive entries.
inline std::vector<double> clr(const std::vector<double>& x) {
  std::vector<double> out(x.size());
  double mean = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) throw DataError("clr: nonpositive entry at index " + std::to_string(i));
    out[i] = std::log(x[i]);
    mean += out[i];
  }
  mean /= static_cast<double>(x.size());
  for (auto& v : out) v -= mean;
  return out;
}

// CLR applied layer-wise to the latent proportions.
inline std::vector<std::vector<double>> lp_clr(const TreeLayout& tree, const LatentState& state) {
  auto v = latent_proportions(tree, state);
  std::vector<std::vector<double>> out;
  out.reserve(v.size());
  for (const auto& layer : v) out.push_back(clr(layer));
  return out;
}

// Leaf-layer restriction of lp_clr.
inline std::vector<double> ltp_clr(const TreeLayout& tree, const LatentState& state) {
  return lp_clr(tree, state).back();
}

// Projection of a flat latent vector onto the zero-sum hyperplane; identical
// to clr(softmax(z)).
inline std::vector<double> proj_pln(const std::vector<double>& z) {
  std::vector<double> out(z.size());
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = z[i] - mean;
  return out;
}

// ---- feature export ----

enum class FeatureKind { Latent, LpClr, LtpClr, ProjPln, Clr, Proportions };

inline FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "latent") return FeatureKind::Latent;
  if (s == "lp-clr") return FeatureKind::LpClr;
  if (s == "ltp-clr") return FeatureKind::LtpClr;
  if (s == "proj-pln") return FeatureKind::ProjPln;
  if (s == "clr") return FeatureKind::Clr;
  if (s == "proportions") return FeatureKind::Proportions;
  throw ConfigError("unknown feature kind \"" + s + "\"");
}

inline std::string feature_kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::Latent: return "latent";
    case FeatureKind::LpClr: return "lp_clr";
    case FeatureKind::LtpClr: return "ltp_clr";
    case FeatureKind::ProjPln: return "proj_pln";
    case FeatureKind::Clr: return "clr";
    case FeatureKind::Proportions: return "proportions";
  }
  return "";
}

// Count-based features need no model: per-layer proportions or CLR of
// pseudocounted proportions. The pseudocount policy for observed zeros is
// +1 on every count before normalization.
inline std::vector<std::vector<double>> count_features(const TreeLayout& tree,
                                                       const HierarchicalCounts& counts,
                                                       FeatureKind kind, double pseudocount = 1.0) {
  std::vector<std::vector<double>> out;
  for (int l = 0; l < tree.depth(); ++l) {
    const auto& layer = counts.layers[static_cast<size_t>(l)];
    std::vector<double> comp(layer.size());
    double tot = 0.0;
    for (size_t k = 0; k < layer.size(); ++k) {
      comp[k] = static_cast<double>(layer[k]) + (kind == FeatureKind::Clr ? pseudocount : 0.0);
      tot += comp[k];
    }
    if (tot <= 0.0) throw DataError("features: all-zero layer " + std::to_string(l + 1));
    for (auto& v : comp) v /= tot;
    out.push_back(kind == FeatureKind::Clr ? clr(comp) : comp);
  }
  return out;
}

// Rows are layer-major, node-minor, matching the counts CSV column order.
// first_layer is the 1-based index of the first exported layer (leaf-only
// exports pass the tree depth).
inline void write_features_csv(const std::string& path,
                               const std::vector<std::string>& sample_ids,
                               const std::vector<std::vector<std::vector<double>>>& rows,
                               const std::string& feature_name, int first_layer) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  if (rows.empty()) throw DataError("features: nothing to write");
  f << "sample_id";
  for (size_t l = 0; l < rows[0].size(); ++l)
    for (size_t k = 0; k < rows[0][l].size(); ++k)
      f << "," << feature_name << "_" << (first_layer + static_cast<int>(l)) << "_" << k;
  f << "\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    f << sample_ids[i];
    for (const auto& layer : rows[i])
      for (double v : layer) f << "," << format_double(v);
    f << "\n";
  }
}

}  // namespace plntree
