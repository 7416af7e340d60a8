#pragma once

// Layered rooted trees, hierarchical count vectors satisfying the
// parent = sum-of-children constraint, and the file formats they travel in
// (tree JSON, per-layer counts CSV, leaf-only CSV, covariates CSV).

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "plntree/json_io.hpp"

namespace plntree {

struct TreeLayout {
  // K_1..K_L
  std::vector<int> layer_sizes;
  // parents[l][k] = parent index (in layer l) of node k in layer l+1,
  // for l = 0..L-2 (0-based layers throughout the API).
  std::vector<std::vector<int>> parents;
  // children[l][k] = ordered child indices (layer l+1) of node k in layer l.
  std::vector<std::vector<std::vector<int>>> children;
  // singleton[l][k]: the sibling group containing node k of layer l has size 1.
  // Layer 0 nodes form one implicit group of size K_1.
  std::vector<std::vector<bool>> singleton;

  int depth() const { return static_cast<int>(layer_sizes.size()); }
  int max_width() const {
    int w = 0;
    for (int k : layer_sizes) w = std::max(w, k);
    return w;
  }
};

struct HierarchicalCounts {
  std::vector<std::vector<std::int64_t>> layers;

  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto x : layers.back()) s += x;
    return s;
  }
  const std::vector<std::int64_t>& leaves() const { return layers.back(); }
};

struct HierarchicalDataset {
  TreeLayout tree;
  std::vector<std::string> sample_ids;
  std::vector<HierarchicalCounts> samples;
  // Optional per-sample covariates, all rows of equal dimension p.
  std::vector<std::vector<double>> covariates;

  size_t size() const { return samples.size(); }
  bool has_covariates() const { return !covariates.empty(); }
  int covariate_dim() const { return covariates.empty() ? 0 : static_cast<int>(covariates[0].size()); }
};

// ---- layout construction and validation ----

inline TreeLayout make_tree(std::vector<int> layer_sizes, std::vector<std::vector<int>> parents) {
  TreeLayout t;
  t.layer_sizes = std::move(layer_sizes);
  t.parents = std::move(parents);
  const int L = t.depth();
  if (L == 0) throw DataError("tree: at least one layer required");
  for (int l = 0; l < L; ++l)
    if (t.layer_sizes[static_cast<size_t>(l)] <= 0)
      throw DataError("tree: layer " + std::to_string(l + 1) + " has non-positive size");
  if (static_cast<int>(t.parents.size()) != L - 1)
    throw DataError("tree: expected " + std::to_string(L - 1) + " parent maps, got " +
                    std::to_string(t.parents.size()));

  t.children.resize(static_cast<size_t>(L - 1));
  for (int l = 0; l + 1 < L; ++l) {
    const int kl = t.layer_sizes[static_cast<size_t>(l)];
    const int kn = t.layer_sizes[static_cast<size_t>(l + 1)];
    const auto& par = t.parents[static_cast<size_t>(l)];
    if (static_cast<int>(par.size()) != kn)
      throw DataError("tree: parent map for layer " + std::to_string(l + 2) + " has length " +
                      std::to_string(par.size()) + ", expected " + std::to_string(kn));
    t.children[static_cast<size_t>(l)].assign(static_cast<size_t>(kl), {});
    for (int j = 0; j < kn; ++j) {
      const int p = par[static_cast<size_t>(j)];
      if (p < 0 || p >= kl)
        throw DataError("tree: node " + std::to_string(j) + " of layer " + std::to_string(l + 2) +
                        " references parent " + std::to_string(p) + " outside layer of size " +
                        std::to_string(kl));
      t.children[static_cast<size_t>(l)][static_cast<size_t>(p)].push_back(j);
    }
    for (int k = 0; k < kl; ++k)
      if (t.children[static_cast<size_t>(l)][static_cast<size_t>(k)].empty())
        throw DataError("tree: node " + std::to_string(k) + " of layer " + std::to_string(l + 1) +
                        " has no children; every branch must reach depth " + std::to_string(L));
  }

  t.singleton.resize(static_cast<size_t>(L));
  t.singleton[0].assign(static_cast<size_t>(t.layer_sizes[0]), t.layer_sizes[0] == 1);
  for (int l = 1; l < L; ++l) {
    t.singleton[static_cast<size_t>(l)].assign(static_cast<size_t>(t.layer_sizes[static_cast<size_t>(l)]), false);
    for (const auto& group : t.children[static_cast<size_t>(l - 1)])
      if (group.size() == 1) t.singleton[static_cast<size_t>(l)][static_cast<size_t>(group[0])] = true;
  }
  return t;
}

inline TreeLayout parse_tree(const Json& doc) {
  require_keys(doc, {"layer_sizes", "parents"}, "tree document");
  if (!doc.contains("layer_sizes") || !doc["layer_sizes"].is_array())
    throw DataError("tree document: layer_sizes array required");
  if (!doc.contains("parents") || !doc["parents"].is_array())
    throw DataError("tree document: parents array required");
  std::vector<int> sizes;
  for (const auto& e : doc["layer_sizes"]) {
    if (!e.is_number_integer()) throw DataError("tree document: layer_sizes must be integers");
    sizes.push_back(e.get<int>());
  }
  std::vector<std::vector<int>> parents;
  for (const auto& layer : doc["parents"]) {
    if (!layer.is_array()) throw DataError("tree document: parents must be an array of arrays");
    std::vector<int> p;
    for (const auto& e : layer) {
      if (!e.is_number_integer()) throw DataError("tree document: parent indices must be integers");
      p.push_back(e.get<int>());
    }
    parents.push_back(std::move(p));
  }
  return make_tree(std::move(sizes), std::move(parents));
}

inline TreeLayout parse_tree_text(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const std::exception& e) {
    throw DataError(std::string("tree document: malformed JSON: ") + e.what());
  }
  return parse_tree(doc);
}

inline TreeLayout load_tree(const std::string& path) { return parse_tree(read_json_file(path)); }

inline Json tree_to_json(const TreeLayout& t) {
  Json doc;
  doc["layer_sizes"] = t.layer_sizes;
  Json parents = Json::array();
  for (const auto& p : t.parents) parents.push_back(p);
  doc["parents"] = parents;
  return doc;
}

inline void save_tree(const std::string& path, const TreeLayout& t) {
  write_json_file(path, tree_to_json(t));
}

// ---- counts ----

inline HierarchicalCounts validate_counts(const TreeLayout& tree,
                                          const std::vector<std::vector<std::int64_t>>& raw) {
  const int L = tree.depth();
  if (static_cast<int>(raw.size()) != L)
    throw DataError("counts: expected " + std::to_string(L) + " layers, got " + std::to_string(raw.size()));
  for (int l = 0; l < L; ++l) {
    if (static_cast<int>(raw[static_cast<size_t>(l)].size()) != tree.layer_sizes[static_cast<size_t>(l)])
      throw DataError("counts: layer " + std::to_string(l + 1) + " has length " +
                      std::to_string(raw[static_cast<size_t>(l)].size()) + ", expected " +
                      std::to_string(tree.layer_sizes[static_cast<size_t>(l)]));
    for (size_t k = 0; k < raw[static_cast<size_t>(l)].size(); ++k)
      if (raw[static_cast<size_t>(l)][k] < 0)
        throw DataError("counts: negative entry at layer " + std::to_string(l + 1) + ", node " +
                        std::to_string(k));
  }
  for (int l = 0; l + 1 < L; ++l) {
    for (int k = 0; k < tree.layer_sizes[static_cast<size_t>(l)]; ++k) {
      std::int64_t s = 0;
      for (int j : tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)])
        s += raw[static_cast<size_t>(l + 1)][static_cast<size_t>(j)];
      const std::int64_t found = raw[static_cast<size_t>(l)][static_cast<size_t>(k)];
      if (s != found)
        throw DataError("counts: compositionality violated at layer " + std::to_string(l + 1) +
                        ", node " + std::to_string(k) + ": expected " + std::to_string(s) +
                        " from children, found " + std::to_string(found));
    }
  }
  return HierarchicalCounts{raw};
}

inline HierarchicalCounts lift_leaf_counts(const TreeLayout& tree,
                                           const std::vector<std::int64_t>& leaves) {
  const int L = tree.depth();
  if (static_cast<int>(leaves.size()) != tree.layer_sizes.back())
    throw DataError("leaf counts: length " + std::to_string(leaves.size()) + ", expected " +
                    std::to_string(tree.layer_sizes.back()));
  for (size_t j = 0; j < leaves.size(); ++j)
    if (leaves[j] < 0) throw DataError("leaf counts: negative entry at node " + std::to_string(j));
  HierarchicalCounts out;
  out.layers.resize(static_cast<size_t>(L));
  out.layers.back() = leaves;
  for (int l = L - 2; l >= 0; --l) {
    auto& cur = out.layers[static_cast<size_t>(l)];
    cur.assign(static_cast<size_t>(tree.layer_sizes[static_cast<size_t>(l)]), 0);
    for (int k = 0; k < tree.layer_sizes[static_cast<size_t>(l)]; ++k)
      for (int j : tree.children[static_cast<size_t>(l)][static_cast<size_t>(k)])
        cur[static_cast<size_t>(k)] += out.layers[static_cast<size_t>(l + 1)][static_cast<size_t>(j)];
  }
  return out;
}

// ---- CSV I/O ----

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::int64_t parse_count(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    const long long x = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return x;
  } catch (const std::exception&) {
    throw DataError(where + ": not an integer count: \"" + s + "\"");
  }
}

}  // namespace detail

inline std::string counts_csv_header(const TreeLayout& tree) {
  std::string h = "sample_id";
  for (int l = 0; l < tree.depth(); ++l)
    for (int k = 0; k < tree.layer_sizes[static_cast<size_t>(l)]; ++k)
      h += ",L" + std::to_string(l + 1) + "_" + std::to_string(k);
  return h;
}

inline void save_counts_csv(const std::string& path, const HierarchicalDataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << counts_csv_header(ds.tree) << "\n";
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    f << ds.sample_ids[i];
    for (const auto& layer : ds.samples[i].layers)
      for (auto x : layer) f << "," << x;
    f << "\n";
  }
}

inline HierarchicalDataset load_counts_csv(const std::string& path, const TreeLayout& tree) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty file");
  const std::string expected = counts_csv_header(tree);
  {
    auto cells = detail::split_csv_line(line);
    auto want = detail::split_csv_line(expected);
    if (cells != want) throw DataError(path + ": header does not match tree (expected \"" + expected + "\")");
  }
  HierarchicalDataset ds;
  ds.tree = tree;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    std::int64_t want = 1;
    for (int k : tree.layer_sizes) want += k;
    if (static_cast<std::int64_t>(cells.size()) != want)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(want) +
                      " columns, got " + std::to_string(cells.size()));
    std::vector<std::vector<std::int64_t>> raw(static_cast<size_t>(tree.depth()));
    size_t c = 1;
    for (int l = 0; l < tree.depth(); ++l)
      for (int k = 0; k < tree.layer_sizes[static_cast<size_t>(l)]; ++k)
        raw[static_cast<size_t>(l)].push_back(
            detail::parse_count(cells[c++], path + ":" + std::to_string(lineno)));
    try {
      ds.samples.push_back(validate_counts(tree, raw));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ds.sample_ids.push_back(cells[0]);
  }
  return ds;
}

inline void save_leaf_csv(const std::string& path, const HierarchicalDataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << "sample_id";
  for (int k = 0; k < ds.tree.layer_sizes.back(); ++k) f << ",X_" << k;
  f << "\n";
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    f << ds.sample_ids[i];
    for (auto x : ds.samples[i].leaves()) f << "," << x;
    f << "\n";
  }
}

inline HierarchicalDataset load_leaf_csv(const std::string& path, const TreeLayout& tree) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty file");
  {
    auto cells = detail::split_csv_line(line);
    if (cells.empty() || cells[0] != "sample_id" ||
        static_cast<int>(cells.size()) != tree.layer_sizes.back() + 1)
      throw DataError(path + ": leaf CSV header mismatch (expected sample_id,X_0..X_" +
                      std::to_string(tree.layer_sizes.back() - 1) + ")");
  }
  HierarchicalDataset ds;
  ds.tree = tree;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (static_cast<int>(cells.size()) != tree.layer_sizes.back() + 1)
      throw DataError(path + ":" + std::to_string(lineno) + ": column count mismatch");
    std::vector<std::int64_t> leaves;
    for (size_t c = 1; c < cells.size(); ++c)
      leaves.push_back(detail::parse_count(cells[c], path + ":" + std::to_string(lineno)));
    ds.samples.push_back(lift_leaf_counts(tree, leaves));
    ds.sample_ids.push_back(cells[0]);
  }
  return ds;
}

inline void save_covariates_csv(const std::string& path, const HierarchicalDataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << "sample_id";
  for (int j = 0; j < ds.covariate_dim(); ++j) f << ",c_" << j;
  f << "\n";
  for (size_t i = 0; i < ds.covariates.size(); ++i) {
    f << ds.sample_ids[i];
    for (double x : ds.covariates[i]) f << "," << format_double(x);
    f << "\n";
  }
}

// Joins covariates onto an existing dataset by sample_id.
inline void load_covariates_csv(const std::string& path, HierarchicalDataset& ds) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty file");
  auto header = detail::split_csv_line(line);
  if (header.empty() || header[0] != "sample_id")
    throw DataError(path + ": covariates CSV must start with sample_id column");
  const size_t p = header.size() - 1;
  std::map<std::string, std::vector<double>> rows;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != p + 1)
      throw DataError(path + ":" + std::to_string(lineno) + ": covariate dimension varies across samples");
    std::vector<double> row;
    for (size_t c = 1; c < cells.size(); ++c) {
      try {
        row.push_back(std::stod(cells[c]));
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(lineno) + ": not a number: \"" + cells[c] + "\"");
      }
    }
    rows[cells[0]] = std::move(row);
  }
  ds.covariates.clear();
  for (const auto& id : ds.sample_ids) {
    auto it = rows.find(id);
    if (it == rows.end()) throw DataError(path + ": no covariates for sample_id \"" + id + "\"");
    ds.covariates.push_back(it->second);
  }
}

}  // namespace plntree
