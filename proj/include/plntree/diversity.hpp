#pragma once

// Evaluation metrics: alpha-diversity indices, 1-D distribution distances,
// Bray-Curtis dissimilarities, an exact transportation solver for the
// multivariate Wasserstein distance, PERMANOVA/PERMDISP permutation tests on
// dissimilarity matrices, and reconstruction correlations.

#include <algorithm>
#include <functional>
#include <map>

#include "plntree/rng.hpp"
#include "plntree/tensor.hpp"
#include "plntree/tree.hpp"

namespace plntree {

// ---- alpha diversity ----

namespace detail {

inline std::vector<double> to_composition(const std::vector<double>& p) {
  double tot = 0.0;
  for (double x : p) {
    if (x < 0.0) throw DataError("composition: negative entry");
    tot += x;
  }
  if (tot <= 0.0) throw DataError("composition: zero total");
  std::vector<double> out(p.size());
  for (size_t i = 0; i < p.size(); ++i) out[i] = p[i] / tot;
  return out;
}

}  // namespace detail

inline double shannon(const std::vector<double>& p_raw) {
  auto p = detail::to_composition(p_raw);
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

inline double simpson(const std::vector<double>& p_raw) {
  auto p = detail::to_composition(p_raw);
  double s = 0.0;
  for (double x : p) s += x * x;
  return s;
}

// ---- 1-D sample distances ----

inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DataError("wasserstein_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  // Integrate |Q_a - Q_b| over the quantile breakpoints of both samples.
  double w = 0.0, t = 0.0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double ta = static_cast<double>(i + 1) / na;
    const double tb = static_cast<double>(j + 1) / nb;
    const double tn = std::min(ta, tb);
    w += (tn - t) * std::fabs(a[i] - b[j]);
    t = tn;
    if (ta <= tb + 1e-15) ++i;
    if (tb <= ta + 1e-15) ++j;
  }
  return w;
}

inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DataError("ks: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::fabs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

struct HistPair {
  std::vector<double> p, q;
};

inline HistPair shared_histograms(const std::vector<double>& a, const std::vector<double>& b,
                                  int bins) {
  if (a.empty() || b.empty()) throw DataError("histogram distance: empty sample");
  double lo = a[0], hi = a[0];
  for (double x : a) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  for (double x : b) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  HistPair h;
  h.p.assign(static_cast<size_t>(bins), 0.0);
  h.q.assign(static_cast<size_t>(bins), 0.0);
  const double width = hi - lo;
  auto drop = [&](std::vector<double>& hist, double x) {
    int bin = width > 0.0 ? static_cast<int>((x - lo) / width * bins) : 0;
    bin = std::min(bins - 1, std::max(0, bin));
    hist[static_cast<size_t>(bin)] += 1.0;
  };
  for (double x : a) drop(h.p, x);
  for (double x : b) drop(h.q, x);
  for (auto& v : h.p) v /= static_cast<double>(a.size());
  for (auto& v : h.q) v /= static_cast<double>(b.size());
  return h;
}

inline double tv_hist(const std::vector<double>& a, const std::vector<double>& b, int bins = 50) {
  HistPair h = shared_histograms(a, b, bins);
  double tv = 0.0;
  for (size_t i = 0; i < h.p.size(); ++i) tv += std::fabs(h.p[i] - h.q[i]);
  return 0.5 * tv;
}

inline double kl_hist(const std::vector<double>& a, const std::vector<double>& b, int bins = 50,
                      double eps = 1e-10) {
  HistPair h = shared_histograms(a, b, bins);
  double kl = 0.0;
  for (size_t i = 0; i < h.p.size(); ++i)
    if (h.p[i] > 0.0) kl += h.p[i] * std::log((h.p[i] + eps) / (h.q[i] + eps));
  return kl;
}

// ---- Bray-Curtis ----

template <typename T>
inline double bray_curtis(const std::vector<T>& x, const std::vector<T>& y) {
  if (x.size() != y.size()) throw DataError("bray_curtis: length mismatch");
  double shared = 0.0, sx = 0.0, sy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0 || y[i] < 0) throw DataError("bray_curtis: negative entry");
    shared += static_cast<double>(std::min(x[i], y[i]));
    sx += static_cast<double>(x[i]);
    sy += static_cast<double>(y[i]);
  }
  if (sx + sy <= 0.0) throw DataError("bray_curtis: both vectors are zero");
  return 1.0 - 2.0 * shared / (sx + sy);
}

struct DissimilarityMatrix {
  std::int64_t n = 0;
  std::vector<double> d;       // row-major n x n
  std::vector<int> labels;     // group label per row

  double at(std::int64_t i, std::int64_t j) const { return d[static_cast<size_t>(i * n + j)]; }
  double& at(std::int64_t i, std::int64_t j) { return d[static_cast<size_t>(i * n + j)]; }

  void validate() const {
    for (std::int64_t i = 0; i < n; ++i) {
      if (std::fabs(at(i, i)) > 1e-12) throw DataError("dissimilarity: nonzero diagonal");
      for (std::int64_t j = 0; j < n; ++j) {
        if (std::fabs(at(i, j) - at(j, i)) > 1e-12) throw DataError("dissimilarity: not symmetric");
        if (at(i, j) < -1e-12 || at(i, j) > 1.0 + 1e-12)
          throw DataError("dissimilarity: value outside [0, 1]");
      }
    }
  }
};

// Pairwise Bray-Curtis over the concatenation of two sample groups.
template <typename Row>
inline DissimilarityMatrix bray_curtis_matrix(const std::vector<Row>& group_a,
                                              const std::vector<Row>& group_b) {
  DissimilarityMatrix m;
  m.n = static_cast<std::int64_t>(group_a.size() + group_b.size());
  m.d.assign(static_cast<size_t>(m.n * m.n), 0.0);
  m.labels.assign(static_cast<size_t>(m.n), 0);
  for (size_t i = 0; i < group_b.size(); ++i) m.labels[group_a.size() + i] = 1;
  auto row = [&](std::int64_t i) -> const Row& {
    return i < static_cast<std::int64_t>(group_a.size())
               ? group_a[static_cast<size_t>(i)]
               : group_b[static_cast<size_t>(i) - group_a.size()];
  };
  for (std::int64_t i = 0; i < m.n; ++i)
    for (std::int64_t j = i + 1; j < m.n; ++j) {
      const double v = bray_curtis(row(i), row(j));
      m.at(i, j) = v;
      m.at(j, i) = v;
    }
  return m;
}

// ---- exact multivariate Wasserstein (transportation problem) ----

namespace detail {

// Transportation simplex on a dense cost matrix with epsilon-perturbed
// margins (Dantzig). The optimal basis is a spanning tree; final flows are
// re-solved on the unperturbed margins so the cost is exact.
class TransportationSolver {
 public:
  TransportationSolver(const std::vector<double>& supply, const std::vector<double>& demand,
                       const std::vector<double>& cost)
      : ns_(static_cast<int>(supply.size())),
        nd_(static_cast<int>(demand.size())),
        cost_(cost),
        supply_(supply),
        demand_(demand) {}

  double solve() {
    const double eps = 1e-11 / static_cast<double>(ns_ + nd_);
    std::vector<double> a = supply_, b = demand_;
    for (auto& x : a) x += eps;
    b.back() += eps * static_cast<double>(ns_);

    // Northwest-corner start.
    basis_.clear();
    adj_.assign(static_cast<size_t>(ns_ + nd_), {});
    {
      int i = 0, j = 0;
      std::vector<double> ra = a, rb = b;
      while (i < ns_ && j < nd_) {
        const double f = std::min(ra[static_cast<size_t>(i)], rb[static_cast<size_t>(j)]);
        add_arc(i, j, f);
        ra[static_cast<size_t>(i)] -= f;
        rb[static_cast<size_t>(j)] -= f;
        if (ra[static_cast<size_t>(i)] <= rb[static_cast<size_t>(j)])
          ++i;
        else
          ++j;
      }
      // The perturbation keeps partial sums distinct, so exactly
      // ns + nd - 1 arcs were created.
    }

    std::vector<double> u(static_cast<size_t>(ns_)), v(static_cast<size_t>(nd_));
    const double tol = 1e-12 * (1.0 + max_cost());
    for (int iter = 0;; ++iter) {
      if (iter > 200 * (ns_ + nd_) * (ns_ + nd_))
        throw NumericalError("transportation solver: iteration guard tripped");
      compute_potentials(u, v);
      int bi = -1, bj = -1;
      double best = -tol;
      for (int i = 0; i < ns_; ++i) {
        const double ui = u[static_cast<size_t>(i)];
        const double* crow = cost_.data() + static_cast<size_t>(i) * nd_;
        for (int j = 0; j < nd_; ++j) {
          const double r = crow[j] - ui - v[static_cast<size_t>(j)];
          if (r < best) {
            best = r;
            bi = i;
            bj = j;
          }
        }
      }
      if (bi < 0) break;
      pivot(bi, bj);
    }

    // Re-solve the tree flows against the exact margins.
    resolve_flows(supply_, demand_);
    double total = 0.0;
    for (const auto& [key, flow] : basis_) {
      const int i = key / nd_, j = key % nd_;
      if (flow > 0.0) total += flow * cost_[static_cast<size_t>(key)];
      (void)i;
      (void)j;
    }
    return total;
  }

 private:
  int ns_, nd_;
  std::vector<double> cost_, supply_, demand_;
  std::map<int, double> basis_;                 // arc key = i * nd + j -> flow
  std::vector<std::vector<int>> adj_;           // node adjacency over arcs (node: i or ns+j)

  double max_cost() const {
    double m = 0.0;
    for (double c : cost_) m = std::max(m, std::fabs(c));
    return m;
  }

  void add_arc(int i, int j, double f) {
    basis_[i * nd_ + j] = f;
    adj_[static_cast<size_t>(i)].push_back(i * nd_ + j);
    adj_[static_cast<size_t>(ns_ + j)].push_back(i * nd_ + j);
  }

  void drop_arc(int key) {
    basis_.erase(key);
    const int i = key / nd_, j = ns_ + key % nd_;
    for (int node : {i, j}) {
      auto& lst = adj_[static_cast<size_t>(node)];
      lst.erase(std::find(lst.begin(), lst.end(), key));
    }
  }

  void compute_potentials(std::vector<double>& u, std::vector<double>& v) const {
    std::vector<char> seen(static_cast<size_t>(ns_ + nd_), 0);
    std::vector<int> stack{0};
    u[0] = 0.0;
    seen[0] = 1;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      for (int key : adj_[static_cast<size_t>(node)]) {
        const int i = key / nd_, j = key % nd_;
        const int other = (node < ns_) ? ns_ + j : i;
        if (seen[static_cast<size_t>(other)]) continue;
        seen[static_cast<size_t>(other)] = 1;
        if (other >= ns_)
          v[static_cast<size_t>(other - ns_)] = cost_[static_cast<size_t>(key)] - u[static_cast<size_t>(i)];
        else
          u[static_cast<size_t>(other)] = cost_[static_cast<size_t>(key)] - v[static_cast<size_t>(j)];
        stack.push_back(other);
      }
    }
  }

  // Path from source node i to sink node ns+j through the basis tree.
  std::vector<int> tree_path(int from, int to) const {
    std::vector<int> parent_arc(static_cast<size_t>(ns_ + nd_), -1);
    std::vector<int> parent(static_cast<size_t>(ns_ + nd_), -1);
    std::vector<char> seen(static_cast<size_t>(ns_ + nd_), 0);
    std::vector<int> stack{from};
    seen[static_cast<size_t>(from)] = 1;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      if (node == to) break;
      for (int key : adj_[static_cast<size_t>(node)]) {
        const int i = key / nd_, j = key % nd_;
        const int other = (node < ns_) ? ns_ + j : i;
        if (seen[static_cast<size_t>(other)]) continue;
        seen[static_cast<size_t>(other)] = 1;
        parent[static_cast<size_t>(other)] = node;
        parent_arc[static_cast<size_t>(other)] = key;
        stack.push_back(other);
      }
    }
    std::vector<int> arcs;
    for (int node = to; node != from; node = parent[static_cast<size_t>(node)]) {
      if (parent_arc[static_cast<size_t>(node)] < 0)
        throw NumericalError("transportation solver: basis lost connectivity");
      arcs.push_back(parent_arc[static_cast<size_t>(node)]);
    }
    std::reverse(arcs.begin(), arcs.end());
    return arcs;
  }

  void pivot(int bi, int bj) {
    // Adding (bi, bj) closes one cycle: entering arc plus the tree path from
    // the demand node back to the supply node. Alternate signs along it.
    auto path = tree_path(ns_ + bj, bi);
    double theta = std::numeric_limits<double>::infinity();
    int leaving = -1;
    // Entering arc has sign +; walk the path assigning alternating signs.
    int sign = -1;
    std::vector<std::pair<int, int>> signed_arcs;
    int node = ns_ + bj;
    for (int key : path) {
      signed_arcs.push_back({key, sign});
      if (sign < 0) {
        const double f = basis_.at(key);
        if (f < theta) {
          theta = f;
          leaving = key;
        }
      }
      const int i = key / nd_, j = key % nd_;
      node = (node == i) ? ns_ + j : i;
      sign = -sign;
    }
    for (auto [key, s] : signed_arcs) basis_[key] += s * theta;
    add_arc(bi, bj, theta);
    drop_arc(leaving);
  }

  void resolve_flows(const std::vector<double>& a, const std::vector<double>& b) {
    // Peel leaves of the basis tree; each leaf arc's flow is forced by the
    // remaining margin of its leaf node.
    std::vector<double> rem(static_cast<size_t>(ns_ + nd_));
    for (int i = 0; i < ns_; ++i) rem[static_cast<size_t>(i)] = a[static_cast<size_t>(i)];
    for (int j = 0; j < nd_; ++j) rem[static_cast<size_t>(ns_ + j)] = b[static_cast<size_t>(j)];
    std::vector<int> degree(static_cast<size_t>(ns_ + nd_));
    for (int n = 0; n < ns_ + nd_; ++n) degree[static_cast<size_t>(n)] = static_cast<int>(adj_[static_cast<size_t>(n)].size());
    std::vector<char> arc_done;
    std::map<int, char> done;
    std::vector<int> leaves;
    for (int n = 0; n < ns_ + nd_; ++n)
      if (degree[static_cast<size_t>(n)] == 1) leaves.push_back(n);
    while (!leaves.empty()) {
      const int node = leaves.back();
      leaves.pop_back();
      int arc = -1;
      for (int key : adj_[static_cast<size_t>(node)])
        if (!done.count(key)) arc = key;
      if (arc < 0) continue;
      const double f = std::max(0.0, rem[static_cast<size_t>(node)]);
      basis_[arc] = f;
      done[arc] = 1;
      const int i = arc / nd_, j = ns_ + arc % nd_;
      const int other = (node == i) ? j : i;
      rem[static_cast<size_t>(node)] = 0.0;
      rem[static_cast<size_t>(other)] -= f;
      if (--degree[static_cast<size_t>(other)] == 1) leaves.push_back(other);
      --degree[static_cast<size_t>(node)];
    }
  }
};

}  // namespace detail

// Exact optimal-transport cost between two point sets under uniform weights
// and the Euclidean ground metric.
inline double emd_multivariate(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b, int guard = 512) {
  if (a.empty() || b.empty()) throw DataError("emd: empty point set");
  if (static_cast<int>(a.size()) > guard || static_cast<int>(b.size()) > guard)
    throw DataError("emd: point sets exceed the exact-solver guard of " + std::to_string(guard) +
                    "; subsample the collections first");
  const size_t dim = a[0].size();
  for (const auto& x : a)
    if (x.size() != dim) throw DataError("emd: ragged point set");
  for (const auto& x : b)
    if (x.size() != dim) throw DataError("emd: ragged point set");
  std::vector<double> cost(a.size() * b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) {
      double s = 0.0;
      for (size_t k = 0; k < dim; ++k) {
        const double d = a[i][k] - b[j][k];
        s += d * d;
      }
      cost[i * b.size() + j] = std::sqrt(s);
    }
  std::vector<double> supply(a.size(), 1.0 / static_cast<double>(a.size()));
  std::vector<double> demand(b.size(), 1.0 / static_cast<double>(b.size()));
  detail::TransportationSolver solver(supply, demand, cost);
  return solver.solve();
}

// ---- permutation tests ----

namespace detail {

inline double permanova_f(const DissimilarityMatrix& m, const std::vector<int>& labels) {
  const std::int64_t n = m.n;
  double ss_total = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = i + 1; j < n; ++j) ss_total += m.at(i, j) * m.at(i, j);
  ss_total /= static_cast<double>(n);
  double ss_within = 0.0;
  for (int g = 0; g <= 1; ++g) {
    double ss = 0.0;
    std::int64_t ng = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (labels[static_cast<size_t>(i)] != g) continue;
      ++ng;
      for (std::int64_t j = i + 1; j < n; ++j)
        if (labels[static_cast<size_t>(j)] == g) ss += m.at(i, j) * m.at(i, j);
    }
    if (ng < 2) throw DataError("permanova: each group needs at least 2 members");
    ss_within += ss / static_cast<double>(ng);
  }
  const double ss_between = ss_total - ss_within;
  return (ss_between / 1.0) / (ss_within / static_cast<double>(n - 2));
}

// Principal-coordinate embedding of a dissimilarity matrix (Gower
// centering), keeping eigenvalues above the floor.
inline std::vector<std::vector<double>> pcoa_embedding(const DissimilarityMatrix& m,
                                                       double eig_floor = 1e-12) {
  const std::int64_t n = m.n;
  Tensor b({n, n});
  std::vector<double> row_mean(static_cast<size_t>(n), 0.0);
  double grand = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      const double v = -0.5 * m.at(i, j) * m.at(i, j);
      b.at(i, j) = v;
      row_mean[static_cast<size_t>(i)] += v / static_cast<double>(n);
      grand += v / static_cast<double>(n * n);
    }
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      b.at(i, j) += grand - row_mean[static_cast<size_t>(i)] - row_mean[static_cast<size_t>(j)];
  Tensor vecs;
  auto evals = symmetric_eigen(b, &vecs);
  std::vector<int> keep;
  for (size_t e = 0; e < evals.size(); ++e)
    if (evals[e] > eig_floor) keep.push_back(static_cast<int>(e));
  std::vector<std::vector<double>> coords(static_cast<size_t>(n),
                                          std::vector<double>(keep.size(), 0.0));
  for (std::int64_t i = 0; i < n; ++i)
    for (size_t c = 0; c < keep.size(); ++c)
      coords[static_cast<size_t>(i)][c] =
          vecs.at(i, keep[c]) * std::sqrt(evals[static_cast<size_t>(keep[c])]);
  return coords;
}

inline std::vector<double> spatial_median(const std::vector<const std::vector<double>*>& pts) {
  const size_t d = pts[0]->size();
  std::vector<double> y(d, 0.0);
  for (const auto* p : pts)
    for (size_t k = 0; k < d; ++k) y[k] += (*p)[k];
  for (auto& v : y) v /= static_cast<double>(pts.size());
  for (int iter = 0; iter < 128; ++iter) {
    std::vector<double> num(d, 0.0);
    double den = 0.0;
    bool at_point = false;
    for (const auto* p : pts) {
      double dist = 0.0;
      for (size_t k = 0; k < d; ++k) dist += ((*p)[k] - y[k]) * ((*p)[k] - y[k]);
      dist = std::sqrt(dist);
      if (dist < 1e-12) {
        at_point = true;
        continue;
      }
      for (size_t k = 0; k < d; ++k) num[k] += (*p)[k] / dist;
      den += 1.0 / dist;
    }
    if (den <= 0.0) break;
    double shift = 0.0;
    for (size_t k = 0; k < d; ++k) {
      const double next = num[k] / den;
      shift += (next - y[k]) * (next - y[k]);
      y[k] = next;
    }
    if (std::sqrt(shift) < 1e-11 && !at_point) break;
    if (std::sqrt(shift) < 1e-13) break;
  }
  return y;
}

inline double permdisp_f(const std::vector<std::vector<double>>& coords,
                         const std::vector<int>& labels) {
  const size_t n = coords.size();
  std::vector<double> dist(n, 0.0);
  std::vector<double> group_mean(2, 0.0);
  std::vector<std::int64_t> group_n(2, 0);
  for (int g = 0; g <= 1; ++g) {
    std::vector<const std::vector<double>*> pts;
    for (size_t i = 0; i < n; ++i)
      if (labels[i] == g) pts.push_back(&coords[i]);
    if (pts.size() < 2) throw DataError("permdisp: each group needs at least 2 members");
    auto med = spatial_median(pts);
    for (size_t i = 0; i < n; ++i) {
      if (labels[i] != g) continue;
      double s = 0.0;
      for (size_t k = 0; k < med.size(); ++k) s += (coords[i][k] - med[k]) * (coords[i][k] - med[k]);
      dist[i] = std::sqrt(s);
      group_mean[static_cast<size_t>(g)] += dist[i];
      ++group_n[static_cast<size_t>(g)];
    }
  }
  for (int g = 0; g <= 1; ++g) group_mean[static_cast<size_t>(g)] /= static_cast<double>(group_n[static_cast<size_t>(g)]);
  double grand = 0.0;
  for (size_t i = 0; i < n; ++i) grand += dist[i];
  grand /= static_cast<double>(n);
  double ss_between = 0.0, ss_within = 0.0;
  for (int g = 0; g <= 1; ++g) {
    const double dm = group_mean[static_cast<size_t>(g)] - grand;
    ss_between += static_cast<double>(group_n[static_cast<size_t>(g)]) * dm * dm;
  }
  for (size_t i = 0; i < n; ++i) {
    const double dd = dist[i] - group_mean[static_cast<size_t>(labels[i])];
    ss_within += dd * dd;
  }
  return (ss_between / 1.0) / (ss_within / static_cast<double>(n - 2));
}

inline double permutation_pvalue(const std::function<double(const std::vector<int>&)>& stat,
                                 const std::vector<int>& labels, int n_perm, std::uint64_t seed) {
  const double observed = stat(labels);
  Rng rng(seed, 808);
  std::vector<int> perm = labels;
  int count = 0;
  for (int p = 0; p < n_perm; ++p) {
    for (size_t i = perm.size() - 1; i > 0; --i)
      std::swap(perm[i], perm[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
    if (stat(perm) >= observed) ++count;
  }
  return static_cast<double>(1 + count) / static_cast<double>(1 + n_perm);
}

}  // namespace detail

inline double permanova(const DissimilarityMatrix& m, int n_perm = 999, std::uint64_t seed = 0) {
  m.validate();
  return detail::permutation_pvalue(
      [&](const std::vector<int>& labels) { return detail::permanova_f(m, labels); }, m.labels,
      n_perm, seed);
}

inline double permdisp(const DissimilarityMatrix& m, int n_perm = 999, std::uint64_t seed = 0) {
  m.validate();
  auto coords = detail::pcoa_embedding(m);
  return detail::permutation_pvalue(
      [&](const std::vector<int>& labels) { return detail::permdisp_f(coords, labels); }, m.labels,
      n_perm, seed);
}

// ---- reconstruction correlation ----

struct ReconstructionCorrelation {
  std::vector<double> per_layer;  // mean per-sample Pearson correlation
  int skipped = 0;                // zero-variance samples
};

inline ReconstructionCorrelation reconstruction_correlation(
    const std::vector<HierarchicalCounts>& original,
    const std::vector<std::vector<std::vector<double>>>& reconstructed) {
  if (original.size() != reconstructed.size())
    throw DataError("reconstruction_correlation: sample count mismatch");
  if (original.empty()) throw DataError("reconstruction_correlation: empty input");
  const size_t L = original[0].layers.size();
  ReconstructionCorrelation out;
  out.per_layer.assign(L, 0.0);
  for (size_t l = 0; l < L; ++l) {
    double acc = 0.0;
    int used = 0;
    for (size_t i = 0; i < original.size(); ++i) {
      const auto& x = original[i].layers[l];
      const auto& y = reconstructed[i][l];
      const size_t k = x.size();
      double mx = 0.0, my = 0.0;
      for (size_t j = 0; j < k; ++j) {
        mx += static_cast<double>(x[j]);
        my += y[j];
      }
      mx /= static_cast<double>(k);
      my /= static_cast<double>(k);
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      for (size_t j = 0; j < k; ++j) {
        const double dx = static_cast<double>(x[j]) - mx;
        const double dy = y[j] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
      }
      if (sxx <= 0.0 || syy <= 0.0) {
        ++out.skipped;
        continue;
      }
      acc += sxy / std::sqrt(sxx * syy);
      ++used;
    }
    out.per_layer[l] = used > 0 ? acc / static_cast<double>(used) : 0.0;
  }
  return out;
}

}  // namespace plntree
