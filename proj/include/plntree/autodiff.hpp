#pragma once

// Tape-based reverse-mode differentiation over dense tensors. The primitive
// set is fixed: elementwise arithmetic, matmul, exp/log/softplus/sigmoid/tanh,
// softmax and logsumexp over the last axis, reductions, clamp/max, concat,
// slice/gather, outer products, diagonal embed/extract, trace, Cholesky and
// triangular solves. Everything else is composed from these.

#include <functional>
#include <utility>

#include "plntree/tensor.hpp"

namespace plntree {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  Var leaf(Tensor t, bool requires_grad = false) {
    return push(std::move(t), requires_grad, nullptr);
  }
  Var constant(Tensor t) { return leaf(std::move(t), false); }
  Var constant(double x) { return leaf(Tensor::scalar(x), false); }

  const Tensor& val(Var a) const { return nodes_[static_cast<size_t>(a.id)].val; }
  bool requires_grad(Var a) const { return nodes_[static_cast<size_t>(a.id)].needs_grad; }

  // Zero tensor of the right shape if the node was never touched in backward.
  const Tensor& grad(Var a) {
    Node& n = nodes_[static_cast<size_t>(a.id)];
    if (n.grad.v.empty()) n.grad = Tensor(n.val.shape);
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  void backward(Var out) {
    Node& o = nodes_[static_cast<size_t>(out.id)];
    if (o.val.numel() != 1)
      throw std::invalid_argument("backward: output must be scalar, got shape " + shape_str(o.val));
    gbuf(out.id).v[0] = 1.0;
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.back || n.grad.v.empty()) continue;
      n.back();
    }
  }

  // ---- elementwise binary ops (same shape, scalar, or [B,*] op [*]) ----

  Var add(Var a, Var b) { return binary(a, b, BinKind::Add); }
  Var sub(Var a, Var b) { return binary(a, b, BinKind::Sub); }
  Var mul(Var a, Var b) { return binary(a, b, BinKind::Mul); }

  Var scale(Var a, double c) {
    const Tensor& x = val(a);
    Tensor out = x;
    for (auto& e : out.v) e *= c;
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, c] {
        Tensor& ga = gbuf(a.id);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga.v[static_cast<size_t>(i)] += c * gr.v[static_cast<size_t>(i)];
      });
    }
    return r;
  }

  Var neg(Var a) { return scale(a, -1.0); }

  // ---- elementwise unary ----

  Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); },
                 [](double x, double y) { (void)x; return y; });
  }
  Var log(Var a) {
    return unary(a, [](double x) { return std::log(x); },
                 [](double x, double) { return 1.0 / x; });
  }
  Var softplus(Var a) {
    return unary(a,
                 [](double x) { return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0))); },
                 [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
  }
  Var sigmoid(Var a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](double, double y) { return y * (1.0 - y); });
  }
  Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double, double y) { return 1.0 - y * y; });
  }

  Var clamp(Var a, double lo, double hi) {
    return unary(a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                 [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
  }

  Var vmax(Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    if (!x.same_shape(y)) throw std::invalid_argument("vmax: shape mismatch");
    Tensor out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i)
      out.v[static_cast<size_t>(i)] = std::max(x.v[static_cast<size_t>(i)], y.v[static_cast<size_t>(i)]);
    const bool rg = requires_grad(a) || requires_grad(b);
    Var r = push(std::move(out), rg, nullptr);
    if (rg) {
      set_back(r, [this, a, b, r] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        if (requires_grad(a)) {
          Tensor& ga = gbuf(a.id);
          for (std::int64_t i = 0; i < gr.numel(); ++i)
            if (x.v[static_cast<size_t>(i)] >= y.v[static_cast<size_t>(i)])
              ga.v[static_cast<size_t>(i)] += gr.v[static_cast<size_t>(i)];
        }
        if (requires_grad(b)) {
          Tensor& gb = gbuf(b.id);
          for (std::int64_t i = 0; i < gr.numel(); ++i)
            if (y.v[static_cast<size_t>(i)] > x.v[static_cast<size_t>(i)])
              gb.v[static_cast<size_t>(i)] += gr.v[static_cast<size_t>(i)];
        }
      });
    }
    return r;
  }

  // ---- matmul ----

  // [m,k]x[k,n], [B,k]x[k,n] treated as matrix product, or batched
  // [B,m,k]x[B,k,n].
  Var matmul(Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    Tensor out;
    if (x.rank() == 2 && y.rank() == 2) {
      if (x.dim(1) != y.dim(0)) throw std::invalid_argument("matmul: inner dims " + shape_str(x) + " vs " + shape_str(y));
      out = Tensor({x.dim(0), y.dim(1)});
      matmul_plain(x.v.data(), y.v.data(), out.v.data(), x.dim(0), x.dim(1), y.dim(1));
    } else if (x.rank() == 3 && y.rank() == 3) {
      if (x.dim(0) != y.dim(0) || x.dim(2) != y.dim(1))
        throw std::invalid_argument("matmul(batched): " + shape_str(x) + " vs " + shape_str(y));
      out = Tensor({x.dim(0), x.dim(1), y.dim(2)});
      const std::int64_t m = x.dim(1), k = x.dim(2), n = y.dim(2);
      for (std::int64_t bb = 0; bb < x.dim(0); ++bb)
        matmul_plain(x.v.data() + bb * m * k, y.v.data() + bb * k * n, out.v.data() + bb * m * n, m, k, n);
    } else {
      throw std::invalid_argument("matmul: unsupported ranks " + shape_str(x) + " vs " + shape_str(y));
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    Var r = push(std::move(out), rg, nullptr);
    if (rg) {
      set_back(r, [this, a, b, r] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        if (x.rank() == 2) {
          const std::int64_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
          if (requires_grad(a)) {  // gA += G * B^T
            Tensor& ga = gbuf(a.id);
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < n; ++j) {
                const double g = gr.at(i, j);
                if (g == 0.0) continue;
                for (std::int64_t p = 0; p < k; ++p) ga.at(i, p) += g * y.at(p, j);
              }
          }
          if (requires_grad(b)) {  // gB += A^T * G
            Tensor& gb = gbuf(b.id);
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t p = 0; p < k; ++p) {
                const double av = x.at(i, p);
                if (av == 0.0) continue;
                for (std::int64_t j = 0; j < n; ++j) gb.at(p, j) += av * gr.at(i, j);
              }
          }
        } else {
          const std::int64_t bs = x.dim(0), m = x.dim(1), k = x.dim(2), n = y.dim(2);
          for (std::int64_t bb = 0; bb < bs; ++bb) {
            if (requires_grad(a)) {
              Tensor& ga = gbuf(a.id);
              for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                  const double g = gr.at(bb, i, j);
                  if (g == 0.0) continue;
                  for (std::int64_t p = 0; p < k; ++p) ga.at(bb, i, p) += g * y.at(bb, p, j);
                }
            }
            if (requires_grad(b)) {
              Tensor& gb = gbuf(b.id);
              for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t p = 0; p < k; ++p) {
                  const double av = x.at(bb, i, p);
                  if (av == 0.0) continue;
                  for (std::int64_t j = 0; j < n; ++j) gb.at(bb, p, j) += av * gr.at(bb, i, j);
                }
            }
          }
        }
      });
    }
    return r;
  }

  // ---- softmax / logsumexp over the last axis ----

  Var softmax(Var a) {
    const Tensor& x = val(a);
    Tensor out = x;
    apply_rows(out, [](double* row, std::int64_t d) {
      double mx = row[0];
      for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
      double s = 0.0;
      for (std::int64_t i = 0; i < d; ++i) {
        row[i] = std::exp(row[i] - mx);
        s += row[i];
      }
      for (std::int64_t i = 0; i < d; ++i) row[i] /= s;
    });
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r] {
        const Tensor& p = val(r);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        const std::int64_t d = p.shape.back();
        const std::int64_t rows = p.numel() / d;
        for (std::int64_t rr = 0; rr < rows; ++rr) {
          const double* pr = p.v.data() + rr * d;
          const double* gg = gr.v.data() + rr * d;
          double dot = 0.0;
          for (std::int64_t i = 0; i < d; ++i) dot += pr[i] * gg[i];
          double* out = ga.v.data() + rr * d;
          for (std::int64_t i = 0; i < d; ++i) out[i] += pr[i] * (gg[i] - dot);
        }
      });
    }
    return r;
  }

  // rank-1 -> scalar, rank-2 [B,d] -> [B].
  Var logsumexp(Var a) {
    const Tensor& x = val(a);
    const std::int64_t d = x.shape.back();
    const std::int64_t rows = x.numel() / d;
    Tensor out(x.rank() == 1 ? std::vector<std::int64_t>{} : std::vector<std::int64_t>{rows});
    if (out.v.empty()) out.v.assign(1, 0.0);
    for (std::int64_t rr = 0; rr < rows; ++rr) {
      const double* row = x.v.data() + rr * d;
      double mx = row[0];
      for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
      double s = 0.0;
      for (std::int64_t i = 0; i < d; ++i) s += std::exp(row[i] - mx);
      out.v[static_cast<size_t>(rr)] = mx + std::log(s);
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, d, rows] {
        const Tensor& x = val(a);
        const Tensor& lse = val(r);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t rr = 0; rr < rows; ++rr) {
          const double g = gr.v[static_cast<size_t>(rr)];
          if (g == 0.0) continue;
          const double* row = x.v.data() + rr * d;
          double* out = ga.v.data() + rr * d;
          const double l = lse.v[static_cast<size_t>(rr)];
          for (std::int64_t i = 0; i < d; ++i) out[i] += g * std::exp(row[i] - l);
        }
      });
    }
    return r;
  }

  // ---- reductions ----

  Var sum(Var a) {
    const Tensor& x = val(a);
    double s = 0.0;
    for (double e : x.v) s += e;
    Var r = push(Tensor::scalar(s), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r] {
        const double g = nodes_[static_cast<size_t>(r.id)].grad.v[0];
        Tensor& ga = gbuf(a.id);
        for (auto& e : ga.v) e += g;
      });
    }
    return r;
  }

  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).numel())); }

  // rank-2: axis 0 -> [n], axis 1 -> [m]; rank-3: axis 1 -> [B,n], axis 2 -> [B,m].
  Var sum_axis(Var a, int axis) {
    const Tensor& x = val(a);
    Tensor out;
    if (x.rank() == 2) {
      const std::int64_t m = x.dim(0), n = x.dim(1);
      if (axis == 0) {
        out = Tensor({n});
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) out.at(j) += x.at(i, j);
      } else {
        out = Tensor({m});
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) out.at(i) += x.at(i, j);
      }
    } else if (x.rank() == 3) {
      const std::int64_t bs = x.dim(0), m = x.dim(1), n = x.dim(2);
      if (axis == 1) {
        out = Tensor({bs, n});
        for (std::int64_t b = 0; b < bs; ++b)
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out.at(b, j) += x.at(b, i, j);
      } else if (axis == 2) {
        out = Tensor({bs, m});
        for (std::int64_t b = 0; b < bs; ++b)
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out.at(b, i) += x.at(b, i, j);
      } else {
        throw std::invalid_argument("sum_axis: rank-3 supports axis 1 or 2");
      }
    } else {
      throw std::invalid_argument("sum_axis: rank-2 or rank-3 input required");
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, axis] {
        const Tensor& x = val(a);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        if (x.rank() == 2) {
          const std::int64_t m = x.dim(0), n = x.dim(1);
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) ga.at(i, j) += (axis == 0) ? gr.at(j) : gr.at(i);
        } else {
          const std::int64_t bs = x.dim(0), m = x.dim(1), n = x.dim(2);
          for (std::int64_t b = 0; b < bs; ++b)
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < n; ++j)
                ga.at(b, i, j) += (axis == 1) ? gr.at(b, j) : gr.at(b, i);
        }
      });
    }
    return r;
  }

  // ---- shape ops ----

  Var concat_cols(Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    Tensor out;
    if (x.rank() == 1 && y.rank() == 1) {
      out = Tensor({x.dim(0) + y.dim(0)});
      std::copy(x.v.begin(), x.v.end(), out.v.begin());
      std::copy(y.v.begin(), y.v.end(), out.v.begin() + x.dim(0));
    } else if (x.rank() == 2 && y.rank() == 2 && x.dim(0) == y.dim(0)) {
      out = Tensor({x.dim(0), x.dim(1) + y.dim(1)});
      for (std::int64_t i = 0; i < x.dim(0); ++i) {
        std::copy(x.v.begin() + i * x.dim(1), x.v.begin() + (i + 1) * x.dim(1),
                  out.v.begin() + i * out.dim(1));
        std::copy(y.v.begin() + i * y.dim(1), y.v.begin() + (i + 1) * y.dim(1),
                  out.v.begin() + i * out.dim(1) + x.dim(1));
      }
    } else {
      throw std::invalid_argument("concat_cols: incompatible " + shape_str(x) + " vs " + shape_str(y));
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    Var r = push(std::move(out), rg, nullptr);
    if (rg) {
      set_back(r, [this, a, b, r] {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        if (x.rank() == 1) {
          if (requires_grad(a)) {
            Tensor& ga = gbuf(a.id);
            for (std::int64_t i = 0; i < x.dim(0); ++i) ga.at(i) += gr.at(i);
          }
          if (requires_grad(b)) {
            Tensor& gb = gbuf(b.id);
            for (std::int64_t i = 0; i < y.dim(0); ++i) gb.at(i) += gr.at(x.dim(0) + i);
          }
        } else {
          for (std::int64_t i = 0; i < x.dim(0); ++i) {
            if (requires_grad(a)) {
              Tensor& ga = gbuf(a.id);
              for (std::int64_t j = 0; j < x.dim(1); ++j) ga.at(i, j) += gr.at(i, j);
            }
            if (requires_grad(b)) {
              Tensor& gb = gbuf(b.id);
              for (std::int64_t j = 0; j < y.dim(1); ++j) gb.at(i, j) += gr.at(i, x.dim(1) + j);
            }
          }
        }
      });
    }
    return r;
  }

  Var slice_cols(Var a, std::int64_t start, std::int64_t len) {
    std::vector<std::int64_t> idx(static_cast<size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    return gather_cols(a, idx);
  }

  Var gather_cols(Var a, std::vector<std::int64_t> idx) {
    const Tensor& x = val(a);
    const std::int64_t c = static_cast<std::int64_t>(idx.size());
    Tensor out;
    if (x.rank() == 1) {
      out = Tensor({c});
      for (std::int64_t j = 0; j < c; ++j) out.at(j) = x.at(idx[static_cast<size_t>(j)]);
    } else if (x.rank() == 2) {
      out = Tensor({x.dim(0), c});
      for (std::int64_t i = 0; i < x.dim(0); ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, idx[static_cast<size_t>(j)]);
    } else {
      throw std::invalid_argument("gather_cols: rank-1 or rank-2 input required");
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, idx = std::move(idx)] {
        const Tensor& x = val(a);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        const std::int64_t c = static_cast<std::int64_t>(idx.size());
        if (x.rank() == 1) {
          for (std::int64_t j = 0; j < c; ++j) ga.at(idx[static_cast<size_t>(j)]) += gr.at(j);
        } else {
          for (std::int64_t i = 0; i < x.dim(0); ++i)
            for (std::int64_t j = 0; j < c; ++j) ga.at(i, idx[static_cast<size_t>(j)]) += gr.at(i, j);
        }
      });
    }
    return r;
  }

  // x x^T per row: [B,d] -> [B,d,d] (or [d] -> [d,d]).
  Var outer(Var a) {
    const Tensor& x = val(a);
    const std::int64_t bs = x.rank() == 2 ? x.dim(0) : 1;
    const std::int64_t d = x.shape.back();
    Tensor out(x.rank() == 2 ? std::vector<std::int64_t>{bs, d, d} : std::vector<std::int64_t>{d, d});
    for (std::int64_t b = 0; b < bs; ++b) {
      const double* row = x.v.data() + b * d;
      double* o = out.v.data() + b * d * d;
      for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j) o[i * d + j] = row[i] * row[j];
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, bs, d] {
        const Tensor& x = val(a);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t b = 0; b < bs; ++b) {
          const double* row = x.v.data() + b * d;
          const double* g = gr.v.data() + b * d * d;
          double* out = ga.v.data() + b * d;
          for (std::int64_t i = 0; i < d; ++i)
            for (std::int64_t j = 0; j < d; ++j) out[i] += (g[i * d + j] + g[j * d + i]) * row[j];
        }
      });
    }
    return r;
  }

  Var diag_embed(Var a) {
    const Tensor& x = val(a);
    const std::int64_t bs = x.rank() == 2 ? x.dim(0) : 1;
    const std::int64_t d = x.shape.back();
    Tensor out(x.rank() == 2 ? std::vector<std::int64_t>{bs, d, d} : std::vector<std::int64_t>{d, d});
    for (std::int64_t b = 0; b < bs; ++b)
      for (std::int64_t i = 0; i < d; ++i) out.v[static_cast<size_t>((b * d + i) * d + i)] = x.v[static_cast<size_t>(b * d + i)];
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, bs, d] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t b = 0; b < bs; ++b)
          for (std::int64_t i = 0; i < d; ++i)
            ga.v[static_cast<size_t>(b * d + i)] += gr.v[static_cast<size_t>((b * d + i) * d + i)];
      });
    }
    return r;
  }

  Var diag_part(Var a) {
    const Tensor& x = val(a);
    const std::int64_t bs = x.rank() == 3 ? x.dim(0) : 1;
    const std::int64_t d = x.shape.back();
    Tensor out(x.rank() == 3 ? std::vector<std::int64_t>{bs, d} : std::vector<std::int64_t>{d});
    for (std::int64_t b = 0; b < bs; ++b)
      for (std::int64_t i = 0; i < d; ++i) out.v[static_cast<size_t>(b * d + i)] = x.v[static_cast<size_t>((b * d + i) * d + i)];
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, bs, d] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t b = 0; b < bs; ++b)
          for (std::int64_t i = 0; i < d; ++i)
            ga.v[static_cast<size_t>((b * d + i) * d + i)] += gr.v[static_cast<size_t>(b * d + i)];
      });
    }
    return r;
  }

  Var trace(Var a) { return a.valid() && val(a).rank() == 3 ? sum_axis(diag_part(a), 1) : sum(diag_part(a)); }

  // Packed lower triangle (row-major, length d(d+1)/2) -> [.,d,d].
  Var pack_lower(Var a, std::int64_t d) {
    const Tensor& x = val(a);
    const std::int64_t packed = d * (d + 1) / 2;
    if (x.shape.back() != packed) throw std::invalid_argument("pack_lower: length mismatch");
    const std::int64_t bs = x.rank() == 2 ? x.dim(0) : 1;
    Tensor out(x.rank() == 2 ? std::vector<std::int64_t>{bs, d, d} : std::vector<std::int64_t>{d, d});
    for (std::int64_t b = 0; b < bs; ++b) {
      const double* row = x.v.data() + b * packed;
      double* o = out.v.data() + b * d * d;
      std::int64_t p = 0;
      for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j <= i; ++j) o[i * d + j] = row[p++];
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, bs, d, packed] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t b = 0; b < bs; ++b) {
          double* out = ga.v.data() + b * packed;
          const double* g = gr.v.data() + b * d * d;
          std::int64_t p = 0;
          for (std::int64_t i = 0; i < d; ++i)
            for (std::int64_t j = 0; j <= i; ++j) out[p++] += g[i * d + j];
        }
      });
    }
    return r;
  }

  // ---- Cholesky and triangular solves ----

  // Symmetrizes internally; reports the failing leading minor on non-SPD input.
  Var cholesky(Var a) {
    const Tensor& x = val(a);
    const std::int64_t bs = x.rank() == 3 ? x.dim(0) : 1;
    const std::int64_t d = x.shape.back();
    if (x.shape[x.shape.size() - 2] != d) throw std::invalid_argument("cholesky: square input required");
    Tensor out = x;
    for (std::int64_t b = 0; b < bs; ++b) {
      double* m = out.v.data() + b * d * d;
      for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < i; ++j) {
          const double s = 0.5 * (m[i * d + j] + m[j * d + i]);
          m[i * d + j] = s;
          m[j * d + i] = s;
        }
      const std::int64_t bad = cholesky_inplace(m, d);
      if (bad >= 0)
        throw NumericalError("cholesky: input not SPD (batch " + std::to_string(b) +
                             ", leading minor " + std::to_string(bad + 1) + ")");
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, bs, d] {
        const Tensor& l = val(r);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        std::vector<double> p(static_cast<size_t>(d * d));
        std::vector<double> tmp(static_cast<size_t>(d * d));
        for (std::int64_t b = 0; b < bs; ++b) {
          const double* L = l.v.data() + b * d * d;
          const double* G = gr.v.data() + b * d * d;
          // P = phi(L^T G): lower triangle, halved diagonal.
          for (std::int64_t i = 0; i < d; ++i)
            for (std::int64_t j = 0; j < d; ++j) {
              double s = 0.0;
              for (std::int64_t k = 0; k < d; ++k) s += L[k * d + i] * G[k * d + j];
              p[static_cast<size_t>(i * d + j)] = (i > j) ? s : (i == j ? 0.5 * s : 0.0);
            }
          // tmp = L^{-T} P  (solve L^T column-wise on P's columns).
          for (std::int64_t c = 0; c < d; ++c) {
            std::vector<double> col(static_cast<size_t>(d));
            for (std::int64_t i = 0; i < d; ++i) col[static_cast<size_t>(i)] = p[static_cast<size_t>(i * d + c)];
            trisolve_lower_t(L, col.data(), d);
            for (std::int64_t i = 0; i < d; ++i) tmp[static_cast<size_t>(i * d + c)] = col[static_cast<size_t>(i)];
          }
          // S = tmp L^{-1}: S L = tmp <=> L^T S^T = tmp^T.
          std::vector<double> sbar(static_cast<size_t>(d * d));
          for (std::int64_t rrow = 0; rrow < d; ++rrow) {
            std::vector<double> row(static_cast<size_t>(d));
            for (std::int64_t i = 0; i < d; ++i) row[static_cast<size_t>(i)] = tmp[static_cast<size_t>(rrow * d + i)];
            trisolve_lower_t(L, row.data(), d);
            for (std::int64_t i = 0; i < d; ++i) sbar[static_cast<size_t>(rrow * d + i)] = row[static_cast<size_t>(i)];
          }
          double* out = ga.v.data() + b * d * d;
          for (std::int64_t i = 0; i < d; ++i)
            for (std::int64_t j = 0; j < d; ++j)
              out[i * d + j] += 0.5 * (sbar[static_cast<size_t>(i * d + j)] + sbar[static_cast<size_t>(j * d + i)]);
        }
      });
    }
    return r;
  }

  // Solve L X = rhs (or L^T X = rhs when transposed); rhs is [.,d] or [.,d,k].
  Var tri_solve(Var lvar, Var rhs, bool transposed = false) {
    const Tensor& l = val(lvar);
    const Tensor& b = val(rhs);
    const std::int64_t bs = l.rank() == 3 ? l.dim(0) : 1;
    const std::int64_t d = l.shape.back();
    const bool rhs_mat = (b.rank() == l.rank());
    const std::int64_t k = rhs_mat ? b.shape.back() : 1;
    Tensor out = b;
    for (std::int64_t bb = 0; bb < bs; ++bb) {
      const double* L = l.v.data() + bb * d * d;
      double* X = out.v.data() + bb * d * k;
      for (std::int64_t c = 0; c < k; ++c) {
        std::vector<double> col(static_cast<size_t>(d));
        for (std::int64_t i = 0; i < d; ++i) col[static_cast<size_t>(i)] = X[i * k + c];
        if (transposed)
          trisolve_lower_t(L, col.data(), d);
        else
          trisolve_lower(L, col.data(), d);
        for (std::int64_t i = 0; i < d; ++i) X[i * k + c] = col[static_cast<size_t>(i)];
      }
    }
    const bool rg = requires_grad(lvar) || requires_grad(rhs);
    Var r = push(std::move(out), rg, nullptr);
    if (rg) {
      set_back(r, [this, lvar, rhs, r, bs, d, k, transposed] {
        const Tensor& l = val(lvar);
        const Tensor& x = val(r);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        for (std::int64_t bb = 0; bb < bs; ++bb) {
          const double* L = l.v.data() + bb * d * d;
          const double* X = x.v.data() + bb * d * k;
          const double* G = gr.v.data() + bb * d * k;
          // bbar = opposite-solve(G)
          std::vector<double> bbar(static_cast<size_t>(d * k));
          for (std::int64_t c = 0; c < k; ++c) {
            std::vector<double> col(static_cast<size_t>(d));
            for (std::int64_t i = 0; i < d; ++i) col[static_cast<size_t>(i)] = G[i * k + c];
            if (transposed)
              trisolve_lower(L, col.data(), d);
            else
              trisolve_lower_t(L, col.data(), d);
            for (std::int64_t i = 0; i < d; ++i) bbar[static_cast<size_t>(i * k + c)] = col[static_cast<size_t>(i)];
          }
          if (requires_grad(rhs)) {
            Tensor& gb = gbuf(rhs.id);
            double* out = gb.v.data() + bb * d * k;
            for (std::int64_t i = 0; i < d * k; ++i) out[i] += bbar[static_cast<size_t>(i)];
          }
          if (requires_grad(lvar)) {
            Tensor& gl = gbuf(lvar.id);
            double* out = gl.v.data() + bb * d * d;
            // gL = -bbar X^T (non-transposed) or -X bbar^T (transposed), lower part.
            for (std::int64_t i = 0; i < d; ++i)
              for (std::int64_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::int64_t c = 0; c < k; ++c)
                  s += transposed ? X[i * k + c] * bbar[static_cast<size_t>(j * k + c)]
                                  : bbar[static_cast<size_t>(i * k + c)] * X[j * k + c];
                out[i * d + j] -= s;
              }
          }
        }
      });
    }
    return r;
  }

  // log|Sigma| = 2 sum log diag chol(Sigma); [.,d,d] -> scalar or [B].
  Var logdet_via_cholesky(Var a) {
    Var l = cholesky(a);
    Var dl = diag_part(l);
    Var logs = log(dl);
    return val(a).rank() == 3 ? scale(sum_axis(logs, 1), 2.0) : scale(sum(logs), 2.0);
  }

  // [m,n] -> [n,m] or [B,m,n] -> [B,n,m].
  Var transpose_last2(Var a) {
    const Tensor& x = val(a);
    const std::int64_t bs = x.rank() == 3 ? x.dim(0) : 1;
    const std::int64_t m = x.shape[x.shape.size() - 2];
    const std::int64_t n = x.shape.back();
    Tensor out(x.rank() == 3 ? std::vector<std::int64_t>{bs, n, m} : std::vector<std::int64_t>{n, m});
    for (std::int64_t b = 0; b < bs; ++b) {
      const double* src = x.v.data() + b * m * n;
      double* dst = out.v.data() + b * m * n;
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, bs, m, n] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t b = 0; b < bs; ++b) {
          const double* g = gr.v.data() + b * m * n;
          double* out = ga.v.data() + b * m * n;
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[i * n + j] += g[j * m + i];
        }
      });
    }
    return r;
  }

  Var reshape(Var a, std::vector<std::int64_t> shape) {
    const Tensor& x = val(a);
    if (Tensor::numel_of(shape) != x.numel())
      throw std::invalid_argument("reshape: element count mismatch for " + shape_str(x));
    Tensor out;
    out.shape = std::move(shape);
    out.v = x.v;
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r] {
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t i = 0; i < gr.numel(); ++i) ga.v[static_cast<size_t>(i)] += gr.v[static_cast<size_t>(i)];
      });
    }
    return r;
  }

  // ---- composite conveniences ----

  Var affine(Var x, Var w, Var bias) { return add(matmul(x, w), bias); }
  Var square(Var a) { return mul(a, a); }
  Var sqrt_pos(Var a) { return exp(scale(log(a), 0.5)); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  enum class BinKind { Add, Sub, Mul };

  Var push(Tensor t, bool needs, std::function<void()> back) {
    nodes_.push_back(Node{std::move(t), Tensor{}, needs, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(Var v, std::function<void()> f) { nodes_[static_cast<size_t>(v.id)].back = std::move(f); }

  Tensor& gbuf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.v.empty()) n.grad = Tensor(n.val.shape);
    return n.grad;
  }

  template <typename F, typename DF>
  Var unary(Var a, F f, DF df) {
    const Tensor& x = val(a);
    Tensor out = x;
    for (auto& e : out.v) e = f(e);
    Var r = push(std::move(out), requires_grad(a), nullptr);
    if (requires_grad(a)) {
      set_back(r, [this, a, r, df] {
        const Tensor& x = val(a);
        const Tensor& y = val(r);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        Tensor& ga = gbuf(a.id);
        for (std::int64_t i = 0; i < x.numel(); ++i)
          ga.v[static_cast<size_t>(i)] += df(x.v[static_cast<size_t>(i)], y.v[static_cast<size_t>(i)]) * gr.v[static_cast<size_t>(i)];
      });
    }
    return r;
  }

  // Broadcast classes: equal shapes; scalar vs tensor; trailing-shape
  // broadcast ([B,d] op [d], [B,m,n] op [m,n]).
  static int broadcast_kind(const Tensor& x, const Tensor& y) {
    if (x.same_shape(y)) return 0;
    if (y.numel() == 1) return 1;  // y scalar
    if (x.numel() == 1) return 2;  // x scalar
    if (x.rank() == y.rank() + 1 &&
        std::equal(y.shape.begin(), y.shape.end(), x.shape.begin() + 1))
      return 3;  // y broadcast over leading dim of x
    if (y.rank() == x.rank() + 1 &&
        std::equal(x.shape.begin(), x.shape.end(), y.shape.begin() + 1))
      return 4;  // x broadcast over leading dim of y
    return -1;
  }

  Var binary(Var a, Var b, BinKind kind) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    const int bk = broadcast_kind(x, y);
    if (bk < 0)
      throw std::invalid_argument("elementwise op: incompatible shapes " + shape_str(x) + " vs " + shape_str(y));
    const Tensor& big = (bk == 2 || bk == 4) ? y : x;
    Tensor out(big.shape);
    const std::int64_t n = out.numel();
    const std::int64_t small_n = (bk == 0) ? n : ((bk == 1 || bk == 2) ? 1 : (bk == 3 ? y.numel() : x.numel()));
    auto xi = [&](std::int64_t i) { return (bk == 2) ? x.v[0] : (bk == 4 ? x.v[static_cast<size_t>(i % small_n)] : x.v[static_cast<size_t>(i)]); };
    auto yi = [&](std::int64_t i) { return (bk == 1) ? y.v[0] : (bk == 3 ? y.v[static_cast<size_t>(i % small_n)] : y.v[static_cast<size_t>(i)]); };
    switch (kind) {
      case BinKind::Add:
        for (std::int64_t i = 0; i < n; ++i) out.v[static_cast<size_t>(i)] = xi(i) + yi(i);
        break;
      case BinKind::Sub:
        for (std::int64_t i = 0; i < n; ++i) out.v[static_cast<size_t>(i)] = xi(i) - yi(i);
        break;
      case BinKind::Mul:
        for (std::int64_t i = 0; i < n; ++i) out.v[static_cast<size_t>(i)] = xi(i) * yi(i);
        break;
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    Var r = push(std::move(out), rg, nullptr);
    if (rg) {
      set_back(r, [this, a, b, r, kind, bk, n, small_n] {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        const Tensor& gr = nodes_[static_cast<size_t>(r.id)].grad;
        auto xv = [&](std::int64_t i) { return (bk == 2) ? x.v[0] : (bk == 4 ? x.v[static_cast<size_t>(i % small_n)] : x.v[static_cast<size_t>(i)]); };
        auto yv = [&](std::int64_t i) { return (bk == 1) ? y.v[0] : (bk == 3 ? y.v[static_cast<size_t>(i % small_n)] : y.v[static_cast<size_t>(i)]); };
        if (requires_grad(a)) {
          Tensor& ga = gbuf(a.id);
          for (std::int64_t i = 0; i < n; ++i) {
            double g = gr.v[static_cast<size_t>(i)];
            if (kind == BinKind::Mul) g *= yv(i);
            const std::int64_t tgt = (bk == 2) ? 0 : (bk == 4 ? i % small_n : i);
            ga.v[static_cast<size_t>(tgt)] += g;
          }
        }
        if (requires_grad(b)) {
          Tensor& gb = gbuf(b.id);
          for (std::int64_t i = 0; i < n; ++i) {
            double g = gr.v[static_cast<size_t>(i)];
            if (kind == BinKind::Sub) g = -g;
            if (kind == BinKind::Mul) g = gr.v[static_cast<size_t>(i)] * xv(i);
            const std::int64_t tgt = (bk == 1) ? 0 : (bk == 3 ? i % small_n : i);
            gb.v[static_cast<size_t>(tgt)] += g;
          }
        }
      });
    }
    return r;
  }

  template <typename F>
  static void apply_rows(Tensor& t, F f) {
    const std::int64_t d = t.shape.back();
    const std::int64_t rows = t.numel() / d;
    for (std::int64_t r = 0; r < rows; ++r) f(t.v.data() + r * d, d);
  }

  std::vector<Node> nodes_;
};

// Central finite differences against reverse mode; returns the worst
// discrepancy |ad - fd| / max(1, |ad|, |fd|) over all coordinates.
inline double grad_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                         const std::vector<Tensor>& point, double eps = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const auto& t : point) vars.push_back(tape.leaf(t, true));
  Var out = f(tape, vars);
  if (!tape.val(out).all_finite()) throw NumericalError("grad_check: non-finite output at base point");
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(point.size());
  for (auto v : vars) grads.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Tensor>& p) {
    Tape t2;
    std::vector<Var> vs;
    for (const auto& t : p) vs.push_back(t2.leaf(t, false));
    Var o = f(t2, vs);
    const double y = t2.val(o).v[0];
    if (!std::isfinite(y)) throw NumericalError("grad_check: non-finite output at probe point");
    return y;
  };

  double worst = 0.0;
  std::vector<Tensor> probe = point;
  for (size_t pi = 0; pi < point.size(); ++pi) {
    for (std::int64_t i = 0; i < point[pi].numel(); ++i) {
      const double orig = probe[pi].v[static_cast<size_t>(i)];
      probe[pi].v[static_cast<size_t>(i)] = orig + eps;
      const double up = eval(probe);
      probe[pi].v[static_cast<size_t>(i)] = orig - eps;
      const double dn = eval(probe);
      probe[pi].v[static_cast<size_t>(i)] = orig;
      const double fd = (up - dn) / (2.0 * eps);
      const double ad = grads[pi].v[static_cast<size_t>(i)];
      const double err = std::fabs(ad - fd) / std::max({1.0, std::fabs(ad), std::fabs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace plntree
