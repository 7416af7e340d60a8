#pragma once

// Neural building blocks behind the generative and variational
// parameterizations: named parameter storage, MLPs, recurrent encoders
// (GRU default, LSTM switchable), tempered-sigmoid output bounding, Adam.

#include <map>
#include <string>

#include "plntree/autodiff.hpp"
#include "plntree/rng.hpp"

namespace plntree {

struct ParamStore {
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries;
  std::map<std::string, int> by_name;

  int add(const std::string& name, Tensor init) {
    if (by_name.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    entries.push_back({name, std::move(init)});
    by_name[name] = static_cast<int>(entries.size()) - 1;
    return static_cast<int>(entries.size()) - 1;
  }
  Tensor& value(int h) { return entries[static_cast<size_t>(h)].value; }
  const Tensor& value(int h) const { return entries[static_cast<size_t>(h)].value; }
  int size() const { return static_cast<int>(entries.size()); }
};

// All parameters bound as differentiable leaves on one tape.
struct Bound {
  Tape* tape = nullptr;
  std::vector<Var> vars;
  Var operator[](int h) const { return vars[static_cast<size_t>(h)]; }
};

inline Bound bind_params(Tape& tape, const ParamStore& store) {
  Bound b;
  b.tape = &tape;
  b.vars.reserve(static_cast<size_t>(store.size()));
  for (const auto& e : store.entries) b.vars.push_back(tape.leaf(e.value, true));
  return b;
}

inline Tensor uniform_init(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(1, fan_in)));
  for (auto& x : t.v) x = rng.uniform(-bound, bound);
  return t;
}

// ---- tempered sigmoid ----

struct TemperedSigmoid {
  double lo = -100.0;
  double hi = 25.0;
  double slope = 1.0;

  TemperedSigmoid() = default;
  TemperedSigmoid(double m, double M, double s) : lo(m), hi(M), slope(s) {
    if (!(lo < hi) || !(slope > 0.0))
      throw std::invalid_argument("TemperedSigmoid: need m < M and s > 0");
  }

  // The sigmoid is clamped away from {0,1} so the output stays strictly
  // inside (lo, hi) even where double precision saturates.
  static constexpr double kEdge = 1e-13;

  Var bound(Tape& t, Var x) const {
    Var shifted = t.scale(t.sub(x, t.constant(0.5 * (lo + hi))), slope);
    Var sig = t.clamp(t.sigmoid(shifted), kEdge, 1.0 - kEdge);
    return t.add(t.scale(sig, hi - lo), t.constant(lo));
  }
  double bound(double x) const {
    const double z = slope * (x - 0.5 * (lo + hi));
    const double sig = std::min(1.0 - kEdge, std::max(kEdge, 1.0 / (1.0 + std::exp(-z))));
    return lo + (hi - lo) * sig;
  }

  // Preimage of a target output; the midpoint when the target is outside.
  double inverse(double y) const {
    if (!(y > lo && y < hi)) return 0.5 * (lo + hi);
    return 0.5 * (lo + hi) + std::log((y - lo) / (hi - y)) / slope;
  }
};

// ---- MLP ----

enum class Activation { Tanh, Softplus, Sigmoid };

struct MlpSpec {
  int input_dim = 0;
  int output_dim = 0;
  int n_hidden_layers = 0;   // 0 = affine map
  int hidden_width = 0;      // fixed by context; only depth is tuned
  Activation activation = Activation::Tanh;
};

struct Mlp {
  MlpSpec spec;
  std::vector<int> weights;
  std::vector<int> biases;

  static Mlp create(ParamStore& store, const std::string& prefix, MlpSpec spec, Rng& rng) {
    if (spec.n_hidden_layers < 0 || spec.input_dim <= 0 || spec.output_dim <= 0 ||
        (spec.n_hidden_layers > 0 && spec.hidden_width <= 0))
      throw std::invalid_argument("Mlp: invalid spec for " + prefix);
    Mlp m;
    m.spec = spec;
    int in = spec.input_dim;
    for (int l = 0; l <= spec.n_hidden_layers; ++l) {
      const int out = (l == spec.n_hidden_layers) ? spec.output_dim : spec.hidden_width;
      m.weights.push_back(store.add(prefix + ".W" + std::to_string(l), uniform_init({in, out}, in, rng)));
      m.biases.push_back(store.add(prefix + ".b" + std::to_string(l), Tensor({out})));
      in = out;
    }
    return m;
  }

  // x: [B, input_dim] or [input_dim]; hidden layers use the configured
  // activation, output is linear.
  Var forward(Tape& t, const Bound& p, Var x) const {
    const bool vec = t.val(x).rank() == 1;
    Var h = vec ? t.reshape(x, {1, t.val(x).dim(0)}) : x;
    for (size_t l = 0; l < weights.size(); ++l) {
      h = t.add(t.matmul(h, p[weights[l]]), p[biases[l]]);
      if (l + 1 < weights.size()) {
        switch (spec.activation) {
          case Activation::Tanh: h = t.tanh(h); break;
          case Activation::Softplus: h = t.softplus(h); break;
          case Activation::Sigmoid: h = t.sigmoid(h); break;
        }
      }
    }
    return vec ? t.reshape(h, {spec.output_dim}) : h;
  }
};

// ---- recurrent encoders ----

enum class EmbedderKind { Gru, Lstm };

struct GruSpec {
  int input_dim = 0;       // padded layer width
  int hidden_size = 0;
  int n_stacked_layers = 1;
  int embedding_dim = 0;   // E, via a final linear map
  EmbedderKind kind = EmbedderKind::Gru;
};

struct GruEncoder {
  GruSpec spec;
  // Per stacked layer: input->gates, hidden->gates, and the two bias vectors.
  std::vector<int> w_ih, w_hh, b_ih, b_hh;
  int w_out = -1, b_out = -1;

  static GruEncoder create(ParamStore& store, const std::string& prefix, GruSpec spec, Rng& rng) {
    if (spec.input_dim <= 0 || spec.hidden_size <= 0 || spec.n_stacked_layers <= 0 ||
        spec.embedding_dim <= 0)
      throw std::invalid_argument("GruEncoder: invalid spec for " + prefix);
    GruEncoder g;
    g.spec = spec;
    const int gates = spec.kind == EmbedderKind::Gru ? 3 : 4;
    for (int l = 0; l < spec.n_stacked_layers; ++l) {
      const int in = (l == 0) ? spec.input_dim : spec.hidden_size;
      const std::string lp = prefix + ".l" + std::to_string(l);
      g.w_ih.push_back(store.add(lp + ".w_ih", uniform_init({in, gates * spec.hidden_size}, in, rng)));
      g.w_hh.push_back(store.add(lp + ".w_hh",
                                 uniform_init({spec.hidden_size, gates * spec.hidden_size}, spec.hidden_size, rng)));
      g.b_ih.push_back(store.add(lp + ".b_ih", Tensor({gates * spec.hidden_size})));
      g.b_hh.push_back(store.add(lp + ".b_hh", Tensor({gates * spec.hidden_size})));
    }
    g.w_out = store.add(prefix + ".w_out",
                        uniform_init({spec.hidden_size, spec.embedding_dim}, spec.hidden_size, rng));
    g.b_out = store.add(prefix + ".b_out", Tensor({spec.embedding_dim}));
    return g;
  }

  // Runs the recurrence over `steps` inputs of shape [B, input_dim] and
  // returns the embedding E after every prefix: out[l] encodes steps 0..l.
  std::vector<Var> encode_prefixes(Tape& t, const Bound& p, const std::vector<Var>& steps) const {
    if (steps.empty()) throw std::invalid_argument("GruEncoder: empty sequence");
    const std::int64_t bs = t.val(steps[0]).dim(0);
    const int H = spec.hidden_size;
    std::vector<Var> h(static_cast<size_t>(spec.n_stacked_layers));
    std::vector<Var> c(static_cast<size_t>(spec.n_stacked_layers));
    for (auto& hv : h) hv = t.constant(Tensor({bs, H}));
    for (auto& cv : c) cv = t.constant(Tensor({bs, H}));
    std::vector<Var> out;
    out.reserve(steps.size());
    for (const Var& xin : steps) {
      Var x = xin;
      for (int l = 0; l < spec.n_stacked_layers; ++l) {
        auto& hl = h[static_cast<size_t>(l)];
        if (spec.kind == EmbedderKind::Gru) {
          Var gi = t.add(t.matmul(x, p[w_ih[static_cast<size_t>(l)]]), p[b_ih[static_cast<size_t>(l)]]);
          Var gh = t.add(t.matmul(hl, p[w_hh[static_cast<size_t>(l)]]), p[b_hh[static_cast<size_t>(l)]]);
          Var r = t.sigmoid(t.add(t.slice_cols(gi, 0, H), t.slice_cols(gh, 0, H)));
          Var z = t.sigmoid(t.add(t.slice_cols(gi, H, H), t.slice_cols(gh, H, H)));
          Var n = t.tanh(t.add(t.slice_cols(gi, 2 * H, H), t.mul(r, t.slice_cols(gh, 2 * H, H))));
          Var one_minus_z = t.sub(t.constant(1.0), z);
          hl = t.add(t.mul(one_minus_z, n), t.mul(z, hl));
        } else {
          auto& cl = c[static_cast<size_t>(l)];
          Var g = t.add(t.add(t.matmul(x, p[w_ih[static_cast<size_t>(l)]]), p[b_ih[static_cast<size_t>(l)]]),
                        t.add(t.matmul(hl, p[w_hh[static_cast<size_t>(l)]]), p[b_hh[static_cast<size_t>(l)]]));
          Var i = t.sigmoid(t.slice_cols(g, 0, H));
          Var f = t.sigmoid(t.slice_cols(g, H, H));
          Var gg = t.tanh(t.slice_cols(g, 2 * H, H));
          Var o = t.sigmoid(t.slice_cols(g, 3 * H, H));
          cl = t.add(t.mul(f, cl), t.mul(i, gg));
          hl = t.mul(o, t.tanh(cl));
        }
        x = hl;
      }
      out.push_back(t.add(t.matmul(h.back(), p[w_out]), p[b_out]));
    }
    return out;
  }
};

// ---- Adam ----

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor> m, v;
  std::int64_t step = 0;

  void init(const ParamStore& store) {
    m.clear();
    v.clear();
    for (const auto& e : store.entries) {
      m.emplace_back(e.value.shape);
      v.emplace_back(e.value.shape);
    }
    step = 0;
  }

  // Applies one update. Non-finite gradients reject the whole step and
  // return false; parameters are untouched. `trainable` may mask entries.
  bool update(ParamStore& store, const std::vector<Tensor>& grads,
              const std::vector<char>* trainable = nullptr) {
    for (size_t i = 0; i < grads.size(); ++i) {
      if (trainable && !(*trainable)[i]) continue;
      if (!grads[i].all_finite()) return false;
    }
    ++step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (size_t i = 0; i < grads.size(); ++i) {
      if (trainable && !(*trainable)[i]) continue;
      Tensor& p = store.entries[i].value;
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        const double g = grads[i].v[static_cast<size_t>(j)];
        double& mj = m[i].v[static_cast<size_t>(j)];
        double& vj = v[i].v[static_cast<size_t>(j)];
        mj = cfg.beta1 * mj + (1.0 - cfg.beta1) * g;
        vj = cfg.beta2 * vj + (1.0 - cfg.beta2) * g * g;
        p.v[static_cast<size_t>(j)] -= cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      }
    }
    return true;
  }
};

}  // namespace plntree
