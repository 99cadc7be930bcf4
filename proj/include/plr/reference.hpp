#pragma once

// Serial reference implementation, kept deliberately independent of the
// batched tensor/tape machinery. It is the oracle for the cached multi-stream
// forward, provides the depth-only ERL baseline, and evaluates the full
// training objective in double precision for finite-difference probes.

#include <cmath>
#include <vector>

#include "plr/model.hpp"

namespace plr::ref {

// ---- serial kernels (reference side of the OpenMP kernel pair) --------------

template <typename S>
void s_matmul(const S* a, const S* b, S* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) {
      S acc = S(0);
      for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

template <typename S>
void s_softmax_row(S* x, i64 n) {
  S mx = x[0];
  for (i64 j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
  S sum = S(0);
  for (i64 j = 0; j < n; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  for (i64 j = 0; j < n; ++j) x[j] /= sum;
}

template <typename S>
void s_layer_norm_row(const S* x, S* y, i64 n, S eps) {
  S mean = S(0);
  for (i64 j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<S>(n);
  S var = S(0);
  for (i64 j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<S>(n);
  const S inv = S(1) / std::sqrt(var + eps);
  for (i64 j = 0; j < n; ++j) y[j] = (x[j] - mean) * inv;
}

template <typename S>
S s_gelu(S x) {
  const S c = static_cast<S>(0.7978845608028654);
  const S a = static_cast<S>(0.044715);
  return static_cast<S>(0.5) * x *
         (S(1) + std::tanh(c * (x + a * x * x * x)));
}

// ---- model weights in plain buffers ------------------------------------------

template <typename S>
struct Weights {
  i64 d = 0, H = 0, L = 0, T = 0, M = 0, max_len = 0, V = 0, ff = 0;
  bool ln = true;
  bool mors = true;
  std::vector<S> E, P, rpe, trig, gw, gb;
  struct Layer {
    std::vector<S> wq, wk, wv, wo, w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
};

template <typename S>
std::vector<S> widen(const Tensor& t) {
  std::vector<S> out(static_cast<size_t>(t.numel()));
  const float* p = t.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(p[i]);
  return out;
}

template <typename S>
Weights<S> to_weights(const PLRParams& p, const PLRConfig& cfg) {
  Weights<S> w;
  w.d = cfg.d;
  w.H = cfg.H;
  w.L = cfg.L;
  w.T = cfg.T;
  w.M = cfg.M;
  w.max_len = cfg.max_len;
  w.V = cfg.vocab_size;
  w.ff = cfg.ffn_dim();
  w.ln = cfg.use_layernorm_ffn;
  w.mors = cfg.mors_enabled;
  w.E = widen<S>(p.item_emb);
  w.P = widen<S>(p.pos_emb);
  w.rpe = widen<S>(p.rpe);
  w.trig = widen<S>(p.triggers);
  w.gw = widen<S>(p.gate_w);
  w.gb = widen<S>(p.gate_b);
  for (const auto& l : p.layers) {
    typename Weights<S>::Layer lw;
    lw.wq = widen<S>(l.wq);
    lw.wk = widen<S>(l.wk);
    lw.wv = widen<S>(l.wv);
    lw.wo = widen<S>(l.wo);
    lw.w1 = widen<S>(l.w1);
    lw.b1 = widen<S>(l.b1);
    lw.w2 = widen<S>(l.w2);
    lw.b2 = widen<S>(l.b2);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

// ---- unbatched forward ---------------------------------------------------------

template <typename S>
struct Forward {
  const Weights<S>* w = nullptr;
  i64 n = 0;
  std::vector<std::vector<S>> layer_inputs;  // [L][n*d], input to each layer
  std::vector<S> h_enc;                      // [n*d]
  std::vector<S> h0;                         // [d]

  static constexpr S kEps = static_cast<S>(1e-6);

  std::vector<S> norm_or_copy(const S* x, i64 d) const {
    std::vector<S> out(static_cast<size_t>(d));
    if (w->ln) {
      s_layer_norm_row(x, out.data(), d, kEps);
    } else {
      std::copy(x, x + d, out.begin());
    }
    return out;
  }

  void encode(const std::vector<i64>& items) {
    const i64 d = w->d, H = w->H, dh = d / H;
    n = static_cast<i64>(items.size());
    std::vector<S> x(static_cast<size_t>(n * d));
    for (i64 i = 0; i < n; ++i) {
      const i64 pos = w->max_len - n + i;
      for (i64 j = 0; j < d; ++j)
        x[static_cast<size_t>(i * d + j)] =
            w->E[static_cast<size_t>(items[static_cast<size_t>(i)] * d + j)] +
            w->P[static_cast<size_t>(pos * d + j)];
    }
    layer_inputs.clear();
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    for (i64 l = 0; l < w->L; ++l) {
      layer_inputs.push_back(x);
      const auto& lp = w->layers[static_cast<size_t>(l)];
      // per-row pre-norm, projections, causal attention
      std::vector<S> src(static_cast<size_t>(n * d));
      for (i64 i = 0; i < n; ++i) {
        auto row = norm_or_copy(x.data() + i * d, d);
        std::copy(row.begin(), row.end(), src.begin() + i * d);
      }
      std::vector<S> q(static_cast<size_t>(n * d)), k(q), v(q);
      s_matmul(src.data(), lp.wq.data(), q.data(), n, d, d);
      s_matmul(src.data(), lp.wk.data(), k.data(), n, d, d);
      s_matmul(src.data(), lp.wv.data(), v.data(), n, d, d);
      std::vector<S> ctx(static_cast<size_t>(n * d), S(0));
      std::vector<S> scores(static_cast<size_t>(n));
      for (i64 h = 0; h < H; ++h) {
        const i64 off = h * dh;
        for (i64 i = 0; i < n; ++i) {
          for (i64 j = 0; j <= i; ++j) {
            S acc = S(0);
            for (i64 p = 0; p < dh; ++p)
              acc += q[static_cast<size_t>(i * d + off + p)] *
                     k[static_cast<size_t>(j * d + off + p)];
            scores[static_cast<size_t>(j)] = acc * inv_sqrt;
          }
          s_softmax_row(scores.data(), i + 1);
          for (i64 j = 0; j <= i; ++j)
            for (i64 p = 0; p < dh; ++p)
              ctx[static_cast<size_t>(i * d + off + p)] +=
                  scores[static_cast<size_t>(j)] *
                  v[static_cast<size_t>(j * d + off + p)];
        }
      }
      std::vector<S> o(static_cast<size_t>(n * d));
      s_matmul(ctx.data(), lp.wo.data(), o.data(), n, d, d);
      for (i64 i = 0; i < n * d; ++i) x[static_cast<size_t>(i)] += o[static_cast<size_t>(i)];
      if (w->ln) {
        for (i64 i = 0; i < n; ++i) {
          auto f = ffn_row(x.data() + i * d, lp);
          for (i64 j = 0; j < d; ++j) x[static_cast<size_t>(i * d + j)] += f[static_cast<size_t>(j)];
        }
      }
    }
    h_enc.assign(x.begin(), x.end());
    if (w->ln) {
      for (i64 i = 0; i < n; ++i)
        s_layer_norm_row(x.data() + i * d, h_enc.data() + i * d, d, kEps);
    }
    h0.assign(h_enc.begin() + (n - 1) * w->d, h_enc.begin() + n * w->d);
  }

  std::vector<S> ffn_row(const S* xrow, const typename Weights<S>::Layer& lp) const {
    const i64 d = w->d, ff = w->ff;
    auto f = norm_or_copy(xrow, d);
    std::vector<S> h1(static_cast<size_t>(ff));
    s_matmul(f.data(), lp.w1.data(), h1.data(), 1, d, ff);
    for (i64 j = 0; j < ff; ++j)
      h1[static_cast<size_t>(j)] = s_gelu(h1[static_cast<size_t>(j)] + lp.b1[static_cast<size_t>(j)]);
    std::vector<S> h2(static_cast<size_t>(d));
    s_matmul(h1.data(), lp.w2.data(), h2.data(), 1, ff, d);
    for (i64 j = 0; j < d; ++j) h2[static_cast<size_t>(j)] += lp.b2[static_cast<size_t>(j)];
    return h2;
  }

  // One reasoning step against the context and the given prior states of the
  // same stream; everything is recomputed, nothing cached.
  std::vector<S> step(const std::vector<S>& y_prev,
                      const std::vector<std::vector<S>>& prior_states,
                      i64 t) const {
    const i64 d = w->d, H = w->H, dh = d / H;
    const i64 extra = static_cast<i64>(prior_states.size());
    const i64 s_len = n + extra;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    std::vector<S> y = y_prev;
    for (i64 l = 0; l < w->L; ++l) {
      const auto& lp = w->layers[static_cast<size_t>(l)];
      // query: previous state plus the step's RPE, never cached anywhere
      std::vector<S> q_in(static_cast<size_t>(d));
      for (i64 j = 0; j < d; ++j)
        q_in[static_cast<size_t>(j)] =
            y[static_cast<size_t>(j)] + w->rpe[static_cast<size_t>((t - 1) * d + j)];
      auto q_src = norm_or_copy(q_in.data(), d);
      std::vector<S> q(static_cast<size_t>(d));
      s_matmul(q_src.data(), lp.wq.data(), q.data(), 1, d, d);

      // keys/values: layer-l context inputs, then prior post-stack states
      std::vector<S> keys(static_cast<size_t>(s_len * d));
      std::vector<S> vals(static_cast<size_t>(s_len * d));
      for (i64 i = 0; i < n; ++i) {
        auto src = norm_or_copy(
            layer_inputs[static_cast<size_t>(l)].data() + i * d, d);
        s_matmul(src.data(), lp.wk.data(), keys.data() + i * d, 1, d, d);
        s_matmul(src.data(), lp.wv.data(), vals.data() + i * d, 1, d, d);
      }
      for (i64 s = 0; s < extra; ++s) {
        auto src = norm_or_copy(prior_states[static_cast<size_t>(s)].data(), d);
        s_matmul(src.data(), lp.wk.data(), keys.data() + (n + s) * d, 1, d, d);
        s_matmul(src.data(), lp.wv.data(), vals.data() + (n + s) * d, 1, d, d);
      }

      std::vector<S> ctx(static_cast<size_t>(d), S(0));
      std::vector<S> scores(static_cast<size_t>(s_len));
      for (i64 h = 0; h < H; ++h) {
        const i64 off = h * dh;
        for (i64 j = 0; j < s_len; ++j) {
          S acc = S(0);
          for (i64 p = 0; p < dh; ++p)
            acc += q[static_cast<size_t>(off + p)] *
                   keys[static_cast<size_t>(j * d + off + p)];
          scores[static_cast<size_t>(j)] = acc * inv_sqrt;
        }
        s_softmax_row(scores.data(), s_len);
        for (i64 j = 0; j < s_len; ++j)
          for (i64 p = 0; p < dh; ++p)
            ctx[static_cast<size_t>(off + p)] +=
                scores[static_cast<size_t>(j)] *
                vals[static_cast<size_t>(j * d + off + p)];
      }
      std::vector<S> o(static_cast<size_t>(d));
      s_matmul(ctx.data(), lp.wo.data(), o.data(), 1, d, d);
      for (i64 j = 0; j < d; ++j) y[static_cast<size_t>(j)] += o[static_cast<size_t>(j)];
      if (w->ln) {
        auto f = ffn_row(y.data(), lp);
        for (i64 j = 0; j < d; ++j) y[static_cast<size_t>(j)] += f[static_cast<size_t>(j)];
      }
    }
    if (w->ln) {
      std::vector<S> out(static_cast<size_t>(d));
      s_layer_norm_row(y.data(), out.data(), d, kEps);
      return out;
    }
    return y;
  }

  // full multi-stream reasoning; result[m][t-1] is the state h_{t,m}
  std::vector<std::vector<std::vector<S>>> reason() const {
    const i64 d = w->d;
    std::vector<std::vector<std::vector<S>>> states(
        static_cast<size_t>(w->M));
    for (i64 m = 0; m < w->M; ++m) {
      std::vector<S> y(static_cast<size_t>(d));
      for (i64 j = 0; j < d; ++j)
        y[static_cast<size_t>(j)] =
            h0[static_cast<size_t>(j)] + w->trig[static_cast<size_t>(m * d + j)];
      std::vector<std::vector<S>>& own = states[static_cast<size_t>(m)];
      for (i64 t = 1; t <= w->T; ++t) {
        y = step(y, own, t);
        own.push_back(y);
      }
    }
    return states;
  }

  // pooled stream outputs and the gated aggregate
  void aggregate(const std::vector<std::vector<std::vector<S>>>& states,
                 std::vector<std::vector<S>>& z_streams,
                 std::vector<S>& gate, std::vector<S>& z_rea) const {
    const i64 d = w->d;
    z_streams.assign(static_cast<size_t>(w->M),
                     std::vector<S>(static_cast<size_t>(d), S(0)));
    for (i64 m = 0; m < w->M; ++m) {
      for (const auto& s : states[static_cast<size_t>(m)])
        for (i64 j = 0; j < d; ++j)
          z_streams[static_cast<size_t>(m)][static_cast<size_t>(j)] += s[static_cast<size_t>(j)];
      for (i64 j = 0; j < d; ++j)
        z_streams[static_cast<size_t>(m)][static_cast<size_t>(j)] /= static_cast<S>(w->T);
    }
    gate.assign(static_cast<size_t>(w->M), S(1) / static_cast<S>(w->M));
    if (w->mors) {
      for (i64 m = 0; m < w->M; ++m) {
        S acc = w->gb[static_cast<size_t>(m)];
        for (i64 j = 0; j < d; ++j)
          acc += w->gw[static_cast<size_t>(m * d + j)] * h0[static_cast<size_t>(j)];
        gate[static_cast<size_t>(m)] = acc;
      }
      s_softmax_row(gate.data(), w->M);
    }
    z_rea.assign(static_cast<size_t>(d), S(0));
    for (i64 m = 0; m < w->M; ++m)
      for (i64 j = 0; j < d; ++j)
        z_rea[static_cast<size_t>(j)] +=
            gate[static_cast<size_t>(m)] * z_streams[static_cast<size_t>(m)][static_cast<size_t>(j)];
  }
};

// ---- depth-only ERL baseline ---------------------------------------------------
// Directly coded single-trajectory reasoner: no triggers, no gate; the output
// is the average of the step states.

template <typename S>
struct ErlResult {
  std::vector<S> h0;
  std::vector<S> z;
};

template <typename S>
ErlResult<S> erl_forward(const Weights<S>& w, const std::vector<i64>& items) {
  Forward<S> f;
  f.w = &w;
  f.encode(items);
  std::vector<std::vector<S>> states;
  std::vector<S> y = f.h0;
  for (i64 t = 1; t <= w.T; ++t) {
    y = f.step(y, states, t);
    states.push_back(y);
  }
  ErlResult<S> out;
  out.h0 = f.h0;
  out.z.assign(static_cast<size_t>(w.d), S(0));
  for (const auto& s : states)
    for (i64 j = 0; j < w.d; ++j) out.z[static_cast<size_t>(j)] += s[static_cast<size_t>(j)];
  for (i64 j = 0; j < w.d; ++j) out.z[static_cast<size_t>(j)] /= static_cast<S>(w.T);
  return out;
}

// ---- double-precision objective (dropout off) ----------------------------------

struct ObjectiveConfig {
  float lambda_kl = 0.1f;
  float temperature = 1.0f;
  int kl_sign = -1;
  bool rcl_enabled = true;
  bool kl_enabled = true;
};

// Evaluates the full training objective at the current parameter values with
// both dropout views identical (masks all ones).
double objective_f64(const PLRParams& params, const PLRConfig& cfg,
                     const ObjectiveConfig& loss_cfg,
                     const std::vector<std::vector<i64>>& contexts,
                     const std::vector<i64>& targets);

}  // namespace plr::ref
