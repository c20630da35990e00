#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cfmplan/diffcore/tape.hpp"

namespace cfmplan::diff {

enum class Activation { identity, gelu };

/// activation(x * W + b). W is (in x out), b is (1 x out).
inline Var dense(Tape& t, Var x, Var w, Var b, Activation act) {
  const Tensor2& xv = t.value(x);
  const Tensor2& wv = t.value(w);
  if (xv.cols != wv.rows) throw DimensionError("dense: input " + xv.shape() + " vs weights " + wv.shape());
  Var y = add_row(t, matmul(t, x, w), b);
  return act == Activation::gelu ? gelu(t, y) : y;
}

/// Eager form of `dense` for callers that do not need gradients.
inline Tensor2 dense_forward(const Tensor2& input, const Tensor2& weights, const Tensor2& bias, Activation act) {
  Tape t(GradMode::none);
  Var y = dense(t, t.constant_ref(input), t.constant_ref(weights), t.constant_ref(bias), act);
  return t.value(y);
}

/// Parameter names of one dense layer: `<prefix>.w`, `<prefix>.b`.
struct DenseParams {
  Var w;
  Var b;
};

template <class Store>
DenseParams dense_params(Tape& t, Store& store, const std::string& prefix) {
  return {t.param(store, prefix + ".w"), t.param(store, prefix + ".b")};
}

inline Var dense(Tape& t, Var x, const DenseParams& p, Activation act) { return dense(t, x, p.w, p.b, act); }

inline void add_dense(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                      bool zero = false) {
  store.add(prefix + ".w", zero ? Tensor2(in, out) : kaiming_uniform(in, out, rng));
  store.add(prefix + ".b", Tensor2(1, out));
}

// ---------------------------------------------------------------------------
// Single-head cross-attention with learned Q/K/V/output projections and a
// residual connection: out = q + softmax(qWq (kvWk)^T / sqrt(d)) (kvWv) Wo.

struct AttentionParams {
  Var wq;
  Var wk;
  Var wv;
  Var wo;
};

template <class Store>
AttentionParams attention_params(Tape& t, Store& store, const std::string& prefix) {
  return {t.param(store, prefix + ".wq"), t.param(store, prefix + ".wk"), t.param(store, prefix + ".wv"),
          t.param(store, prefix + ".wo")};
}

/// Output projection starts at zero so a fresh block is the identity map.
inline void add_attention(ParamStore& store, const std::string& prefix, std::size_t dim, Rng& rng) {
  store.add(prefix + ".wq", kaiming_uniform(dim, dim, rng));
  store.add(prefix + ".wk", kaiming_uniform(dim, dim, rng));
  store.add(prefix + ".wv", kaiming_uniform(dim, dim, rng));
  store.add(prefix + ".wo", Tensor2(dim, dim));
}

/// Projected keys and values; reusable across queries against the same token set.
struct KeyValues {
  Var keys;
  Var values;
};

inline KeyValues project_keys_values(Tape& t, Var tokens, const AttentionParams& p) {
  const Tensor2& kv = t.value(tokens);
  if (kv.rows == 0) throw DimensionError("cross_attention: empty key set");
  if (kv.cols != t.value(p.wk).rows) {
    throw DimensionError("cross_attention: tokens " + kv.shape() + " vs projection " + t.value(p.wk).shape());
  }
  return {matmul(t, tokens, p.wk), matmul(t, tokens, p.wv)};
}

struct AttentionResult {
  Var out;
  Var weights;  // (query rows x key rows), rows sum to 1
};

inline AttentionResult attend(Tape& t, Var query, const KeyValues& kv, const AttentionParams& p) {
  const Tensor2& qv = t.value(query);
  if (qv.cols != t.value(p.wq).rows) {
    throw DimensionError("cross_attention: query " + qv.shape() + " vs projection " + t.value(p.wq).shape());
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(t.value(kv.keys).cols));
  Var q = matmul(t, query, p.wq);
  Var scores = scale(t, matmul_bt(t, q, kv.keys), inv_sqrt_d);
  Var w = softmax_rows(t, scores);
  Var ctx = matmul(t, w, kv.values);
  return {add(t, query, matmul(t, ctx, p.wo)), w};
}

inline AttentionResult cross_attention(Tape& t, Var query, Var keys_values, const AttentionParams& p) {
  if (t.value(query).cols != t.value(keys_values).cols) {
    throw DimensionError("cross_attention: query " + t.value(query).shape() + " vs keys " +
                         t.value(keys_values).shape());
  }
  return attend(t, query, project_keys_values(t, keys_values, p), p);
}

// ---------------------------------------------------------------------------

struct TimeEmbedding {
  std::size_t dim = 64;
  double frequency_base = 1000.0;
};

/// Interleaved [sin(w0 t), cos(w0 t), sin(w1 t), ...] with w_i = base^(i / (dim/2 - 1)), so w_0 = 1.
inline std::vector<double> sinusoidal_embed(double t, const TimeEmbedding& emb) {
  if (emb.dim == 0 || emb.dim % 2 != 0) {
    throw ConfigError("sinusoidal_embed: dim must be even and positive, got " + std::to_string(emb.dim));
  }
  const std::size_t half = emb.dim / 2;
  std::vector<double> out(emb.dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double expo = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    const double w = std::pow(emb.frequency_base, expo);
    out[2 * i] = std::sin(w * t);
    out[2 * i + 1] = std::cos(w * t);
  }
  return out;
}

}  // namespace cfmplan::diff
