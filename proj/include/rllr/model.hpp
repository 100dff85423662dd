#pragma once

// Minimal decoder-only attention model in 64-bit floats with hand-written
// reverse-mode gradients (no autograd tape).
//
// Architecture: token + learned positional embeddings, pre-LN blocks
// (LN → causal multi-head attention → residual; LN → 4x GELU MLP → residual),
// a final LN, and up to three linear read-outs: next-token logits ("lm"),
// per-position value estimates ("value"), and a scalar reward read at the
// last position ("reward").
//
// Parameters live in one flat f64 vector with a fixed canonical segment
// order, so checkpoints, gradients, and optimizer state are plain arrays.
// Everything here is deterministic: same checkpoint + tokens → same bits.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "rllr/common.hpp"
#include "rllr/rng.hpp"

namespace rllr {

inline constexpr double kLnEps = 1e-5;

enum class Role : int32_t {
  policy = 0,
  reference = 1,
  reward_label = 2,     // r_phi1
  reward_rationale = 3, // r_phi2
  value = 4,
};

inline const char* role_name(Role r) {
  switch (r) {
    case Role::policy: return "policy";
    case Role::reference: return "reference";
    case Role::reward_label: return "reward_label";
    case Role::reward_rationale: return "reward_rationale";
    case Role::value: return "value";
  }
  throw std::invalid_argument("bad role");
}

struct ModelConfig {
  int32_t vocab_size = 0;
  int32_t context_length = 128;
  int32_t width = 64;
  int32_t layers = 2;
  int32_t heads = 4;
  bool head_lm = true;
  bool head_value = false;
  bool head_reward = false;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    if (vocab_size <= 0) throw std::domain_error("vocab_size must be positive");
    if (context_length <= 0) throw std::domain_error("context_length must be positive");
    if (width <= 0 || layers <= 0 || heads <= 0)
      throw std::domain_error("width/layers/heads must be positive");
    if (width % heads != 0) throw std::domain_error("width must be divisible by heads");
    if (!head_lm && !head_value && !head_reward)
      throw std::domain_error("at least one head required");
  }
};

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct ParamSegment {
  std::string name;
  int64_t offset = 0;
  int64_t size = 0;
};

struct LayerOffsets {
  int64_t ln1_g, ln1_b;
  // Keys carry no bias: softmax scores are invariant to a per-row constant
  // shift, so a key bias would be an exactly-dead parameter.
  int64_t wq, bq, wk, wv, bv, wo, bo;
  int64_t ln2_g, ln2_b;
  int64_t wfc, bfc, wproj, bproj;
};

struct ParamIndex {
  int64_t tok_emb = -1, pos_emb = -1;
  std::vector<LayerOffsets> layer;
  int64_t lnf_g = -1, lnf_b = -1;
  int64_t lm_w = -1, lm_b = -1;
  int64_t value_w = -1, value_b = -1;
  int64_t reward_w = -1, reward_b = -1;
  int64_t total = 0;
  std::vector<ParamSegment> segments;
};

inline ParamIndex param_index(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t V = cfg.vocab_size, C = cfg.context_length, d = cfg.width;
  ParamIndex idx;
  auto add = [&idx](const std::string& name, int64_t size) {
    const int64_t off = idx.total;
    idx.segments.push_back({name, off, size});
    idx.total += size;
    return off;
  };

  idx.tok_emb = add("tok_emb", V * d);
  idx.pos_emb = add("pos_emb", C * d);
  for (int32_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerOffsets lo{};
    lo.ln1_g = add(p + "ln1_g", d);
    lo.ln1_b = add(p + "ln1_b", d);
    lo.wq = add(p + "wq", d * d);
    lo.bq = add(p + "bq", d);
    lo.wk = add(p + "wk", d * d);
    lo.wv = add(p + "wv", d * d);
    lo.bv = add(p + "bv", d);
    lo.wo = add(p + "wo", d * d);
    lo.bo = add(p + "bo", d);
    lo.ln2_g = add(p + "ln2_g", d);
    lo.ln2_b = add(p + "ln2_b", d);
    lo.wfc = add(p + "wfc", d * 4 * d);
    lo.bfc = add(p + "bfc", 4 * d);
    lo.wproj = add(p + "wproj", 4 * d * d);
    lo.bproj = add(p + "bproj", d);
    idx.layer.push_back(lo);
  }
  idx.lnf_g = add("lnf_g", d);
  idx.lnf_b = add("lnf_b", d);
  if (cfg.head_lm) {
    idx.lm_w = add("lm_w", d * V);
    idx.lm_b = add("lm_b", V);
  }
  if (cfg.head_value) {
    idx.value_w = add("value_w", d);
    idx.value_b = add("value_b", 1);
  }
  if (cfg.head_reward) {
    idx.reward_w = add("reward_w", d);
    idx.reward_b = add("reward_b", 1);
  }
  return idx;
}

inline int64_t param_count(const ModelConfig& cfg) { return param_index(cfg).total; }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  Role role = Role::policy;
  uint64_t vocab_fingerprint = 0;
  std::vector<double> params;
};

// Matrix weights and embeddings draw N(0, init_std); biases and LN shifts are
// zero; LN gains are one; value and reward heads start at exactly zero so a
// fresh head scores everything 0.
inline Checkpoint init_checkpoint(const ModelConfig& cfg, Role role, uint64_t vocab_fingerprint,
                                  RngStream& stream, double init_std = 0.02) {
  const ParamIndex idx = param_index(cfg);
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.role = role;
  ckpt.vocab_fingerprint = vocab_fingerprint;
  ckpt.params.assign(static_cast<size_t>(idx.total), 0.0);

  for (const ParamSegment& seg : idx.segments) {
    double* p = ckpt.params.data() + seg.offset;
    const size_t dot = seg.name.find('.');
    const std::string local = dot == std::string::npos ? seg.name : seg.name.substr(dot + 1);
    if (local.ends_with("_g")) {
      std::fill_n(p, seg.size, 1.0);  // LN gains
    } else if (local == "tok_emb" || local == "pos_emb" || local == "lm_w" || local[0] == 'w') {
      for (int64_t i = 0; i < seg.size; ++i) p[i] = stream.next_gaussian() * init_std;
    }
    // everything else (all biases, LN shifts, value/reward heads) stays zero
  }
  return ckpt;
}

// Re-head a checkpoint: trunk segments copy over by name, freshly added heads
// start at zero, dropped heads vanish.
inline Checkpoint with_heads(const Checkpoint& src, bool lm, bool value, bool reward, Role role) {
  ModelConfig cfg = src.config;
  cfg.head_lm = lm;
  cfg.head_value = value;
  cfg.head_reward = reward;
  const ParamIndex src_idx = param_index(src.config);
  const ParamIndex dst_idx = param_index(cfg);

  Checkpoint out;
  out.config = cfg;
  out.role = role;
  out.vocab_fingerprint = src.vocab_fingerprint;
  out.params.assign(static_cast<size_t>(dst_idx.total), 0.0);
  for (const ParamSegment& dseg : dst_idx.segments) {
    for (const ParamSegment& sseg : src_idx.segments) {
      if (sseg.name == dseg.name) {
        std::copy_n(src.params.data() + sseg.offset, dseg.size, out.params.data() + dseg.offset);
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitive kernels (fixed accumulation order everywhere)
// ---------------------------------------------------------------------------

namespace nn {

// C[M x N] += A[M x K] * B[K x N]
inline void mm_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t m = 0; m < M; ++m) {
    const double* a = A + m * K;
    double* c = C + m * N;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      const double* b = B + k * N;
      for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// dA[M x K] += dC[M x N] * B^T   (B is [K x N])
inline void mm_nt_acc(const double* dC, const double* B, double* dA, int64_t M, int64_t N,
                      int64_t K) {
  for (int64_t m = 0; m < M; ++m) {
    const double* dc = dC + m * N;
    double* da = dA + m * K;
    for (int64_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      double s = 0.0;
      for (int64_t n = 0; n < N; ++n) s += dc[n] * b[n];
      da[k] += s;
    }
  }
}

// dB[K x N] += A^T * dC   (A is [M x K], dC is [M x N])
inline void mm_tn_acc(const double* A, const double* dC, double* dB, int64_t M, int64_t K,
                      int64_t N) {
  for (int64_t m = 0; m < M; ++m) {
    const double* a = A + m * K;
    const double* dc = dC + m * N;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      double* db = dB + k * N;
      for (int64_t n = 0; n < N; ++n) db[n] += av * dc[n];
    }
  }
}

inline void add_bias(double* X, const double* b, int64_t M, int64_t N) {
  for (int64_t m = 0; m < M; ++m)
    for (int64_t n = 0; n < N; ++n) X[m * N + n] += b[n];
}

inline void bias_grad(const double* dX, double* db, int64_t M, int64_t N) {
  for (int64_t m = 0; m < M; ++m)
    for (int64_t n = 0; n < N; ++n) db[n] += dX[m * N + n];
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

// Per-row layer norm. xhat is the normalized value, out = xhat*g + b.
inline void layernorm(const double* x, const double* g, const double* b, double* xhat,
                      double* out, double* rstd, int64_t M, int64_t d) {
  for (int64_t m = 0; m < M; ++m) {
    const double* xr = x + m * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[m] = rs;
    double* xh = xhat + m * d;
    double* o = out + m * d;
    for (int64_t i = 0; i < d; ++i) {
      xh[i] = (xr[i] - mean) * rs;
      o[i] = xh[i] * g[i] + b[i];
    }
  }
}

// Backward of layernorm: given dout, accumulate dx, dg, db.
inline void layernorm_backward(const double* dout, const double* xhat, const double* rstd,
                               const double* g, double* dx, double* dg, double* db, int64_t M,
                               int64_t d) {
  for (int64_t m = 0; m < M; ++m) {
    const double* dor = dout + m * d;
    const double* xh = xhat + m * d;
    double mean_dy = 0.0, mean_dyxh = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double dy = dor[i] * g[i];
      mean_dy += dy;
      mean_dyxh += dy * xh[i];
    }
    mean_dy /= static_cast<double>(d);
    mean_dyxh /= static_cast<double>(d);
    double* dxr = dx + m * d;
    for (int64_t i = 0; i < d; ++i) {
      const double dy = dor[i] * g[i];
      dxr[i] += (dy - mean_dy - xh[i] * mean_dyxh) * rstd[m];
      dg[i] += dor[i] * xh[i];
      db[i] += dor[i];
    }
  }
}

// Stable log-softmax of one row; returns the log-sum-exp.
inline double log_softmax_row(const double* logits, double* out, int64_t n) {
  double mx = logits[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) sum += std::exp(logits[i] - mx);
  const double lse = mx + std::log(sum);
  for (int64_t i = 0; i < n; ++i) out[i] = logits[i] - lse;
  return lse;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Forward pass with cache
// ---------------------------------------------------------------------------

struct ForwardOutput {
  std::vector<double> logits;  // T x V when the lm head is present
  std::vector<double> values;  // T when the value head is present
  double reward = 0.0;         // reward head at the last position
};

struct LayerCache {
  std::vector<double> x_in;                      // T x d residual stream entering the block
  std::vector<double> ln1_xhat, ln1_out;         // T x d
  std::vector<double> ln1_rstd;                  // T
  std::vector<double> q, k, v;                   // T x d
  std::vector<double> att;                       // H x T x T softmax probabilities
  std::vector<double> ctx;                       // T x d
  std::vector<double> x_mid;                     // T x d after attention residual
  std::vector<double> ln2_xhat, ln2_out;         // T x d
  std::vector<double> ln2_rstd;                  // T
  std::vector<double> fc_pre, fc_act;            // T x 4d
};

struct ForwardCache {
  int64_t T = 0;
  std::vector<LayerCache> layers;
  std::vector<double> lnf_xhat, lnf_out;  // T x d
  std::vector<double> lnf_rstd;           // T
  ForwardOutput out;
};

namespace detail {

inline void check_tokens(const ModelConfig& cfg, std::span<const Token> tokens) {
  if (tokens.empty()) throw std::domain_error("forward: empty token sequence");
  if (static_cast<int64_t>(tokens.size()) > cfg.context_length)
    throw std::domain_error("forward: sequence exceeds context length");
  for (Token t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw std::domain_error("forward: token id out of vocab");
}

}  // namespace detail

inline void forward_cached(const Checkpoint& ckpt, std::span<const Token> tokens,
                           ForwardCache& cache) {
  const ModelConfig& cfg = ckpt.config;
  detail::check_tokens(cfg, tokens);
  const ParamIndex idx = param_index(cfg);
  const int64_t T = static_cast<int64_t>(tokens.size());
  const int64_t d = cfg.width, V = cfg.vocab_size, H = cfg.heads, dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* P = ckpt.params.data();

  cache.T = T;
  cache.layers.resize(static_cast<size_t>(cfg.layers));

  std::vector<double> x(static_cast<size_t>(T * d));
  for (int64_t t = 0; t < T; ++t) {
    const double* te = P + idx.tok_emb + static_cast<int64_t>(tokens[static_cast<size_t>(t)]) * d;
    const double* pe = P + idx.pos_emb + t * d;
    double* xr = x.data() + t * d;
    for (int64_t i = 0; i < d; ++i) xr[i] = te[i] + pe[i];
  }

  for (int32_t l = 0; l < cfg.layers; ++l) {
    LayerCache& lc = cache.layers[static_cast<size_t>(l)];
    const LayerOffsets& lo = idx.layer[static_cast<size_t>(l)];
    lc.x_in = x;
    lc.ln1_xhat.assign(static_cast<size_t>(T * d), 0.0);
    lc.ln1_out.assign(static_cast<size_t>(T * d), 0.0);
    lc.ln1_rstd.assign(static_cast<size_t>(T), 0.0);
    nn::layernorm(lc.x_in.data(), P + lo.ln1_g, P + lo.ln1_b, lc.ln1_xhat.data(),
                  lc.ln1_out.data(), lc.ln1_rstd.data(), T, d);

    lc.q.assign(static_cast<size_t>(T * d), 0.0);
    lc.k.assign(static_cast<size_t>(T * d), 0.0);
    lc.v.assign(static_cast<size_t>(T * d), 0.0);
    nn::mm_acc(lc.ln1_out.data(), P + lo.wq, lc.q.data(), T, d, d);
    nn::add_bias(lc.q.data(), P + lo.bq, T, d);
    nn::mm_acc(lc.ln1_out.data(), P + lo.wk, lc.k.data(), T, d, d);
    nn::mm_acc(lc.ln1_out.data(), P + lo.wv, lc.v.data(), T, d, d);
    nn::add_bias(lc.v.data(), P + lo.bv, T, d);

    lc.att.assign(static_cast<size_t>(H * T * T), 0.0);
    lc.ctx.assign(static_cast<size_t>(T * d), 0.0);
    for (int64_t h = 0; h < H; ++h) {
      const int64_t hb = h * dh;
      double* att_h = lc.att.data() + h * T * T;
      for (int64_t t = 0; t < T; ++t) {
        const double* qt = lc.q.data() + t * d + hb;
        double* arow = att_h + t * T;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t u = 0; u <= t; ++u) {
          const double* ku = lc.k.data() + u * d + hb;
          double s = 0.0;
          for (int64_t i = 0; i < dh; ++i) s += qt[i] * ku[i];
          s *= scale;
          arow[u] = s;
          mx = std::max(mx, s);
        }
        double sum = 0.0;
        for (int64_t u = 0; u <= t; ++u) {
          arow[u] = std::exp(arow[u] - mx);
          sum += arow[u];
        }
        const double inv = 1.0 / sum;
        double* ct = lc.ctx.data() + t * d + hb;
        for (int64_t u = 0; u <= t; ++u) {
          arow[u] *= inv;
          const double* vu = lc.v.data() + u * d + hb;
          const double p = arow[u];
          for (int64_t i = 0; i < dh; ++i) ct[i] += p * vu[i];
        }
      }
    }

    lc.x_mid = lc.x_in;
    nn::mm_acc(lc.ctx.data(), P + lo.wo, lc.x_mid.data(), T, d, d);
    nn::add_bias(lc.x_mid.data(), P + lo.bo, T, d);

    lc.ln2_xhat.assign(static_cast<size_t>(T * d), 0.0);
    lc.ln2_out.assign(static_cast<size_t>(T * d), 0.0);
    lc.ln2_rstd.assign(static_cast<size_t>(T), 0.0);
    nn::layernorm(lc.x_mid.data(), P + lo.ln2_g, P + lo.ln2_b, lc.ln2_xhat.data(),
                  lc.ln2_out.data(), lc.ln2_rstd.data(), T, d);

    lc.fc_pre.assign(static_cast<size_t>(T * 4 * d), 0.0);
    nn::mm_acc(lc.ln2_out.data(), P + lo.wfc, lc.fc_pre.data(), T, d, 4 * d);
    nn::add_bias(lc.fc_pre.data(), P + lo.bfc, T, 4 * d);
    lc.fc_act.resize(static_cast<size_t>(T * 4 * d));
    for (int64_t i = 0; i < T * 4 * d; ++i) lc.fc_act[static_cast<size_t>(i)] = nn::gelu(lc.fc_pre[static_cast<size_t>(i)]);

    x = lc.x_mid;
    nn::mm_acc(lc.fc_act.data(), P + lo.wproj, x.data(), T, 4 * d, d);
    nn::add_bias(x.data(), P + lo.bproj, T, d);
  }

  cache.lnf_xhat.assign(static_cast<size_t>(T * d), 0.0);
  cache.lnf_out.assign(static_cast<size_t>(T * d), 0.0);
  cache.lnf_rstd.assign(static_cast<size_t>(T), 0.0);
  nn::layernorm(x.data(), P + idx.lnf_g, P + idx.lnf_b, cache.lnf_xhat.data(),
                cache.lnf_out.data(), cache.lnf_rstd.data(), T, d);

  ForwardOutput& out = cache.out;
  out.logits.clear();
  out.values.clear();
  out.reward = 0.0;
  if (cfg.head_lm) {
    out.logits.assign(static_cast<size_t>(T * V), 0.0);
    nn::mm_acc(cache.lnf_out.data(), P + idx.lm_w, out.logits.data(), T, d, V);
    nn::add_bias(out.logits.data(), P + idx.lm_b, T, V);
  }
  if (cfg.head_value) {
    out.values.assign(static_cast<size_t>(T), 0.0);
    for (int64_t t = 0; t < T; ++t) {
      const double* h = cache.lnf_out.data() + t * d;
      const double* w = P + idx.value_w;
      double s = 0.0;
      for (int64_t i = 0; i < d; ++i) s += h[i] * w[i];
      out.values[static_cast<size_t>(t)] = s + P[idx.value_b];
    }
  }
  if (cfg.head_reward) {
    const double* h = cache.lnf_out.data() + (T - 1) * d;
    const double* w = P + idx.reward_w;
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) s += h[i] * w[i];
    out.reward = s + P[idx.reward_b];
  }
}

inline ForwardOutput forward(const Checkpoint& ckpt, std::span<const Token> tokens) {
  ForwardCache cache;
  forward_cached(ckpt, tokens, cache);
  return std::move(cache.out);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

struct BackSignal {
  std::vector<double> dlogits;  // T x V, or empty
  std::vector<double> dvalues;  // T, or empty
  double dreward = 0.0;
};

// Accumulates d(loss)/d(params) into `grad` (size = param count) for the loss
// surface whose output gradients are given in `sig`.
inline void backward(const Checkpoint& ckpt, std::span<const Token> tokens,
                     const ForwardCache& cache, const BackSignal& sig, std::span<double> grad) {
  const ModelConfig& cfg = ckpt.config;
  const ParamIndex idx = param_index(cfg);
  if (static_cast<int64_t>(grad.size()) != idx.total)
    throw std::invalid_argument("backward: grad size mismatch");
  const int64_t T = cache.T, d = cfg.width, V = cfg.vocab_size, H = cfg.heads, dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* P = ckpt.params.data();
  double* G = grad.data();

  // d(loss)/d(lnf_out)
  std::vector<double> dlnf_out(static_cast<size_t>(T * d), 0.0);
  if (!sig.dlogits.empty()) {
    if (static_cast<int64_t>(sig.dlogits.size()) != T * V)
      throw std::invalid_argument("backward: dlogits size mismatch");
    nn::mm_nt_acc(sig.dlogits.data(), P + idx.lm_w, dlnf_out.data(), T, V, d);
    nn::mm_tn_acc(cache.lnf_out.data(), sig.dlogits.data(), G + idx.lm_w, T, d, V);
    nn::bias_grad(sig.dlogits.data(), G + idx.lm_b, T, V);
  }
  if (!sig.dvalues.empty()) {
    if (static_cast<int64_t>(sig.dvalues.size()) != T)
      throw std::invalid_argument("backward: dvalues size mismatch");
    const double* w = P + idx.value_w;
    for (int64_t t = 0; t < T; ++t) {
      const double dv = sig.dvalues[static_cast<size_t>(t)];
      if (dv == 0.0) continue;
      const double* h = cache.lnf_out.data() + t * d;
      double* dl = dlnf_out.data() + t * d;
      for (int64_t i = 0; i < d; ++i) {
        dl[i] += dv * w[i];
        G[idx.value_w + i] += dv * h[i];
      }
      G[idx.value_b] += dv;
    }
  }
  if (sig.dreward != 0.0) {
    const double* w = P + idx.reward_w;
    const double* h = cache.lnf_out.data() + (T - 1) * d;
    double* dl = dlnf_out.data() + (T - 1) * d;
    for (int64_t i = 0; i < d; ++i) {
      dl[i] += sig.dreward * w[i];
      G[idx.reward_w + i] += sig.dreward * h[i];
    }
    G[idx.reward_b] += sig.dreward;
  }

  // Final LN
  std::vector<double> dx(static_cast<size_t>(T * d), 0.0);
  nn::layernorm_backward(dlnf_out.data(), cache.lnf_xhat.data(), cache.lnf_rstd.data(),
                         P + idx.lnf_g, dx.data(), G + idx.lnf_g, G + idx.lnf_b, T, d);

  // Blocks in reverse
  std::vector<double> dln2_out(static_cast<size_t>(T * d));
  std::vector<double> dfc_act(static_cast<size_t>(T * 4 * d));
  std::vector<double> dfc_pre(static_cast<size_t>(T * 4 * d));
  std::vector<double> dx_mid(static_cast<size_t>(T * d));
  std::vector<double> dctx(static_cast<size_t>(T * d));
  std::vector<double> dq(static_cast<size_t>(T * d));
  std::vector<double> dk(static_cast<size_t>(T * d));
  std::vector<double> dv(static_cast<size_t>(T * d));
  std::vector<double> dln1_out(static_cast<size_t>(T * d));
  std::vector<double> dp_row(static_cast<size_t>(T));

  for (int32_t l = cfg.layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[static_cast<size_t>(l)];
    const LayerOffsets& lo = idx.layer[static_cast<size_t>(l)];

    // x_out = x_mid + fc_act * Wproj + bproj ; dx currently holds d(x_out)
    std::fill(dfc_act.begin(), dfc_act.end(), 0.0);
    nn::mm_nt_acc(dx.data(), P + lo.wproj, dfc_act.data(), T, d, 4 * d);
    nn::mm_tn_acc(lc.fc_act.data(), dx.data(), G + lo.wproj, T, 4 * d, d);
    nn::bias_grad(dx.data(), G + lo.bproj, T, d);

    for (int64_t i = 0; i < T * 4 * d; ++i)
      dfc_pre[static_cast<size_t>(i)] =
          dfc_act[static_cast<size_t>(i)] * nn::gelu_grad(lc.fc_pre[static_cast<size_t>(i)]);

    std::fill(dln2_out.begin(), dln2_out.end(), 0.0);
    nn::mm_nt_acc(dfc_pre.data(), P + lo.wfc, dln2_out.data(), T, 4 * d, d);
    nn::mm_tn_acc(lc.ln2_out.data(), dfc_pre.data(), G + lo.wfc, T, d, 4 * d);
    nn::bias_grad(dfc_pre.data(), G + lo.bfc, T, 4 * d);

    // d(x_mid) = residual passthrough + LN2 backward
    dx_mid = dx;
    nn::layernorm_backward(dln2_out.data(), lc.ln2_xhat.data(), lc.ln2_rstd.data(), P + lo.ln2_g,
                           dx_mid.data(), G + lo.ln2_g, G + lo.ln2_b, T, d);

    // x_mid = x_in + ctx * Wo + bo
    std::fill(dctx.begin(), dctx.end(), 0.0);
    nn::mm_nt_acc(dx_mid.data(), P + lo.wo, dctx.data(), T, d, d);
    nn::mm_tn_acc(lc.ctx.data(), dx_mid.data(), G + lo.wo, T, d, d);
    nn::bias_grad(dx_mid.data(), G + lo.bo, T, d);

    // Attention backward
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (int64_t h = 0; h < H; ++h) {
      const int64_t hb = h * dh;
      const double* att_h = lc.att.data() + h * T * T;
      for (int64_t t = 0; t < T; ++t) {
        const double* arow = att_h + t * T;
        const double* dct = dctx.data() + t * d + hb;
        double dot = 0.0;
        for (int64_t u = 0; u <= t; ++u) {
          const double* vu = lc.v.data() + u * d + hb;
          double s = 0.0;
          for (int64_t i = 0; i < dh; ++i) s += dct[i] * vu[i];
          dp_row[static_cast<size_t>(u)] = s;
          dot += arow[u] * s;
          double* dvu = dv.data() + u * d + hb;
          const double p = arow[u];
          for (int64_t i = 0; i < dh; ++i) dvu[i] += p * dct[i];
        }
        const double* qt = lc.q.data() + t * d + hb;
        double* dqt = dq.data() + t * d + hb;
        for (int64_t u = 0; u <= t; ++u) {
          const double ds = arow[u] * (dp_row[static_cast<size_t>(u)] - dot) * scale;
          const double* ku = lc.k.data() + u * d + hb;
          double* dku = dk.data() + u * d + hb;
          for (int64_t i = 0; i < dh; ++i) {
            dqt[i] += ds * ku[i];
            dku[i] += ds * qt[i];
          }
        }
      }
    }

    // q/k/v projections
    std::fill(dln1_out.begin(), dln1_out.end(), 0.0);
    nn::mm_nt_acc(dq.data(), P + lo.wq, dln1_out.data(), T, d, d);
    nn::mm_tn_acc(lc.ln1_out.data(), dq.data(), G + lo.wq, T, d, d);
    nn::bias_grad(dq.data(), G + lo.bq, T, d);
    nn::mm_nt_acc(dk.data(), P + lo.wk, dln1_out.data(), T, d, d);
    nn::mm_tn_acc(lc.ln1_out.data(), dk.data(), G + lo.wk, T, d, d);
    nn::mm_nt_acc(dv.data(), P + lo.wv, dln1_out.data(), T, d, d);
    nn::mm_tn_acc(lc.ln1_out.data(), dv.data(), G + lo.wv, T, d, d);
    nn::bias_grad(dv.data(), G + lo.bv, T, d);

    // d(x_in) = residual passthrough (dx_mid) + LN1 backward
    dx = dx_mid;
    nn::layernorm_backward(dln1_out.data(), lc.ln1_xhat.data(), lc.ln1_rstd.data(), P + lo.ln1_g,
                           dx.data(), G + lo.ln1_g, G + lo.ln1_b, T, d);
  }

  // Embeddings
  for (int64_t t = 0; t < T; ++t) {
    const double* dxr = dx.data() + t * d;
    double* dte = G + idx.tok_emb + static_cast<int64_t>(tokens[static_cast<size_t>(t)]) * d;
    double* dpe = G + idx.pos_emb + t * d;
    for (int64_t i = 0; i < d; ++i) {
      dte[i] += dxr[i];
      dpe[i] += dxr[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Incremental decoding and sampling
// ---------------------------------------------------------------------------

// Step-by-step decoder that caches per-layer keys/values. Each step performs
// exactly the arithmetic the full forward pass performs at that position, in
// the same order, so logits are bit-identical to forward().
class DecodeState {
 public:
  explicit DecodeState(const Checkpoint& ckpt)
      : ckpt_(&ckpt), idx_(param_index(ckpt.config)) {
    const ModelConfig& cfg = ckpt.config;
    if (!cfg.head_lm) throw std::domain_error("DecodeState needs the lm head");
    kv_.resize(static_cast<size_t>(cfg.layers));
    const size_t cap = static_cast<size_t>(cfg.context_length * cfg.width);
    for (auto& kv : kv_) {
      kv.k.reserve(cap);
      kv.v.reserve(cap);
    }
    logits_.assign(static_cast<size_t>(cfg.vocab_size), 0.0);
  }

  int64_t length() const { return pos_; }

  // Feeds one token; logits() afterwards give the next-token distribution.
  void step(Token t) {
    const ModelConfig& cfg = ckpt_->config;
    if (t < 0 || t >= cfg.vocab_size) throw std::domain_error("decode: token id out of vocab");
    if (pos_ >= cfg.context_length) throw std::domain_error("decode: context overflow");
    const int64_t d = cfg.width, H = cfg.heads, dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* P = ckpt_->params.data();

    std::vector<double> x(static_cast<size_t>(d));
    {
      const double* te = P + idx_.tok_emb + static_cast<int64_t>(t) * d;
      const double* pe = P + idx_.pos_emb + pos_ * d;
      for (int64_t i = 0; i < d; ++i) x[static_cast<size_t>(i)] = te[i] + pe[i];
    }

    std::vector<double> xhat(static_cast<size_t>(d)), ln_out(static_cast<size_t>(d));
    std::vector<double> q(static_cast<size_t>(d)), ctx(static_cast<size_t>(d));
    std::vector<double> fc(static_cast<size_t>(4 * d));
    double rstd = 0.0;

    for (int32_t l = 0; l < cfg.layers; ++l) {
      const LayerOffsets& lo = idx_.layer[static_cast<size_t>(l)];
      LayerKv& kv = kv_[static_cast<size_t>(l)];
      nn::layernorm(x.data(), P + lo.ln1_g, P + lo.ln1_b, xhat.data(), ln_out.data(), &rstd, 1, d);

      std::fill(q.begin(), q.end(), 0.0);
      nn::mm_acc(ln_out.data(), P + lo.wq, q.data(), 1, d, d);
      nn::add_bias(q.data(), P + lo.bq, 1, d);
      const size_t kv_off = kv.k.size();
      kv.k.resize(kv_off + static_cast<size_t>(d), 0.0);
      kv.v.resize(kv_off + static_cast<size_t>(d), 0.0);
      nn::mm_acc(ln_out.data(), P + lo.wk, kv.k.data() + kv_off, 1, d, d);
      nn::mm_acc(ln_out.data(), P + lo.wv, kv.v.data() + kv_off, 1, d, d);
      nn::add_bias(kv.v.data() + kv_off, P + lo.bv, 1, d);

      std::fill(ctx.begin(), ctx.end(), 0.0);
      const int64_t tpos = pos_;
      for (int64_t h = 0; h < H; ++h) {
        const int64_t hb = h * dh;
        const double* qt = q.data() + hb;
        double mx = -std::numeric_limits<double>::infinity();
        att_row_.resize(static_cast<size_t>(tpos + 1));
        for (int64_t u = 0; u <= tpos; ++u) {
          const double* ku = kv.k.data() + u * d + hb;
          double s = 0.0;
          for (int64_t i = 0; i < dh; ++i) s += qt[i] * ku[i];
          s *= scale;
          att_row_[static_cast<size_t>(u)] = s;
          mx = std::max(mx, s);
        }
        double sum = 0.0;
        for (int64_t u = 0; u <= tpos; ++u) {
          att_row_[static_cast<size_t>(u)] = std::exp(att_row_[static_cast<size_t>(u)] - mx);
          sum += att_row_[static_cast<size_t>(u)];
        }
        const double inv = 1.0 / sum;
        double* ct = ctx.data() + hb;
        for (int64_t u = 0; u <= tpos; ++u) {
          const double p = att_row_[static_cast<size_t>(u)] * inv;
          const double* vu = kv.v.data() + u * d + hb;
          for (int64_t i = 0; i < dh; ++i) ct[i] += p * vu[i];
        }
      }

      // x_mid = x + ctx*Wo + bo (accumulate straight into x)
      nn::mm_acc(ctx.data(), P + lo.wo, x.data(), 1, d, d);
      nn::add_bias(x.data(), P + lo.bo, 1, d);

      nn::layernorm(x.data(), P + lo.ln2_g, P + lo.ln2_b, xhat.data(), ln_out.data(), &rstd, 1, d);
      std::fill(fc.begin(), fc.end(), 0.0);
      nn::mm_acc(ln_out.data(), P + lo.wfc, fc.data(), 1, d, 4 * d);
      nn::add_bias(fc.data(), P + lo.bfc, 1, 4 * d);
      for (int64_t i = 0; i < 4 * d; ++i) fc[static_cast<size_t>(i)] = nn::gelu(fc[static_cast<size_t>(i)]);
      nn::mm_acc(fc.data(), P + lo.wproj, x.data(), 1, 4 * d, d);
      nn::add_bias(x.data(), P + lo.bproj, 1, d);
    }

    nn::layernorm(x.data(), P + idx_.lnf_g, P + idx_.lnf_b, xhat.data(), ln_out.data(), &rstd, 1, d);
    std::fill(logits_.begin(), logits_.end(), 0.0);
    nn::mm_acc(ln_out.data(), P + idx_.lm_w, logits_.data(), 1, d, cfg.vocab_size);
    nn::add_bias(logits_.data(), P + idx_.lm_b, 1, cfg.vocab_size);
    ++pos_;
  }

  const std::vector<double>& logits() const { return logits_; }

 private:
  struct LayerKv {
    std::vector<double> k, v;
  };
  const Checkpoint* ckpt_;
  ParamIndex idx_;
  int64_t pos_ = 0;
  std::vector<LayerKv> kv_;
  std::vector<double> logits_;
  std::vector<double> att_row_;
};

struct SampleResult {
  TokenSeq tokens;              // the continuation only (includes EOS if emitted)
  std::vector<double> logprob;  // log-prob of each emitted token (temperature 1)
  bool terminated = false;      // true iff EOS was emitted
};

// Autoregressive sampling until EOS or max_new tokens. Temperature scales the
// logits for the draw; reported log-probs are always the untempered model
// log-probs (the distribution PPO needs at its temperature-1.0 rollouts).
// Temperature 0 is argmax with lowest-id tie-break. One uniform draw per
// emitted token, consumed by inverse CDF in token-id order.
inline SampleResult sample(const Checkpoint& ckpt, std::span<const Token> prompt,
                           double temperature, int max_new, RngStream& stream,
                           Token eos = 1) {
  if (temperature < 0.0) throw std::domain_error("sample: negative temperature");
  if (prompt.empty()) throw std::domain_error("sample: empty prompt");
  const ModelConfig& cfg = ckpt.config;
  if (static_cast<int64_t>(prompt.size()) > cfg.context_length)
    throw std::domain_error("sample: prompt exceeds context");

  SampleResult res;
  DecodeState state(ckpt);
  for (Token t : prompt) state.step(t);

  const int64_t V = cfg.vocab_size;
  std::vector<double> lp(static_cast<size_t>(V));
  const int64_t room = cfg.context_length - static_cast<int64_t>(prompt.size());
  const int64_t budget = std::min<int64_t>(max_new, room);

  for (int64_t n = 0; n < budget; ++n) {
    const std::vector<double>& logits = state.logits();
    nn::log_softmax_row(logits.data(), lp.data(), V);

    Token next = 0;
    if (temperature == 0.0) {
      double best = logits[0];
      for (int64_t i = 1; i < V; ++i)
        if (logits[static_cast<size_t>(i)] > best) {
          best = logits[static_cast<size_t>(i)];
          next = static_cast<Token>(i);
        }
    } else {
      // Tempered distribution via tempered log-softmax; inverse CDF draw.
      double mx = logits[0];
      for (int64_t i = 1; i < V; ++i) mx = std::max(mx, logits[static_cast<size_t>(i)]);
      double sum = 0.0;
      for (int64_t i = 0; i < V; ++i) sum += std::exp((logits[static_cast<size_t>(i)] - mx) / temperature);
      const double u = stream.next_double() * sum;
      double acc = 0.0;
      next = static_cast<Token>(V - 1);
      for (int64_t i = 0; i < V; ++i) {
        acc += std::exp((logits[static_cast<size_t>(i)] - mx) / temperature);
        if (u < acc) {
          next = static_cast<Token>(i);
          break;
        }
      }
    }

    res.tokens.push_back(next);
    res.logprob.push_back(lp[static_cast<size_t>(next)]);
    if (next == eos) {
      res.terminated = true;
      break;
    }
    state.step(next);
  }
  return res;
}

inline TokenSeq greedy_decode(const Checkpoint& ckpt, std::span<const Token> prompt, int max_new,
                              Token eos = 1) {
  RngStream unused(0);
  return sample(ckpt, prompt, 0.0, max_new, unused, eos).tokens;
}

}  // namespace rllr
