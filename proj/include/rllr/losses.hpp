#pragma once

// Training objectives over the model core, each with exact analytic
// gradients and a shared finite-difference oracle:
//
//   sft        — masked next-token NLL, mean over masked positions
//   bt         — Bradley-Terry pairwise preference loss −log σ(margin)
//   ppo_policy — clipped-surrogate policy loss over answer tokens
//   ppo_value  — clipped squared error of value predictions to returns
//
// All batch reductions run in item/index order so results are independent of
// scheduling.

#include <cmath>
#include <optional>
#include <unordered_set>
#include <vector>

#include "rllr/common.hpp"
#include "rllr/model.hpp"
#include "rllr/rng.hpp"

namespace rllr {

enum class LossKind { sft, bt, ppo_policy, ppo_value };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::sft: return "sft";
    case LossKind::bt: return "bt";
    case LossKind::ppo_policy: return "ppo_policy";
    case LossKind::ppo_value: return "ppo_value";
  }
  throw std::invalid_argument("bad loss kind");
}

// One SFT sequence: `tokens` are the inputs; position t contributes
// −log p(targets[t] | tokens[<t]) iff mask[t] == 1. `targets` defaults to
// `tokens` when empty; masked-out targets are never read, which is exactly
// the masking property the tests pin down.
struct SftItem {
  TokenSeq tokens;
  std::vector<uint8_t> mask;
  TokenSeq targets;  // optional; empty = same as tokens
};

struct BtItem {
  TokenSeq chosen;    // question ++ chosen answer
  TokenSeq rejected;  // question ++ rejected answer
};

// Answer tokens are tokens[answer_begin..]; per-token arrays index from
// answer_begin. Log-probs/values for answer token j are read at position j-1.
struct PpoPolicyItem {
  TokenSeq tokens;
  int32_t answer_begin = 0;
  std::vector<double> behavior_logprob;
  std::vector<double> advantage;
};

struct PpoValueItem {
  TokenSeq tokens;
  int32_t answer_begin = 0;
  std::vector<double> value_old;
  std::vector<double> ret;
};

struct LossBatch {
  std::vector<SftItem> sft;
  std::vector<BtItem> bt;
  std::vector<PpoPolicyItem> ppo_policy;
  std::vector<PpoValueItem> ppo_value;
  double clip_eps = 0.2;
  double value_clip = 0.2;
};

// Per-token diagnostics from the ppo_policy loss.
struct PpoTokenStats {
  std::vector<double> rho;
  int64_t clipped = 0;  // |rho - 1| > clip_eps
};

namespace detail {

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

inline double softplus(double x) {
  // log(1 + e^x), stable for large |x|
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct SftCounts {
  int64_t masked = 0;
};

inline int64_t count_masked(const LossBatch& batch) {
  int64_t n = 0;
  for (const auto& item : batch.sft) {
    if (item.mask.size() != item.tokens.size())
      throw std::invalid_argument("sft item: mask length mismatch");
    if (!item.targets.empty() && item.targets.size() != item.tokens.size())
      throw std::invalid_argument("sft item: targets length mismatch");
    if (!item.mask.empty() && item.mask[0])
      throw std::invalid_argument("sft item: position 0 cannot be masked in");
    for (uint8_t m : item.mask) n += m ? 1 : 0;
  }
  if (n == 0) throw std::invalid_argument("sft batch has no masked positions");
  return n;
}

}  // namespace detail

// Computes the batch loss for `kind`; when `grad` is non-null also accumulates
// exact gradients (grad is resized and zeroed here). Throws NumericError on a
// non-finite loss.
inline double loss_and_grads(const Checkpoint& ckpt, const LossBatch& batch, LossKind kind,
                             std::vector<double>* grad, PpoTokenStats* stats = nullptr) {
  const ModelConfig& cfg = ckpt.config;
  const ParamIndex idx = param_index(cfg);
  if (grad) grad->assign(static_cast<size_t>(idx.total), 0.0);

  ForwardCache cache;
  double loss = 0.0;

  switch (kind) {
    case LossKind::sft: {
      if (!cfg.head_lm) throw std::domain_error("sft loss needs the lm head");
      const int64_t V = cfg.vocab_size;
      const double inv_n = 1.0 / static_cast<double>(detail::count_masked(batch));
      std::vector<double> lp(static_cast<size_t>(V));
      for (const auto& item : batch.sft) {
        forward_cached(ckpt, item.tokens, cache);
        const int64_t T = cache.T;
        BackSignal sig;
        if (grad) sig.dlogits.assign(static_cast<size_t>(T * V), 0.0);
        for (int64_t t = 1; t < T; ++t) {
          if (!item.mask[static_cast<size_t>(t)]) continue;
          const Token target = item.targets.empty() ? item.tokens[static_cast<size_t>(t)]
                                                    : item.targets[static_cast<size_t>(t)];
          if (target < 0 || target >= V) throw std::domain_error("sft target out of vocab");
          const double* row = cache.out.logits.data() + (t - 1) * V;
          nn::log_softmax_row(row, lp.data(), V);
          loss -= lp[static_cast<size_t>(target)] * inv_n;
          if (grad) {
            double* drow = sig.dlogits.data() + (t - 1) * V;
            for (int64_t i = 0; i < V; ++i)
              drow[i] += std::exp(lp[static_cast<size_t>(i)]) * inv_n;
            drow[target] -= inv_n;
          }
        }
        if (grad) backward(ckpt, item.tokens, cache, sig, *grad);
      }
      break;
    }

    case LossKind::bt: {
      if (!cfg.head_reward) throw std::domain_error("bt loss needs the reward head");
      if (batch.bt.empty()) throw std::invalid_argument("bt batch empty");
      const double inv_n = 1.0 / static_cast<double>(batch.bt.size());
      ForwardCache cache_r;
      for (const auto& item : batch.bt) {
        forward_cached(ckpt, item.chosen, cache);
        forward_cached(ckpt, item.rejected, cache_r);
        const double margin = cache.out.reward - cache_r.out.reward;
        loss += detail::softplus(-margin) * inv_n;
        if (grad) {
          // d/dmargin of softplus(-margin) = sigmoid(margin) - 1
          const double dmargin = (detail::sigmoid(margin) - 1.0) * inv_n;
          BackSignal sig;
          sig.dreward = dmargin;
          backward(ckpt, item.chosen, cache, sig, *grad);
          sig.dreward = -dmargin;
          backward(ckpt, item.rejected, cache_r, sig, *grad);
        }
      }
      break;
    }

    case LossKind::ppo_policy: {
      if (!cfg.head_lm) throw std::domain_error("ppo_policy loss needs the lm head");
      if (batch.ppo_policy.empty()) throw std::invalid_argument("ppo_policy batch empty");
      const int64_t V = cfg.vocab_size;
      int64_t n_tokens = 0;
      for (const auto& item : batch.ppo_policy) {
        const size_t n = item.tokens.size() - static_cast<size_t>(item.answer_begin);
        if (item.answer_begin < 1 || n == 0 || item.behavior_logprob.size() != n ||
            item.advantage.size() != n)
          throw std::invalid_argument("ppo_policy item malformed");
        n_tokens += static_cast<int64_t>(n);
      }
      const double inv_n = 1.0 / static_cast<double>(n_tokens);
      const double eps = batch.clip_eps;
      std::vector<double> lp(static_cast<size_t>(V));
      for (const auto& item : batch.ppo_policy) {
        forward_cached(ckpt, item.tokens, cache);
        const int64_t T = cache.T;
        BackSignal sig;
        if (grad) sig.dlogits.assign(static_cast<size_t>(T * V), 0.0);
        for (int64_t t = item.answer_begin; t < T; ++t) {
          const size_t j = static_cast<size_t>(t - item.answer_begin);
          const Token target = item.tokens[static_cast<size_t>(t)];
          const double* row = cache.out.logits.data() + (t - 1) * V;
          nn::log_softmax_row(row, lp.data(), V);
          const double lp_new = lp[static_cast<size_t>(target)];
          const double rho = std::exp(lp_new - item.behavior_logprob[j]);
          const double A = item.advantage[j];
          const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps);
          const double surr1 = rho * A;
          const double surr2 = clipped * A;
          loss -= std::min(surr1, surr2) * inv_n;
          if (stats) {
            stats->rho.push_back(rho);
            if (std::abs(rho - 1.0) > eps) stats->clipped++;
          }
          if (grad && surr1 <= surr2) {
            // Active branch: d(-rho*A)/d lp_new = -rho*A
            const double g = -rho * A * inv_n;
            double* drow = sig.dlogits.data() + (t - 1) * V;
            for (int64_t i = 0; i < V; ++i)
              drow[i] -= g * std::exp(lp[static_cast<size_t>(i)]);
            drow[target] += g;
          }
        }
        if (grad) backward(ckpt, item.tokens, cache, sig, *grad);
      }
      break;
    }

    case LossKind::ppo_value: {
      if (!cfg.head_value) throw std::domain_error("ppo_value loss needs the value head");
      if (batch.ppo_value.empty()) throw std::invalid_argument("ppo_value batch empty");
      int64_t n_tokens = 0;
      for (const auto& item : batch.ppo_value) {
        const size_t n = item.tokens.size() - static_cast<size_t>(item.answer_begin);
        if (item.answer_begin < 1 || n == 0 || item.value_old.size() != n ||
            item.ret.size() != n)
          throw std::invalid_argument("ppo_value item malformed");
        n_tokens += static_cast<int64_t>(n);
      }
      const double inv_n = 1.0 / static_cast<double>(n_tokens);
      const double vc = batch.value_clip;
      for (const auto& item : batch.ppo_value) {
        forward_cached(ckpt, item.tokens, cache);
        const int64_t T = cache.T;
        BackSignal sig;
        if (grad) sig.dvalues.assign(static_cast<size_t>(T), 0.0);
        for (int64_t t = item.answer_begin; t < T; ++t) {
          const size_t j = static_cast<size_t>(t - item.answer_begin);
          const double v = cache.out.values[static_cast<size_t>(t - 1)];
          const double v_old = item.value_old[j];
          const double R = item.ret[j];
          const double v_clip = v_old + std::clamp(v - v_old, -vc, vc);
          const double l1 = (v - R) * (v - R);
          const double l2 = (v_clip - R) * (v_clip - R);
          loss += 0.5 * std::max(l1, l2) * inv_n;
          if (grad && l1 >= l2)
            sig.dvalues[static_cast<size_t>(t - 1)] += (v - R) * inv_n;
          // else: the clamp is binding and the max picked the constant branch
        }
        if (grad) backward(ckpt, item.tokens, cache, sig, *grad);
      }
      break;
    }
  }

  detail::check_finite(loss, "loss");
  return loss;
}

inline double loss_value(const Checkpoint& ckpt, const LossBatch& batch, LossKind kind) {
  return loss_and_grads(ckpt, batch, kind, nullptr);
}

// Central finite differences against the analytic gradient. Checks every
// parameter up to 5,000; past that a seeded 1,000-parameter subsample. Cost
// guard: refuses models over 50,000 parameters. Returns the max over checked
// parameters of |analytic − numeric| / max(1e−12, |analytic| + |numeric|).
inline double grad_check(const Checkpoint& ckpt, const LossBatch& batch, LossKind kind,
                         uint64_t subsample_seed = 0x5eed) {
  const int64_t n = param_count(ckpt.config);
  if (n > 50000) throw std::domain_error("grad_check: model too large for the oracle");

  std::vector<double> grad;
  loss_and_grads(ckpt, batch, kind, &grad);

  std::vector<int64_t> indices;
  if (n <= 5000) {
    indices.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) indices[static_cast<size_t>(i)] = i;
  } else {
    RngStream stream(derive_seed(subsample_seed, {stream_tag::grad_check}));
    std::unordered_set<int64_t> seen;
    while (seen.size() < 1000) {
      const int64_t i = stream.uniform_int(0, n - 1);
      if (seen.insert(i).second) indices.push_back(i);
    }
  }

  constexpr double h = 1e-5;
  Checkpoint probe = ckpt;
  double max_rel = 0.0;
  for (int64_t i : indices) {
    const double saved = probe.params[static_cast<size_t>(i)];
    probe.params[static_cast<size_t>(i)] = saved + h;
    const double lp = loss_value(probe, batch, kind);
    probe.params[static_cast<size_t>(i)] = saved - h;
    const double lm = loss_value(probe, batch, kind);
    probe.params[static_cast<size_t>(i)] = saved;
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = grad[static_cast<size_t>(i)];
    const double rel = std::abs(analytic - numeric) /
                       std::max(1e-12, std::abs(analytic) + std::abs(numeric));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace rllr
