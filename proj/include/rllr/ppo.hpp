#pragma once

// KL-penalized PPO over the SFT policy under three reward regimes: the
// rationale reward model alone (rlhf), the label reward model alone (rllr),
// and the threshold-truncated sum of both (mixed). The sequence-level KL
// penalty against the frozen SFT reference enters as per-token reward shaping
// whose sum telescopes to exactly -beta * (log pi(a|q) - log pi_ref(a|q)); the
// scalar reward-model score lands on the final answer token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "rllr/config.hpp"
#include "rllr/losses.hpp"
#include "rllr/model.hpp"
#include "rllr/optim.hpp"
#include "rllr/rng.hpp"

namespace rllr {

struct PpoConfig {
  PpoMode mode = PpoMode::mixed;
  double lambda = std::numeric_limits<double>::quiet_NaN();  // NaN = probe before training
  double beta = 0.05;
  double clip_eps = 0.2;
  double value_clip = 0.2;
  double gamma = 1.0;
  double gae_lambda = 0.95;
  int32_t rollout_size = 32;
  int32_t epochs = 4;
  double lr = 1e-5;
  int32_t iterations = 60;
  int32_t max_new = 64;
  int32_t snapshot_every = 0;
  int32_t probe_samples = 256;
  int32_t eval_every = 0;
  uint64_t seed = 0;

  void validate() const {
    if (std::isinf(lambda)) throw PreconditionError("ppo: lambda must be finite or NaN");
    if (!(beta >= 0.0)) throw PreconditionError("ppo: beta must be >= 0");
    if (!(clip_eps > 0.0 && clip_eps < 1.0))
      throw PreconditionError("ppo: clip_eps must be in (0,1)");
    if (rollout_size <= 0 || epochs <= 0 || !(lr > 0.0) || iterations < 0 || max_new <= 0 ||
        probe_samples <= 0)
      throw PreconditionError("ppo: positive sizes and lr required");
  }
};

inline PpoConfig ppo_config_from(const RunConfig& cfg, PpoMode mode) {
  return PpoConfig{.mode = mode,
                   .lambda = cfg.ppo.lambda,
                   .beta = cfg.ppo.beta,
                   .clip_eps = cfg.ppo.clip_eps,
                   .value_clip = cfg.ppo.value_clip,
                   .gamma = cfg.ppo.gamma,
                   .gae_lambda = cfg.ppo.gae_lambda,
                   .rollout_size = cfg.ppo.rollout_size,
                   .epochs = cfg.ppo.epochs,
                   .lr = cfg.ppo.lr,
                   .iterations = cfg.ppo.iterations,
                   .max_new = cfg.ppo.max_new,
                   .snapshot_every = cfg.ppo.snapshot_every,
                   .probe_samples = cfg.ppo.probe_samples,
                   .eval_every = cfg.ppo.eval_every,
                   .seed = cfg.seed};
}

// Truncated reward combination: the label reward contributes itself below the
// threshold and exactly the threshold at or above it, so the sum is
// nondecreasing in r1, continuous at r1 = lambda, and capped at lambda + r2.
inline double mixed_reward(double r1, double r2, double lambda) {
  if (!std::isfinite(r1) || !std::isfinite(r2) || !std::isfinite(lambda))
    throw PreconditionError("mixed_reward: non-finite input");
  return r1 < lambda ? r1 + r2 : lambda + r2;
}

inline double assemble_reward(PpoMode mode, double r1, double r2, double lambda) {
  switch (mode) {
    case PpoMode::rlhf: return r2;
    case PpoMode::rllr: return r1;
    case PpoMode::mixed: return mixed_reward(r1, r2, lambda);
  }
  throw std::invalid_argument("assemble_reward: bad mode");
}

struct Trajectory {
  TokenSeq question;
  TokenSeq answer;
  std::vector<double> behavior_logprob;   // policy at sampling time, per token
  std::vector<double> reference_logprob;  // frozen SFT, per token
  std::vector<double> value;              // value model, per token (pre-emission state)
  double r1 = 0.0;
  double r2 = 0.0;
  double terminal = 0.0;                  // assemble_reward on the full (q, a)
  std::vector<double> shaped;             // KL shaping per token + terminal at the end
  std::vector<double> advantage;
  std::vector<double> ret;
  bool terminated = false;                // EOS emitted inside the budget
};

// Log-prob of each answer token under the checkpoint, one full-sequence
// forward; token j is read from the logits at position len(question)+j-1.
inline std::vector<double> sequence_logprobs(const Checkpoint& ckpt,
                                             std::span<const Token> question,
                                             std::span<const Token> answer) {
  if (!ckpt.config.head_lm) throw PreconditionError("sequence_logprobs: lm head required");
  if (question.empty() || answer.empty())
    throw PreconditionError("sequence_logprobs: empty question or answer");
  TokenSeq seq(question.begin(), question.end());
  seq.insert(seq.end(), answer.begin(), answer.end());
  const ForwardOutput out = forward(ckpt, seq);
  const int64_t V = ckpt.config.vocab_size;
  std::vector<double> lp(static_cast<size_t>(V));
  std::vector<double> res(answer.size());
  for (size_t j = 0; j < answer.size(); ++j) {
    const size_t pos = question.size() + j - 1;
    nn::log_softmax_row(out.logits.data() + pos * static_cast<size_t>(V), lp.data(), V);
    res[j] = lp[static_cast<size_t>(answer[j])];
  }
  return res;
}

// Value estimate for each answer token, read at the position holding the
// state the policy saw before emitting that token.
inline std::vector<double> sequence_values(const Checkpoint& ckpt,
                                           std::span<const Token> question,
                                           std::span<const Token> answer) {
  if (!ckpt.config.head_value) throw PreconditionError("sequence_values: value head required");
  if (question.empty() || answer.empty())
    throw PreconditionError("sequence_values: empty question or answer");
  TokenSeq seq(question.begin(), question.end());
  seq.insert(seq.end(), answer.begin(), answer.end());
  const ForwardOutput out = forward(ckpt, seq);
  std::vector<double> res(answer.size());
  for (size_t j = 0; j < answer.size(); ++j) res[j] = out.values[question.size() + j - 1];
  return res;
}

namespace detail {

inline double reward_of(const Checkpoint& rm, std::span<const Token> question,
                        std::span<const Token> answer) {
  TokenSeq seq(question.begin(), question.end());
  seq.insert(seq.end(), answer.begin(), answer.end());
  return forward(rm, seq).reward;
}

inline void require_fingerprint(const Checkpoint& a, const Checkpoint& b, const char* what) {
  if (a.vocab_fingerprint != b.vocab_fingerprint)
    throw PreconditionError(std::string("ppo: vocab fingerprint mismatch with ") + what);
}

}  // namespace detail

// One sampled answer per prompt at temperature 1.0, with reference log-probs,
// values, the mode's terminal reward, and the KL shaping terms. Each prompt
// draws from its own derived stream, so the result is a pure function of
// (checkpoints, prompts, cfg, iter). Reward models are consulted only when
// the mode uses them; unterminated samples are kept and flagged, with the
// terminal reward still charged at the last token.
inline std::vector<Trajectory> rollout(const Checkpoint& policy, const Checkpoint& reference,
                                       const Checkpoint* r1, const Checkpoint* r2,
                                       const Checkpoint& value_model,
                                       std::span<const TokenSeq> prompts, const PpoConfig& cfg,
                                       int64_t iter) {
  cfg.validate();
  const bool need_r1 = cfg.mode != PpoMode::rlhf;
  const bool need_r2 = cfg.mode != PpoMode::rllr;
  if (need_r1 && !r1) throw PreconditionError("rollout: mode needs the label reward model");
  if (need_r2 && !r2) throw PreconditionError("rollout: mode needs the rationale reward model");
  if (cfg.mode == PpoMode::mixed && std::isnan(cfg.lambda))
    throw PreconditionError("rollout: mixed mode needs a resolved lambda");
  detail::require_fingerprint(policy, reference, "reference");
  detail::require_fingerprint(policy, value_model, "value model");
  if (need_r1) detail::require_fingerprint(policy, *r1, "label reward model");
  if (need_r2) detail::require_fingerprint(policy, *r2, "rationale reward model");

  std::vector<Trajectory> out;
  out.reserve(prompts.size());
  for (size_t slot = 0; slot < prompts.size(); ++slot) {
    const TokenSeq& q = prompts[slot];
    if (static_cast<int64_t>(q.size()) >= policy.config.context_length)
      throw PreconditionError("rollout: prompt fills the context, no room to sample");
    RngStream stream = make_stream(cfg.seed, stream_tag::ppo_rollout,
                                   static_cast<uint64_t>(iter), static_cast<uint64_t>(slot));
    SampleResult s = sample(policy, q, 1.0, cfg.max_new, stream);

    Trajectory traj;
    traj.question = q;
    traj.answer = std::move(s.tokens);
    traj.behavior_logprob = std::move(s.logprob);
    traj.terminated = s.terminated;
    traj.reference_logprob = sequence_logprobs(reference, q, traj.answer);
    traj.value = sequence_values(value_model, q, traj.answer);
    traj.r1 = need_r1 ? detail::reward_of(*r1, q, traj.answer) : 0.0;
    traj.r2 = need_r2 ? detail::reward_of(*r2, q, traj.answer) : 0.0;
    traj.terminal = assemble_reward(cfg.mode, traj.r1, traj.r2, cfg.lambda);

    traj.shaped.resize(traj.answer.size());
    for (size_t j = 0; j < traj.answer.size(); ++j)
      traj.shaped[j] = -cfg.beta * (traj.behavior_logprob[j] - traj.reference_logprob[j]);
    traj.shaped.back() += traj.terminal;
    out.push_back(std::move(traj));
  }
  return out;
}

// Generalized advantage estimation over the answer tokens with a zero
// terminal bootstrap; returns = advantages + values.
inline void compute_gae(Trajectory& traj, double gamma, double gae_lambda) {
  const size_t T = traj.answer.size();
  if (traj.shaped.size() != T || traj.value.size() != T)
    throw PreconditionError("compute_gae: shaped rewards and values must cover the answer");
  traj.advantage.assign(T, 0.0);
  traj.ret.assign(T, 0.0);
  double next_adv = 0.0;
  double next_value = 0.0;
  for (size_t j = T; j-- > 0;) {
    const double delta = traj.shaped[j] + gamma * next_value - traj.value[j];
    next_adv = delta + gamma * gae_lambda * next_adv;
    next_value = traj.value[j];
    traj.advantage[j] = next_adv;
    traj.ret[j] = next_adv + traj.value[j];
  }
}

// In-place batch whitening of advantages (population variance, 1e-8 guard).
// A single-token batch has no spread to normalize and is left centered only.
inline void whiten_advantages(std::span<Trajectory> trajectories) {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& t : trajectories)
    for (double a : t.advantage) {
      sum += a;
      ++n;
    }
  if (n == 0) throw PreconditionError("whiten_advantages: no advantages");
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const auto& t : trajectories)
    for (double a : t.advantage) sq += (a - mean) * (a - mean);
  const double sd = n > 1 ? std::sqrt(sq / static_cast<double>(n)) : 1.0;
  for (auto& t : trajectories)
    for (double& a : t.advantage) a = (a - mean) / (sd + 1e-8);
}

struct PpoIterMetrics {
  int64_t iter = 0;
  PpoMode mode = PpoMode::mixed;
  double mean_terminal_reward = 0.0;
  double mean_r1 = 0.0;
  double mean_r2 = 0.0;
  double mean_seq_kl = 0.0;  // mean over trajectories of sum(behavior - reference)
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  std::optional<double> eval_accuracy;
};

inline std::string ppo_metrics_to_csv(std::span<const PpoIterMetrics> rows) {
  CsvWriter csv({"iter", "mode", "mean_terminal_reward", "mean_r1", "mean_r2", "mean_seq_kl",
                 "clip_fraction", "policy_loss", "value_loss", "eval_accuracy"});
  for (const auto& r : rows)
    csv.append_row({format_int(r.iter), ppo_mode_name(r.mode),
                    format_double(r.mean_terminal_reward), format_double(r.mean_r1),
                    format_double(r.mean_r2), format_double(r.mean_seq_kl),
                    format_double(r.clip_fraction), format_double(r.policy_loss),
                    format_double(r.value_loss),
                    r.eval_accuracy ? format_double(*r.eval_accuracy) : std::string()});
  return csv.str();
}

// One optimization phase over a rollout batch: cfg.epochs passes of the
// clipped-surrogate policy loss and the clipped value loss, gradient norms
// capped at 1.0. Advantages must already be whitened. Reported losses and
// clip fraction come from the last epoch's evaluation. NumericError
// propagates to the caller, which owns checkpoint rollback.
inline PpoIterMetrics ppo_update(Checkpoint& policy, Checkpoint& value_model,
                                 AdamState& policy_adam, AdamState& value_adam,
                                 std::span<const Trajectory> trajectories,
                                 const PpoConfig& cfg) {
  if (trajectories.empty()) throw PreconditionError("ppo_update: no trajectories");

  LossBatch batch;
  batch.clip_eps = cfg.clip_eps;
  batch.value_clip = cfg.value_clip;
  for (const auto& traj : trajectories) {
    PpoPolicyItem pol;
    pol.tokens = traj.question;
    pol.tokens.insert(pol.tokens.end(), traj.answer.begin(), traj.answer.end());
    pol.answer_begin = static_cast<int32_t>(traj.question.size());
    pol.behavior_logprob = traj.behavior_logprob;
    pol.advantage = traj.advantage;
    PpoValueItem val;
    val.tokens = pol.tokens;
    val.answer_begin = pol.answer_begin;
    val.value_old = traj.value;
    val.ret = traj.ret;
    batch.ppo_policy.push_back(std::move(pol));
    batch.ppo_value.push_back(std::move(val));
  }

  PpoIterMetrics m;
  m.mode = cfg.mode;
  for (const auto& traj : trajectories) {
    m.mean_terminal_reward += traj.terminal;
    m.mean_r1 += traj.r1;
    m.mean_r2 += traj.r2;
    double kl = 0.0;
    for (size_t j = 0; j < traj.answer.size(); ++j)
      kl += traj.behavior_logprob[j] - traj.reference_logprob[j];
    m.mean_seq_kl += kl;
  }
  const double inv_n = 1.0 / static_cast<double>(trajectories.size());
  m.mean_terminal_reward *= inv_n;
  m.mean_r1 *= inv_n;
  m.mean_r2 *= inv_n;
  m.mean_seq_kl *= inv_n;

  const AdamConfig adam_cfg{.lr = cfg.lr};
  std::vector<double> grad;
  for (int32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    PpoTokenStats stats;
    m.policy_loss = loss_and_grads(policy, batch, LossKind::ppo_policy, &grad, &stats);
    clip_grad_norm(grad, 1.0);
    adam_step(policy.params, grad, policy_adam, adam_cfg);
    m.clip_fraction = stats.rho.empty()
                          ? 0.0
                          : static_cast<double>(stats.clipped) /
                                static_cast<double>(stats.rho.size());

    m.value_loss = loss_and_grads(value_model, batch, LossKind::ppo_value, &grad);
    clip_grad_norm(grad, 1.0);
    adam_step(value_model.params, grad, value_adam, adam_cfg);
  }
  return m;
}

// Nearest-rank percentile on a copy: sorted ascending, index round(p*(n-1)).
inline double percentile_nearest(std::vector<double> values, double p) {
  if (values.empty()) throw PreconditionError("percentile_nearest: empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw PreconditionError("percentile_nearest: p outside [0,1]");
  std::sort(values.begin(), values.end());
  const auto idx = static_cast<size_t>(
      std::llround(p * static_cast<double>(values.size() - 1)));
  return values[idx];
}

// Default lambda: the 80th percentile of the label reward model's scores over
// probe_samples temperature-1.0 answers from the SFT policy. Computed once and
// logged; a config-supplied lambda skips the probe entirely.
inline double probe_lambda(const Checkpoint& sft_policy, const Checkpoint& r1,
                           std::span<const TokenSeq> prompts, int probe_samples, int max_new,
                           uint64_t seed) {
  if (prompts.empty()) throw PreconditionError("probe_lambda: empty prompt pool");
  RngStream stream = make_stream(seed, stream_tag::lambda_probe);
  std::vector<size_t> order(prompts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  stream.shuffle(order);
  const size_t n = std::min(order.size(), static_cast<size_t>(probe_samples));

  std::vector<double> scores;
  scores.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const TokenSeq& q = prompts[order[i]];
    const SampleResult s = sample(sft_policy, q, 1.0, max_new, stream);
    scores.push_back(detail::reward_of(r1, q, s.tokens));
  }
  return percentile_nearest(std::move(scores), 0.8);
}

struct PpoTrainResult {
  Checkpoint policy;
  std::vector<PpoIterMetrics> metrics;
  double lambda_used = std::numeric_limits<double>::quiet_NaN();
  bool aborted = false;  // non-finite loss rolled the iteration back and stopped
};

// The full RL stage: freeze the SFT checkpoint as the reference, attach a
// zero value head for the critic, resolve lambda if the mixed mode needs it,
// then iterate rollout -> GAE -> whitening -> ppo_update. A non-finite loss
// inside an iteration restores both models to the iteration's start and stops
// training with what was last good.
inline PpoTrainResult train_ppo(
    const Checkpoint& sft, const Checkpoint* r1, const Checkpoint* r2,
    std::span<const TokenSeq> prompts, const PpoConfig& cfg,
    const std::function<void(int64_t, const Checkpoint&)>& snapshot_cb = nullptr,
    const std::function<double(const Checkpoint&)>& eval_cb = nullptr) {
  cfg.validate();
  if (prompts.empty()) throw PreconditionError("train_ppo: empty prompt pool");
  if (!sft.config.head_lm) throw PreconditionError("train_ppo: init lacks the lm head");

  PpoTrainResult res;
  res.policy = sft;
  res.policy.role = Role::policy;
  if (cfg.mode == PpoMode::mixed) {
    if (std::isnan(cfg.lambda)) {
      if (!r1) throw PreconditionError("train_ppo: lambda probe needs the label reward model");
      res.lambda_used =
          probe_lambda(sft, *r1, prompts, cfg.probe_samples, cfg.max_new, cfg.seed);
    } else {
      res.lambda_used = cfg.lambda;
    }
  }
  if (cfg.iterations == 0) return res;

  PpoConfig resolved = cfg;
  resolved.lambda = res.lambda_used;

  Checkpoint reference = sft;
  reference.role = Role::reference;
  Checkpoint value_model = with_heads(sft, /*lm=*/false, /*value=*/true, /*reward=*/false,
                                      Role::value);
  AdamState policy_adam(res.policy.params.size());
  AdamState value_adam(value_model.params.size());

  // Prompt cycler: a fresh shuffled pass over the pool whenever it runs dry.
  std::vector<size_t> order(prompts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();
  uint64_t pass = 0;
  std::vector<TokenSeq> batch_prompts;

  for (int64_t iter = 0; iter < cfg.iterations; ++iter) {
    batch_prompts.clear();
    for (int32_t i = 0; i < cfg.rollout_size; ++i) {
      if (cursor == order.size()) {
        RngStream shuffle = make_stream(cfg.seed, stream_tag::ppo_rollout, ~uint64_t{0}, pass++);
        shuffle.shuffle(order);
        cursor = 0;
      }
      batch_prompts.push_back(prompts[order[cursor++]]);
    }

    std::vector<Trajectory> trajs =
        rollout(res.policy, reference, r1, r2, value_model, batch_prompts, resolved, iter);
    for (auto& traj : trajs) compute_gae(traj, cfg.gamma, cfg.gae_lambda);
    whiten_advantages(trajs);

    const std::vector<double> policy_before = res.policy.params;
    const std::vector<double> value_before = value_model.params;
    PpoIterMetrics m;
    try {
      m = ppo_update(res.policy, value_model, policy_adam, value_adam, trajs, resolved);
    } catch (const NumericError&) {
      res.policy.params = policy_before;
      value_model.params = value_before;
      res.aborted = true;
      break;
    }
    m.iter = iter;
    if (cfg.eval_every > 0 && eval_cb && (iter + 1) % cfg.eval_every == 0)
      m.eval_accuracy = eval_cb(res.policy);
    res.metrics.push_back(std::move(m));
    if (cfg.snapshot_every > 0 && snapshot_cb && (iter + 1) % cfg.snapshot_every == 0)
      snapshot_cb(iter, res.policy);
  }
  return res;
}

}  // namespace rllr
