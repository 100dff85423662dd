#pragma once

// Evaluation metrics: greedy-decode label accuracy, Pearson correlation for
// the ordinal task, judge-based pairwise win rates between policies, and the
// decode records the report stage persists. Everything here is a pure
// function of (checkpoints, examples, config).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "rllr/model.hpp"
#include "rllr/records.hpp"
#include "rllr/synthlang.hpp"

namespace rllr {

// Greedy continuation for every example's question, in example order.
inline std::vector<TokenSeq> greedy_answers(const SynthContext& ctx, const Checkpoint& policy,
                                            std::span<const Example> examples, int max_new) {
  std::vector<TokenSeq> out;
  out.reserve(examples.size());
  for (const Example& ex : examples)
    out.push_back(greedy_decode(policy, render_question(ctx, ex), max_new));
  return out;
}

// Exact-label accuracy over pre-computed answers; an answer that fails to
// parse counts as wrong.
inline double label_accuracy_from_answers(const SynthContext& ctx,
                                          std::span<const Example> examples,
                                          std::span<const TokenSeq> answers) {
  if (examples.size() != answers.size())
    throw PreconditionError("label_accuracy: answers do not cover the examples");
  if (examples.empty()) throw PreconditionError("label_accuracy: empty test set");
  int64_t hits = 0;
  for (size_t i = 0; i < examples.size(); ++i) {
    const auto parsed = parse_label(ctx, examples[i].task, answers[i]);
    if (parsed && *parsed == examples[i].gold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

inline double label_accuracy(const SynthContext& ctx, const Checkpoint& policy,
                             std::span<const Example> examples, int max_new) {
  return label_accuracy_from_answers(ctx, examples,
                                     greedy_answers(ctx, policy, examples, max_new));
}

// Sample Pearson correlation; absent when either side is constant (zero
// variance means the coefficient is undefined).
inline std::optional<double> pearson(std::span<const double> preds,
                                     std::span<const double> golds) {
  if (preds.size() != golds.size() || preds.size() < 2)
    throw PreconditionError("pearson: need two equal-length samples of size >= 2");
  const auto n = static_cast<double>(preds.size());
  double mp = 0.0, mg = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    mp += preds[i];
    mg += golds[i];
  }
  mp /= n;
  mg /= n;
  double cov = 0.0, vp = 0.0, vg = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const double dp = preds[i] - mp;
    const double dg = golds[i] - mg;
    cov += dp * dg;
    vp += dp * dp;
    vg += dg * dg;
  }
  if (vp == 0.0 || vg == 0.0) return std::nullopt;
  return std::clamp(cov / std::sqrt(vp * vg), -1.0, 1.0);
}

// Ordinal predictions for the correlation metric. An unparseable answer
// contributes the scale midpoint — dropping it would hand degenerate policies
// a free pass, and exact-match accuracy already reports the parse failures.
inline std::optional<double> rating_pearson(const SynthContext& ctx,
                                            std::span<const Example> examples,
                                            std::span<const TokenSeq> answers) {
  if (examples.size() != answers.size() || examples.size() < 2)
    throw PreconditionError("rating_pearson: need answers covering >= 2 examples");
  std::vector<double> preds, golds;
  preds.reserve(examples.size());
  golds.reserve(examples.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    const TaskSpec& spec = task_spec(examples[i].task);
    if (!spec.ordinal()) throw PreconditionError("rating_pearson: categorical task");
    const auto parsed = parse_label(ctx, examples[i].task, answers[i]);
    const double mid = (spec.label_grid.front() + spec.label_grid.back()) / 2.0;
    preds.push_back(parsed ? parsed->ord : mid);
    golds.push_back(examples[i].gold.ord);
  }
  return pearson(preds, golds);
}

struct WinRate {
  double win = 0.0;
  double lose = 0.0;
  double tie = 0.0;
  int64_t n = 0;
};

// Pairwise verdict fractions from per-example judge scores. Twin -inf scores
// (both answers unparseable) are an explicit tie; otherwise the score gap
// against tie_eps decides.
inline WinRate win_rate_from_scores(std::span<const double> scores_a,
                                    std::span<const double> scores_b, double tie_eps) {
  if (scores_a.size() != scores_b.size() || scores_a.empty())
    throw PreconditionError("win_rate: need equal-length nonempty score lists");
  WinRate r;
  r.n = static_cast<int64_t>(scores_a.size());
  int64_t win = 0, lose = 0, tie = 0;
  for (size_t i = 0; i < scores_a.size(); ++i) {
    const double a = scores_a[i];
    const double b = scores_b[i];
    if (a == b) ++tie;  // covers the -inf twin case without NaN arithmetic
    else if (a - b > tie_eps) ++win;
    else if (b - a > tie_eps) ++lose;
    else ++tie;
  }
  r.win = static_cast<double>(win) / static_cast<double>(r.n);
  r.lose = static_cast<double>(lose) / static_cast<double>(r.n);
  r.tie = static_cast<double>(tie) / static_cast<double>(r.n);
  return r;
}

inline std::vector<double> judge_scores(const SynthContext& ctx,
                                        std::span<const Example> examples,
                                        std::span<const TokenSeq> answers,
                                        const JudgeConfig& judge = {}) {
  if (examples.size() != answers.size())
    throw PreconditionError("judge_scores: answers do not cover the examples");
  std::vector<double> out;
  out.reserve(examples.size());
  for (size_t i = 0; i < examples.size(); ++i)
    out.push_back(judge_score(ctx, examples[i], answers[i], judge));
  return out;
}

// Head-to-head comparison of two policies' greedy answers under the judge.
inline WinRate win_rate(const SynthContext& ctx, const Checkpoint& policy_a,
                        const Checkpoint& policy_b, std::span<const Example> examples,
                        int max_new, const JudgeConfig& judge = {}) {
  if (policy_a.vocab_fingerprint != policy_b.vocab_fingerprint)
    throw PreconditionError("win_rate: policies disagree on the vocab");
  const auto ans_a = greedy_answers(ctx, policy_a, examples, max_new);
  const auto ans_b = greedy_answers(ctx, policy_b, examples, max_new);
  return win_rate_from_scores(judge_scores(ctx, examples, ans_a, judge),
                              judge_scores(ctx, examples, ans_b, judge), judge.tie_eps);
}

// Mean judge score with the -inf parse-failure sentinel mapped to 0 so one
// garbage answer cannot sink the aggregate to -inf.
inline double mean_judge_from_scores(std::span<const double> scores) {
  if (scores.empty()) throw PreconditionError("mean_judge: no scores");
  double sum = 0.0;
  for (double s : scores) sum += std::isfinite(s) ? s : 0.0;
  return sum / static_cast<double>(scores.size());
}

// The evaluate stage's persisted per-example record set for one policy.
inline std::vector<DecodeRecord> decode_records(const SynthContext& ctx,
                                                const Checkpoint& policy,
                                                std::span<const Example> examples, int max_new,
                                                const JudgeConfig& judge = {}) {
  std::vector<DecodeRecord> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) {
    DecodeRecord rec;
    rec.id = ex.id;
    rec.answer = greedy_decode(policy, render_question(ctx, ex), max_new);
    rec.parsed = parse_label(ctx, ex.task, rec.answer);
    rec.judge = judge_score(ctx, ex, rec.answer, judge);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace rllr
