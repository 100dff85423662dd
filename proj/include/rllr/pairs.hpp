#pragma once

// Comparison-pair construction. Two corpora feed the reward models:
//
//   ranked pairs    — k answers sampled from the SFT policy per question,
//                     byte-deduplicated, scored by the judge, and turned into
//                     every strictly-ordered pair; classified by whether the
//                     two parsed labels agree.
//   label pairs     — the gold oracle answer pitted against oracle answers
//                     fabricated for wrong labels, no sampling or judging
//                     involved.
//
// A standalone validator re-checks every pair's kind invariant against the
// originating example, independent of the construction path.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "rllr/model.hpp"
#include "rllr/records.hpp"
#include "rllr/rng.hpp"
#include "rllr/synthlang.hpp"

namespace rllr {

// k independent samples from the policy for one question. Deduplication is
// the ranker's job, not ours.
inline std::vector<TokenSeq> sample_candidates(const Checkpoint& policy,
                                               std::span<const Token> question, int k,
                                               double temperature, int max_new,
                                               RngStream& stream) {
  if (k < 2) throw PreconditionError("sample_candidates: k must be >= 2");
  if (!(temperature > 0.0)) throw PreconditionError("sample_candidates: temperature must be > 0");
  std::vector<TokenSeq> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i)
    out.push_back(sample(policy, question, temperature, max_new, stream).tokens);
  return out;
}

struct RankedPairsResult {
  std::vector<ComparisonPair> pairs;
  bool all_unparseable = false;      // every candidate failed to parse
  int64_t dropped_nongold_winner = 0;  // cross-label pairs whose winner isn't gold
};

// Dedup -> judge -> every ordered pair with a strict score gap, capped.
// Same parsed labels make a rationale-sensitive pair. Different labels make a
// label-sensitive pair only when the winner carries the gold label; a
// cross-label pair whose winner is wrong fits neither corpus (preferring it
// would reward a wrong label) and is dropped with a diagnostic count.
inline RankedPairsResult make_ranked_pairs(const SynthContext& ctx, const Example& ex,
                                           std::span<const TokenSeq> answers, int cap = 10,
                                           const JudgeConfig& judge = {}) {
  RankedPairsResult res;

  std::vector<TokenSeq> distinct;
  for (const TokenSeq& a : answers)
    if (std::find(distinct.begin(), distinct.end(), a) == distinct.end()) distinct.push_back(a);

  std::vector<std::optional<Label>> labels;
  bool any_parsed = false;
  for (const TokenSeq& a : distinct) {
    labels.push_back(parse_label(ctx, ex.task, a));
    any_parsed = any_parsed || labels.back().has_value();
  }
  if (!any_parsed) {
    res.all_unparseable = !answers.empty();
    return res;
  }
  if (distinct.size() < 2) return res;

  const JudgeVerdict verdict = judge_rank(ctx, ex, distinct, judge);
  std::vector<size_t> order(distinct.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return verdict.score[a] > verdict.score[b]; });

  for (size_t wi = 0; wi < order.size(); ++wi) {
    for (size_t li = wi + 1; li < order.size(); ++li) {
      if (static_cast<int>(res.pairs.size()) >= cap) return res;
      const size_t w = order[wi];
      const size_t l = order[li];
      const double gap = verdict.score[w] - verdict.score[l];
      if (!(gap > judge.tie_eps)) continue;  // ties (and -inf vs -inf) emit nothing
      if (!labels[w]) continue;              // unreachable: -inf never outranks

      ComparisonPair pair;
      pair.example_id = ex.id;
      pair.question = render_question(ctx, ex);
      pair.chosen = distinct[w];
      pair.rejected = distinct[l];
      if (labels[l] && *labels[w] == *labels[l]) {
        pair.kind = PairKind::rationale_sensitive;
      } else if (*labels[w] == ex.gold) {
        pair.kind = PairKind::label_sensitive;
      } else {
        ++res.dropped_nongold_winner;
        continue;
      }
      res.pairs.push_back(std::move(pair));
    }
  }
  return res;
}

// The wrong-label arithmetic on the raw value: add 3, add the offset u from
// [-1, 1], and wrap back into the 0..5 scale by subtracting 5 when the sum
// overshoots. Exposed separately so the worked numeric case is testable
// without grid snapping.
inline double incorrect_label_raw(double gold, double u) {
  double raw = gold + 3.0 + u;
  if (raw > 5.0) raw -= 5.0;
  return raw;
}

// A label guaranteed different from gold. Categorical: uniform over the other
// labels. Ordinal: the raw rule above with u drawn uniformly from the 0.5 grid
// spanning [-1, 1], snapped to the label grid; a collision with gold resamples
// (unreachable for this grid, kept as a guard).
inline Label incorrect_label(const TaskSpec& spec, const Label& gold, RngStream& stream) {
  if (spec.n_labels() < 2) throw PreconditionError("incorrect_label: label space too small");
  if (!spec.ordinal()) {
    for (;;) {
      const auto i = static_cast<int32_t>(stream.choice(static_cast<size_t>(spec.n_labels())));
      if (i != gold.cat) return Label::categorical(i);
    }
  }
  for (;;) {
    const double u = -1.0 + 0.5 * static_cast<double>(stream.uniform_int(0, 4));
    const double raw = incorrect_label_raw(gold.ord, u);
    const Label snapped = Label::ordinal(std::round(raw * 2.0) / 2.0);
    if (!(snapped == gold) && label_in_space(spec, snapped)) return snapped;
  }
}

// The set of labels incorrect_label can ever produce for this gold (the whole
// space minus gold for categorical tasks; the image of the u grid for ordinal
// ones). Bounds how many distinct rejected answers a question supports.
inline std::vector<Label> incorrect_label_support(const TaskSpec& spec, const Label& gold) {
  std::vector<Label> out;
  if (!spec.ordinal()) {
    for (int i = 0; i < spec.n_labels(); ++i)
      if (i != gold.cat) out.push_back(Label::categorical(i));
    return out;
  }
  for (int g = 0; g <= 4; ++g) {
    const double u = -1.0 + 0.5 * g;
    const Label l = Label::ordinal(std::round(incorrect_label_raw(gold.ord, u) * 2.0) / 2.0);
    if (!(l == gold) && label_in_space(spec, l) &&
        std::find(out.begin(), out.end(), l) == out.end())
      out.push_back(l);
  }
  return out;
}

struct LabelPairsResult {
  std::vector<ComparisonPair> pairs;
  int64_t shortfall = 0;  // n_pairs minus what the label space could supply
};

// Gold oracle answer versus oracle answers at distinct wrong labels. When the
// space can't supply n_pairs distinct wrong labels, emits the maximum
// available and reports the shortfall.
inline LabelPairsResult make_label_pairs(const SynthContext& ctx, const Example& ex, int n_pairs,
                                         RngStream& stream, int n_paraphrase = 4) {
  if (n_pairs < 1) throw PreconditionError("make_label_pairs: n_pairs must be >= 1");
  const TaskSpec& spec = task_spec(ex.task);
  const TokenSeq question = render_question(ctx, ex);
  const TokenSeq chosen = oracle_answer(ctx, ex, ex.gold, stream, n_paraphrase);

  const size_t available = incorrect_label_support(spec, ex.gold).size();
  const size_t target = std::min(static_cast<size_t>(n_pairs), available);

  LabelPairsResult res;
  res.shortfall = n_pairs - static_cast<int64_t>(target);
  std::vector<Label> used;
  int64_t attempts = 0;
  while (used.size() < target) {
    if (++attempts > 10000)
      throw std::logic_error("make_label_pairs: distinct-label sampling stalled");
    const Label wrong = incorrect_label(spec, ex.gold, stream);
    if (std::find(used.begin(), used.end(), wrong) != used.end()) continue;
    used.push_back(wrong);

    ComparisonPair pair;
    pair.example_id = ex.id;
    pair.question = question;
    pair.chosen = chosen;
    pair.rejected = oracle_answer(ctx, ex, wrong, stream, n_paraphrase);
    pair.kind = PairKind::label_sensitive;
    res.pairs.push_back(std::move(pair));
  }
  return res;
}

struct PairStats {
  int64_t total = 0;
  int64_t rationale_sensitive = 0;
  int64_t label_sensitive = 0;
  std::optional<double> fraction;  // rationale-sensitive share; absent when empty
};

inline PairStats pair_stats(std::span<const ComparisonPair> pairs) {
  PairStats s;
  s.total = static_cast<int64_t>(pairs.size());
  for (const auto& p : pairs)
    (p.kind == PairKind::rationale_sensitive ? s.rationale_sensitive : s.label_sensitive)++;
  if (s.total > 0)
    s.fraction = static_cast<double>(s.rationale_sensitive) / static_cast<double>(s.total);
  return s;
}

// Independent re-check of a pair's structural invariants against its source
// example. Throws PreconditionError naming the violated clause.
inline void validate_pair(const SynthContext& ctx, const Example& ex,
                          const ComparisonPair& pair) {
  if (pair.example_id != ex.id) throw PreconditionError("pair validator: example id mismatch");
  if (pair.question != render_question(ctx, ex))
    throw PreconditionError("pair validator: question does not match the example");
  if (pair.chosen == pair.rejected)
    throw PreconditionError("pair validator: chosen and rejected are byte-identical");
  const auto lc = parse_label(ctx, ex.task, pair.chosen);
  const auto lr = parse_label(ctx, ex.task, pair.rejected);
  if (pair.kind == PairKind::label_sensitive) {
    if (!lc || !(*lc == ex.gold))
      throw PreconditionError("pair validator: label-sensitive chosen must parse to gold");
    if (lr && *lr == ex.gold)
      throw PreconditionError("pair validator: label-sensitive rejected must differ from gold");
  } else {
    if (!lc || !lr || !(*lc == *lr))
      throw PreconditionError(
          "pair validator: rationale-sensitive pair needs equal parseable labels");
  }
}

inline void validate_pairs(const SynthContext& ctx, std::span<const Example> examples,
                           std::span<const ComparisonPair> pairs) {
  for (const auto& pair : pairs) {
    const Example* src = nullptr;
    for (const auto& ex : examples)
      if (ex.id == pair.example_id) {
        src = &ex;
        break;
      }
    if (!src) throw PreconditionError("pair validator: unknown example id");
    validate_pair(ctx, *src, pair);
  }
}

}  // namespace rllr
